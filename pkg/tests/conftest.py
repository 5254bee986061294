import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from expert_consistency.data import DecisionDataset

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


def make_dataset(n=200, m=3, k=4, seed=0, with_outcomes=True, selective=False):
    """Small logistic dataset with every expert holding at least two cases."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, m))
    beta = np.linspace(1.0, -0.5, m)
    d = (rng.random(n) < 1 / (1 + np.exp(-(X @ beta)))).astype(int)
    y = (rng.random(n) < 1 / (1 + np.exp(-(X @ beta[::-1])))).astype(int)
    experts = 1 + np.arange(n) % k
    obs = d == 1 if selective else np.ones(n, dtype=bool)
    return DecisionDataset(
        features=X, decisions=d, expert_ids=experts,
        outcomes=y if with_outcomes else None,
        outcome_observed=obs if with_outcomes else None,
        group=(rng.random(n) < 0.5).astype(int),
        construct=y,
    )


@pytest.fixture
def small_ds():
    return make_dataset()


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(criterion: int, passed: bool, detail: str) -> str:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[criterion] = line
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
