import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from expert_consistency import glm, oracles
from expert_consistency.consistency import (ConsistencyEstimator, ConsistencyParams, Membership,
                                            agreement_check, agreement_lower_bound, build_consistency_set,
                                            robust_mask, validate_consistency)
from expert_consistency.influence import InfluenceTable, build_table

TESTED = ConsistencyParams(0.05, 6.0, 0.95, 0.002)

# Phi^{-1}(0.9875) by bisection on the erfc CDF, and the resulting bound for
# delta=0.05, sigma=0.2, |H|=400, C=0.95.
Z_09875 = 2.241402727604971
BOUND_400 = 0.9275859727239503


def metric_table(prob, m1, m2, m3):
    prob = np.atleast_1d(np.asarray(prob, dtype=float))
    n = prob.size
    return InfluenceTable(
        influence=np.zeros((n, 20)),
        query_prob=prob,
        center_of_mass=np.broadcast_to(np.asarray(m1, dtype=float), (n,)).copy(),
        aligned_share=np.broadcast_to(np.asarray(m2, dtype=float), (n,)).copy(),
        max_abs=np.broadcast_to(np.asarray(m3, dtype=float), (n,)).copy(),
    )


def test_half_probability_is_outside_for_any_delta():
    for delta in (0.01, 0.2, 0.49):
        params = ConsistencyParams(delta, 0.0, 0.0, 10.0)
        table = metric_table([0.5, 0.5], 20.0, 1.0, 0.0)
        assert not build_consistency_set(table, params).in_set.any()
        assert not build_consistency_set(table, params, np.array([0, 1])).in_set.any()


def test_broad_aligned_support_admits_positive_case():
    table = metric_table(0.99, 7.0, 0.97, 0.01)
    got = build_consistency_set(table, TESTED)
    assert got.membership[0] == Membership.POSITIVE


def test_negligible_influence_alone_admits_case():
    table = metric_table(0.99, 2.0, 0.5, 0.001)
    assert build_consistency_set(table, TESTED).membership[0] == Membership.POSITIVE
    assert build_consistency_set(table, ConsistencyParams(0.05, 6.0, 0.95, None)).membership[0] == Membership.OUTSIDE


def test_training_gate_requires_matching_decision():
    table = metric_table([0.02, 0.02, 0.98, 0.98], 7.0, 0.97, 0.01)
    got = build_consistency_set(table, TESTED, np.array([0, 1, 1, 0]))
    assert got.membership.tolist() == [Membership.NEGATIVE, Membership.OUTSIDE, Membership.POSITIVE,
                                       Membership.OUTSIDE]
    with pytest.raises(ValueError):
        build_consistency_set(table, TESTED, np.array([0, 1]))


def test_inequalities_are_strict():
    table = metric_table([0.95, 0.99, 0.99], [7.0, 6.0, 7.0], [0.97, 0.97, 0.95], 1.0)
    assert not build_consistency_set(table, TESTED).in_set.any()
    assert not robust_mask(metric_table(0.99, 1.0, 0.0, 0.002), TESTED)[0]


def test_undefined_metrics_only_pass_through_negligible_branch():
    table = build_table(np.zeros((1, 4)), np.array([0.99]))
    assert build_consistency_set(table, TESTED).in_set[0]
    assert not build_consistency_set(table, ConsistencyParams(0.05, 0.0, 0.0, None)).in_set[0]


@pytest.mark.parametrize("kwargs", [
    dict(delta=0.5), dict(delta=0.0), dict(gamma1=-1.0), dict(gamma2=1.1), dict(gamma3=0.0),
])
def test_params_validation(kwargs):
    with pytest.raises(ValueError):
        ConsistencyParams(**kwargs)


def test_params_parse_and_format_round_trip():
    p = ConsistencyParams.parse("0.05, 6, 0.95, 0.002")
    assert p == TESTED
    assert ConsistencyParams.parse(p.format()) == p
    off = ConsistencyParams.parse("0.1,3,1,off")
    assert off.gamma3 is None and off.format().endswith(",off")
    with pytest.raises(ValueError):
        ConsistencyParams.parse("0.1,3,1")


def test_conservative_defaults_use_half_the_experts():
    assert ConsistencyParams.conservative(20) == ConsistencyParams(0.05, 10.0, 1.0, None)
    assert ConsistencyParams.conservative(7, 0.002).gamma1 == 3.0


def test_bound_matches_independent_quantile():
    assert oracles.inverse_normal_oracle(0.9875) == pytest.approx(Z_09875, abs=1e-12)
    assert agreement_lower_bound(0.05, 0.2, 400, 0.95) == pytest.approx(BOUND_400, abs=1e-12)
    assert BOUND_400 == pytest.approx(0.9276, abs=5e-5)


def test_bound_limits():
    assert agreement_lower_bound(0.05, 0.0, 7, 0.95) == 0.95
    assert abs(agreement_lower_bound(0.05, 0.3, 10**6, 0.95) - 0.95) < 1e-3


def test_bound_input_errors():
    with pytest.raises(ValueError):
        agreement_lower_bound(0.05, 0.1, 0, 0.95)
    with pytest.raises(ValueError):
        agreement_lower_bound(0.05, 0.1, 10, 1.0)


def test_bernoulli_097_passes_validation():
    rng = np.random.default_rng(0)
    check = agreement_check((rng.random(500) < 0.97).astype(int), 1, 0.05, 0.95)
    assert check.passed and check.status == "passed"


def test_deterministic_decisions_always_pass():
    check = agreement_check(np.ones(12, dtype=int), 1, 0.05, 0.95)
    assert check.agreement_rate == 1.0 and check.passed


def test_low_true_rate_is_detected_with_high_power():
    rng = np.random.default_rng(1)
    failures = sum(not agreement_check((rng.random(500) < 0.80).astype(int), 1, 0.05, 0.95).passed
                   for _ in range(200))
    assert failures / 200 >= 0.95


def test_empty_direction_is_unvalidatable():
    check = agreement_check(np.array([], dtype=int), 0, 0.05, 0.95)
    assert check.status == "unvalidatable" and check.set_size == 0


def test_coverage_failure_rate_within_binomial_noise():
    # true rate exactly 1 - delta: the bound should be undercut in at most
    # (1 - C) of replications, up to binomial noise on 500 trials
    cov = oracles.ci_coverage_oracle(0.05, 0.95, 400, 0.95, trials=500, seed=4)
    noise = 3 * math.sqrt(0.05 * 0.95 / 500)
    assert 1 - cov.value <= 0.05 + noise


def test_validate_on_fresh_fold():
    rng = np.random.default_rng(8)
    n = 1200
    X = rng.standard_normal((n, 2))
    d = (rng.random(n) < 1 / (1 + np.exp(-4 * X[:, 0]))).astype(int)
    experts = 1 + np.arange(n) % 6
    model = glm.fit_model(X[:800], d[:800])
    est = ConsistencyEstimator(model, X[:800], d[:800], experts[:800], TESTED)
    checks = validate_consistency(est, X[800:], d[800:])
    assert [c.side for c in checks] == ["positive", "negative"]
    assert all(c.set_size > 0 and c.passed for c in checks)


def test_membership_is_deterministic(small_ds):
    model = glm.fit_model(small_ds.features, small_ds.decisions)
    est = ConsistencyEstimator(model, small_ds.features, small_ds.decisions, small_ds.expert_ids, TESTED)
    a = est.assign(small_ds.features, small_ds.decisions)
    b = est.assign(small_ds.features, small_ds.decisions)
    np.testing.assert_array_equal(a.membership, b.membership)


@st.composite
def nested_params(draw):
    d1 = draw(st.floats(0.01, 0.45))
    d2 = draw(st.floats(d1, 0.49))
    g1b = draw(st.floats(0.0, 10.0))
    g1a = draw(st.floats(g1b, 12.0))
    g2b = draw(st.floats(0.0, 1.0))
    g2a = draw(st.floats(g2b, 1.0))
    g3a = draw(st.none() | st.floats(1e-5, 0.01))
    g3b = draw(st.none() | st.floats(1e-5, 0.01)) if g3a is None else draw(st.floats(g3a, 0.02))
    return ConsistencyParams(d1, g1a, g2a, g3a), ConsistencyParams(d2, g1b, g2b, g3b)


@given(nested_params(), st.integers(0, 1000), st.booleans())
def test_relaxing_params_never_shrinks_set(pair, seed, with_decisions):
    strict, relaxed = pair
    rng = np.random.default_rng(seed)
    n = 60
    table = InfluenceTable(
        influence=np.zeros((n, 12)),
        query_prob=rng.beta(0.3, 0.3, n),
        center_of_mass=np.where(rng.random(n) < 0.1, np.nan, rng.uniform(1, 12, n)),
        aligned_share=rng.random(n),
        max_abs=rng.exponential(0.003, n),
    )
    d = (rng.random(n) < table.query_prob).astype(int) if with_decisions else None
    a = build_consistency_set(table, strict, d).in_set
    b = build_consistency_set(table, relaxed, d).in_set
    assert np.all(b[a])


@given(st.integers(0, 1000))
def test_members_satisfy_gate_and_influence_condition(seed):
    rng = np.random.default_rng(seed)
    n = 80
    table = InfluenceTable(np.zeros((n, 20)), rng.random(n), rng.uniform(1, 20, n), rng.random(n),
                           rng.exponential(0.004, n))
    got = build_consistency_set(table, TESTED)
    p = table.query_prob
    assert np.all(p[got.positive] > 0.95) and np.all(p[got.negative] < 0.05)
    ok = ((table.center_of_mass > 6) & (table.aligned_share > 0.95)) | (table.max_abs < 0.002)
    assert np.all(ok[got.in_set])
