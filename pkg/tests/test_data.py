import numpy as np
import pytest
from hypothesis import given, strategies as st

from expert_consistency.data import (DataError, DatasetSchema, DecisionDataset, load_dataset, load_schema,
                                     monte_carlo_split, read_preamble, write_dataset, write_schema)

from conftest import make_dataset

SCHEMA = DatasetSchema(features=("a", "b"), decision="d", expert="who", outcome="y", case_id="id")


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_expert_ids_are_reindexed_densely(tmp_path):
    path = write(tmp_path, "id,a,b,d,y,who\nr0,0.1,1,1,1,7\nr1,0.2,2,0,0,7\nr2,0.3,3,1,,12\n")
    ds = load_dataset(path, SCHEMA)
    assert ds.expert_ids.tolist() == [1, 1, 2]
    assert ds.k == 2
    assert ds.expert_labels == ("7", "12")
    assert ds.outcome_observed.tolist() == [True, True, False]


def test_selective_mode_rejects_outcome_on_censoring_decision(tmp_path):
    path = write(tmp_path, "id,a,b,d,y,who\nr0,0.1,1,1,1,7\nr1,0.2,2,0,1,7\n")
    with pytest.raises(DataError, match="row 1"):
        load_dataset(path, SCHEMA, selective_mode=1)


@pytest.mark.parametrize("text, message", [
    ("id,a,b,d,y\nr0,0.1,1,1,1\n", "missing column"),
    ("id,a,b,d,y,who\nr0,0.1,1,2,1,7\n", "decision"),
    ("id,a,b,d,y,who\nr0,0.1,1,1,x,7\n", "outcome"),
    ("", "empty"),
    ("id,a,b,d,y,who\n", "empty"),
])
def test_ingestion_errors(tmp_path, text, message):
    with pytest.raises(DataError, match=message):
        load_dataset(write(tmp_path, text), SCHEMA)


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        load_dataset(tmp_path / "absent.csv", SCHEMA)


def test_wide_file_loads_without_truncation(tmp_path):
    rng = np.random.default_rng(0)
    n, m = 500, 820
    X = rng.standard_normal((n, m))
    ds = DecisionDataset(X, rng.integers(0, 2, n), 1 + np.arange(n) % 5, outcomes=rng.integers(0, 2, n))
    schema = write_dataset(ds, tmp_path / "wide.csv")
    back = load_dataset(tmp_path / "wide.csv", schema)
    assert back.features.shape == (n, m)
    np.testing.assert_array_equal(back.features, X)


def test_round_trip_preserves_content(tmp_path):
    ds = make_dataset(n=60, selective=True)
    schema = write_dataset(ds, tmp_path / "d.csv", preamble={"config_hash": "abc", "seed": 3})
    write_schema(schema, tmp_path / "s.ini")
    back = load_dataset(tmp_path / "d.csv", load_schema(tmp_path / "s.ini"), selective_mode=1)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.decisions, ds.decisions)
    np.testing.assert_array_equal(back.expert_ids, ds.expert_ids)
    np.testing.assert_array_equal(back.outcome_observed, ds.outcome_observed)
    obs = ds.outcome_observed
    np.testing.assert_array_equal(back.outcomes[obs], ds.outcomes[obs])
    np.testing.assert_array_equal(back.group, ds.group)
    assert read_preamble(tmp_path / "d.csv") == {"config_hash": "abc", "seed": "3"}


def test_censored_outcome_written_as_empty_field(tmp_path):
    ds = make_dataset(n=20, selective=True)
    write_dataset(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    header = lines[0].split(",")
    col = header.index("outcome")
    for i, line in enumerate(lines[1:]):
        field = line.split(",")[col]
        assert (field == "") == (ds.decisions[i] == 0)


def test_dataset_rejects_sparse_expert_ids():
    with pytest.raises(DataError, match="dense"):
        DecisionDataset(np.zeros((3, 1)), [0, 1, 0], [1, 3, 3])


def test_split_size_after_repair():
    ds = make_dataset(n=100, k=4)
    plan = monte_carlo_split(ds, 0.75, seed=1)
    assert len(plan.train_indices) in (74, 75, 76)
    assert sorted(np.concatenate([plan.train_indices, plan.test_indices]).tolist()) == list(range(100))


def test_split_single_expert_two_cases():
    ds = DecisionDataset(np.array([[0.0], [1.0]]), [0, 1], [1, 1])
    plan = monte_carlo_split(ds, 0.75, seed=0)
    assert len(plan.train_indices) == 1 and len(plan.test_indices) == 1


def test_split_is_deterministic():
    ds = make_dataset(n=80)
    assert monte_carlo_split(ds, 0.75, 5) == monte_carlo_split(ds, 0.75, 5)
    assert monte_carlo_split(ds, 0.75, 5) != monte_carlo_split(ds, 0.75, 6)


def test_split_errors():
    ds = DecisionDataset(np.zeros((3, 1)), [0, 1, 0], [1, 1, 2])
    with pytest.raises(DataError, match="expert 2"):
        monte_carlo_split(ds, 0.75, 0)
    with pytest.raises(ValueError):
        monte_carlo_split(make_dataset(n=20), 1.0, 0)


def test_split_keeps_linked_cases_together():
    ds = make_dataset(n=120, k=3)
    link = np.arange(120) // 4
    plan = monte_carlo_split(ds, 0.75, 2, linkage=link)
    train_keys = set(link[plan.train_indices])
    test_keys = set(link[plan.test_indices])
    assert not train_keys & test_keys


@given(n=st.integers(20, 150), k=st.integers(1, 6), seed=st.integers(0, 10_000),
       frac=st.floats(0.2, 0.9))
def test_every_expert_on_both_sides(n, k, seed, frac):
    ds = make_dataset(n=n, k=k, seed=seed % 97)
    plan = monte_carlo_split(ds, frac, seed)
    for h in range(1, k + 1):
        assert np.any(ds.expert_ids[plan.train_indices] == h)
        assert np.any(ds.expert_ids[plan.test_indices] == h)


def test_subset_and_observed_outcomes():
    ds = make_dataset(n=30, selective=True)
    idx, vals = ds.observed_outcomes()
    assert np.all(ds.decisions[idx] == 1)
    sub = ds.subset([0, 1, 2, 3, 5])
    assert sub.n == 5 and sub.case_ids.tolist() == ds.case_ids[[0, 1, 2, 3, 5]].tolist()
