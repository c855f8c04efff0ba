import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alqueue import surrogate as sg
from alqueue.core import Dataset

from conftest import make_record


def _two_leaf_ensemble(values):
    n = len(values)
    return sg.SurrogateEnsemble(
        params=sg.TreeParams(n_trees=n), bootstrap_seed=0, n_features=1, trained_on=0,
        feature=np.full(n, -1, dtype=np.int32), threshold=np.zeros(n), value=np.asarray(values, dtype=float),
        left=np.full(n, -1, dtype=np.int32), right=np.full(n, -1, dtype=np.int32),
        offsets=np.arange(n + 1, dtype=np.int64))


def test_rmse_example():
    assert sg.rmse(np.array([1.0, -2.0]), np.zeros(2)) == pytest.approx(math.sqrt(2.5), abs=1e-12)
    with pytest.raises(ValueError):
        sg.rmse(np.array([]), np.array([]))


def test_two_tree_spread():
    e = _two_leaf_ensemble([0.0, 1.0])
    p = sg.predict(e, [0.3])
    assert p.mean == 0.5
    assert p.spread == pytest.approx(math.sqrt(0.5), abs=1e-12)
    assert sg.predict(_two_leaf_ensemble([2.0]), [0.0]).spread == 0.0


def _data(n=400, d=6, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = X[:, 0] ** 2 + 0.5 * X[:, 1] + 0.05 * rng.standard_normal(n)
    return X, y


def test_fit_is_deterministic_and_seeded():
    X, y = _data()
    a = sg.fit_arrays(X, y, seed=3)
    b = sg.fit_arrays(X, y, seed=3)
    c = sg.fit_arrays(X, y, seed=4)
    np.testing.assert_array_equal(a.tree_outputs(X), b.tree_outputs(X))
    assert not np.array_equal(a.tree_outputs(X), c.tree_outputs(X))


@pytest.mark.parametrize("max_bins", [64, None])
def test_fit_learns_signal(max_bins):
    X, y = _data(800)
    Xt, yt = _data(400, seed=1)
    e = sg.fit_arrays(X, y, sg.TreeParams(max_bins=max_bins), seed=0)
    mean, spread = e.predict_batch(Xt)
    assert sg.rmse(yt, mean) < 0.6 * yt.std()
    assert np.all(spread >= 0)


def test_duplicated_rows_do_not_change_the_model():
    X, y = _data(200)
    a = sg.fit_arrays(X, y, seed=1)
    b = sg.fit_arrays(np.concatenate([X, X[:50]]), np.concatenate([y, y[:50]]), seed=1)
    np.testing.assert_array_equal(a.tree_outputs(X), b.tree_outputs(X))


def test_binned_matches_exact_when_every_value_has_a_bin():
    rng = np.random.default_rng(7)
    X = rng.integers(0, 20, size=(300, 5)).astype(float)  # <= 20 distinct values per feature
    y = X[:, 0] - 0.5 * X[:, 3] + rng.standard_normal(300)
    exact = sg.fit_arrays(X, y, sg.TreeParams(n_trees=10, max_bins=None), seed=2)
    binned = sg.fit_arrays(X, y, sg.TreeParams(n_trees=10, max_bins=64), seed=2)
    # same partitions of the bootstrap sample; thresholds may sit anywhere in the same gap
    np.testing.assert_array_equal(exact.feature, binned.feature)
    np.testing.assert_allclose(exact.value, binned.value, rtol=0, atol=1e-12)


def _depths(e, t):
    s = e.offsets[t]
    n = e.offsets[t + 1] - s
    depth = np.zeros(n, dtype=int)
    for i in range(n):
        if e.feature[s + i] >= 0:
            depth[e.left[s + i]] = depth[i] + 1
            depth[e.right[s + i]] = depth[i] + 1
    return depth, e.feature[s:s + n]


def test_tree_shape_limits():
    X, y = _data(2000)
    e = sg.fit_arrays(X, y, sg.TreeParams(n_trees=5, max_depth=4), seed=0)
    assert e.n_trees == 5
    for t in range(5):
        depth, feat = _depths(e, t)
        assert depth.max() <= 4
        assert (feat < 0).sum() == (feat >= 0).sum() + 1


def test_constant_target_has_zero_spread():
    X, _ = _data(100)
    e = sg.fit_arrays(X, np.full(100, 0.7), sg.TreeParams(n_trees=8), seed=0)
    mean, spread = e.predict_batch(X)
    np.testing.assert_allclose(mean, 0.7)
    np.testing.assert_allclose(spread, 0.0, atol=1e-15)


def test_fit_errors():
    with pytest.raises(ValueError):
        sg.fit_arrays(np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(ValueError):
        sg.fit_arrays(np.zeros((3, 3)), np.array([0.0, np.nan, 1.0]))
    with pytest.raises(ValueError):
        sg.fit(Dataset([make_record(1)]))
    e = sg.fit_arrays(*_data(50), sg.TreeParams(n_trees=2))
    with pytest.raises(ValueError):
        e.predict_batch(np.zeros((1, 3)))


def test_holdout_rmse_matches_numpy():
    train = Dataset([make_record(i, 0.01 * i) for i in range(60)])
    hold = Dataset([make_record(i, 0.02 * i) for i in range(100, 130)])
    e = sg.fit(train, sg.TreeParams(n_trees=10), seed=0)
    pred = e.predict_batch(hold.embeddings())[0]
    want = np.sqrt(np.mean((hold.column("s_is") - pred) ** 2))
    assert sg.holdout_rmse(e, hold) == pytest.approx(want, rel=1e-15)


def test_needs_retrain():
    assert not sg.needs_retrain(0, 1)
    assert sg.needs_retrain(1, 1)
    assert not sg.needs_retrain(7, 8)
    assert sg.needs_retrain(9, 8)
    with pytest.raises(ValueError):
        sg.needs_retrain(3, 0)


def test_checkpoint_round_trip(tmp_path):
    X, y = _data(300)
    e = sg.fit_arrays(X, y, sg.TreeParams(n_trees=12), seed=9)
    sg.save(e, tmp_path / "m.trees")
    back = sg.load(tmp_path / "m.trees")
    np.testing.assert_array_equal(e.tree_outputs(X), back.tree_outputs(X))
    assert back.bootstrap_seed == 9 and back.trained_on == 300
    (tmp_path / "bad.trees").write_bytes(b"XXXX" + (tmp_path / "m.trees").read_bytes()[4:])
    with pytest.raises(ValueError):
        sg.load(tmp_path / "bad.trees")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=30))
def test_predictions_stay_within_target_range(ys):
    y = np.array(ys)
    X = np.arange(len(y), dtype=float)[:, None]
    e = sg.fit_arrays(X, y, sg.TreeParams(n_trees=5), seed=0)
    out = e.tree_outputs(np.linspace(-3, len(y) + 3, 50)[:, None])
    assert out.min() >= y.min() - 1e-12 and out.max() <= y.max() + 1e-12
