from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecgclues.model import (
    GradientBoostedTrees,
    RecursiveFeatureEliminator,
    importance_order,
    incremental_curve,
    mi_probability,
    rfe_rank,
    tolerance_minimal_k,
)

from oracles import prf1_oracle


def small(**kw):
    params = dict(n_estimators=30, max_depth=3, learning_rate=0.3, subsample=1.0, random_state=0)
    params.update(kw)
    return GradientBoostedTrees(**params)


@pytest.fixture
def toy(rng):
    x = rng.uniform(-1, 1, size=200)
    return x[:, None], (x >= 0).astype(int)


def test_separable_toy(toy):
    X, y = toy
    model = small().fit(X, y)
    assert np.mean(model.predict(X) == y) == 1.0
    assert mi_probability(model, [0.9]) > 0.9


def test_xor_truth_table():
    grid = np.array(list(itertools.product([0.0, 1.0], repeat=2)))
    X = np.repeat(grid, 25, axis=0)
    y = (X[:, 0] != X[:, 1]).astype(int)
    model = GradientBoostedTrees(n_estimators=50, max_depth=2, random_state=0).fit(X, y)
    assert np.mean(model.predict(X) == y) >= 0.95
    assert model.predict(grid).tolist() == [0, 1, 1, 0]


def test_balanced_xor_without_subsampling_has_no_positive_gain_split():
    # every first split of a perfectly balanced XOR leaves both halves at the prior,
    # so a strictly positive gain is never reached; row subsampling breaks the symmetry
    grid = np.array(list(itertools.product([0.0, 1.0], repeat=2)))
    X = np.repeat(grid, 25, axis=0)
    y = (X[:, 0] != X[:, 1]).astype(int)
    model = GradientBoostedTrees(n_estimators=5, max_depth=2, subsample=1.0).fit(X, y)
    assert all(len(t.feature) == 1 for t in model.trees_)


def test_constant_features_predict_prior():
    X = np.ones((40, 3))
    y = np.array([1] * 10 + [0] * 30)
    model = small().fit(X, y)
    p = model.predict_proba(np.array([[1.0, 1.0, 1.0], [-5.0, 7.0, 0.0]]))[:, 1]
    assert np.allclose(p, 0.25, atol=1e-12)


def test_empty_ensemble_balanced_prior():
    X = np.arange(10.0)[:, None]
    y = np.array([0, 1] * 5)
    model = small(n_estimators=0).fit(X, y)
    assert mi_probability(model, [3.0]) == 0.5


def test_unused_feature_does_not_matter(rng):
    X = rng.normal(size=(150, 3))
    y = (X[:, 0] > 0).astype(int)
    model = small().fit(X, y)
    unused = np.flatnonzero(model.feature_importances_ == 0)
    assert len(unused) > 0
    Z = X.copy()
    Z[:, unused] += 100.0
    assert np.array_equal(model.predict_proba(Z), model.predict_proba(X))


def test_single_feature_importance(toy):
    X, y = toy
    model = small().fit(X, y)
    assert model.feature_importances_.tolist() == [1.0]


def test_importance_matches_logged_gains(rng):
    X = rng.normal(size=(120, 2))
    y = ((X[:, 0] + 0.3 * X[:, 1]) > 0).astype(int)
    model = small(n_estimators=5).fit(X, y)
    hand = np.zeros(2)
    for tree in model.trees_:
        for f, g in zip(tree.feature, tree.gain):
            if f >= 0:
                hand[f] += g
    assert np.allclose(model.feature_gains_, hand, rtol=0, atol=1e-12)
    assert np.allclose(model.feature_importances_, hand / hand.sum(), rtol=0, atol=1e-12)
    assert model.feature_importances_.sum() == pytest.approx(1.0)


def test_leaf_weight_newton_step():
    # one stump, no shrinkage on the first tree's leaf values: w = -G / (H + lambda)
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([0, 0, 1, 1])
    model = GradientBoostedTrees(n_estimators=1, max_depth=1, learning_rate=1.0, subsample=1.0,
                                 min_child_weight=0.0).fit(X, y)
    tree = model.trees_[0]
    leaves = tree.value[tree.feature < 0]
    # prior 0.5: g = p - y = -0.5 / 0.5, h = 0.25 per row; two rows per leaf
    assert sorted(leaves.tolist()) == pytest.approx([-1.0 / 1.5, 1.0 / 1.5])


def test_single_class_error():
    with pytest.raises(ValueError, match="two classes"):
        small().fit(np.zeros((5, 1)), np.zeros(5))


def test_length_mismatch(toy):
    X, y = toy
    model = small().fit(X, y)
    with pytest.raises(ValueError):
        model.predict_proba(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        mi_probability(model, [0.1, 0.2])
    with pytest.raises(ValueError):
        small().fit(X, y[:-1])


@pytest.mark.parametrize("kw", [dict(max_depth=0), dict(learning_rate=0.0), dict(subsample=1.5)])
def test_invalid_params(kw):
    from ecgclues.config import TrainSection

    with pytest.raises(ValueError):
        TrainSection(**kw)


def test_seeded_determinism(rng):
    X = rng.normal(size=(200, 5))
    y = (X[:, 0] * X[:, 1] > 0).astype(int)
    a = GradientBoostedTrees(n_estimators=20, subsample=0.7, random_state=7).fit(X, y).to_json()
    b = GradientBoostedTrees(n_estimators=20, subsample=0.7, random_state=7).fit(X, y).to_json()
    assert a == b


def test_serialization_roundtrip(rng):
    X = rng.normal(size=(100, 4))
    X[::7, 2] = np.nan
    y = (X[:, 0] > 0).astype(int)
    model = small(feature_names=["a", "b", "c", "d"]).fit(X, y)
    back = GradientBoostedTrees.from_json(model.to_json())
    assert back.to_json() == model.to_json()
    assert np.array_equal(back.predict_proba(X), model.predict_proba(X))


def test_missing_values_imputed_with_training_means():
    X = np.array([[0.0], [1.0], [np.nan], [3.0]])
    y = np.array([0, 0, 1, 1])
    model = small().fit(X, y)
    assert model.imputation_means_.tolist() == [4.0 / 3.0]
    assert np.array_equal(model.predict_proba([[np.nan]]), model.predict_proba([[4.0 / 3.0]]))


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False), min_size=2, max_size=50))
def test_probability_strictly_inside_unit_interval(values):
    X = np.array([[-3.0], [-2.0], [-1.0], [1.0], [2.0], [3.0]] * 5)
    y = (X[:, 0] > 0).astype(int)
    model = GradientBoostedTrees(n_estimators=200, learning_rate=1.0, subsample=1.0).fit(X, y)
    p = model.predict_proba(np.asarray(values)[:, None])[:, 1]
    assert np.all((p > 0) & (p < 1))


@given(st.sampled_from(["exp", "cube", "shift", "atan"]), st.integers(min_value=0, max_value=100))
def test_monotone_transform_invariance(fn, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(120, 3))
    y = (X[:, 0] + X[:, 1] ** 2 > 0.5).astype(int)
    y[:2] = [0, 1]
    f = {"exp": np.exp, "cube": lambda v: v ** 3, "shift": lambda v: 3 * v + 10, "atan": np.arctan}[fn]
    X2 = X.copy()
    X2[:, 0] = f(X[:, 0])
    a = small(n_estimators=10).fit(X, y)
    b = small(n_estimators=10).fit(X2, y)
    # same partitions, gains and leaf weights; only the midpoint thresholds on column 0 move
    for ta, tb in zip(a.trees_, b.trees_):
        assert np.array_equal(ta.feature, tb.feature)
        assert np.array_equal(ta.gain, tb.gain)
        assert np.array_equal(ta.value, tb.value)
    assert np.array_equal(a.predict_proba(X), b.predict_proba(X2))
    # held-out rows only disagree when they land inside a split's gap
    Xt = rng.normal(size=(200, 3))
    Xt2 = Xt.copy()
    Xt2[:, 0] = f(Xt[:, 0])
    agree = np.mean(a.predict(Xt) == b.predict(Xt2))
    assert agree >= 0.9


# --- ranking -------------------------------------------------------------------------

def test_rfe_noise_eliminated_first(rng):
    X = rng.normal(size=(300, 3))
    y = ((X[:, 0] + X[:, 1]) > 0).astype(int)
    X[:, 2] = rng.normal(size=300) * 0.01
    est = small(n_estimators=20, max_depth=2)
    rfe = RecursiveFeatureEliminator(est, n_features_to_select=2).fit(X, y)
    assert rfe.elimination_order_ == [2]
    assert rfe.ranking_.tolist() == [1, 1, 2]
    assert rfe.get_support().tolist() == [True, True, False]


def test_rfe_one_round_when_keep_is_n_minus_one(rng):
    X = rng.normal(size=(100, 6))
    y = (X[:, 0] > 0).astype(int)
    rfe = RecursiveFeatureEliminator(small(n_estimators=5), n_features_to_select=5).fit(X, y)
    assert len(rfe.elimination_order_) == 1
    assert sorted(rfe.ranking_.tolist()) == [1, 1, 1, 1, 1, 2]


def test_rfe_tie_drops_higher_index():
    # all-constant columns have zero importance
    X = np.column_stack([np.r_[np.zeros(10), np.ones(10)], np.ones(20), np.ones(20)])
    y = np.r_[np.zeros(10), np.ones(10)].astype(int)
    rfe = RecursiveFeatureEliminator(small(n_estimators=3), n_features_to_select=1).fit(X, y)
    assert rfe.elimination_order_ == [2, 1]


def test_rfe_rank_names_and_errors(rng):
    X = rng.normal(size=(80, 4))
    y = (X[:, 1] > 0).astype(int)
    ranked = rfe_rank(X, y, ["a", "b", "c", "d"], keep=2, estimator=small(n_estimators=5))
    assert [r for _, r in ranked] == [1, 1, 2, 3]
    assert "b" in [n for n, r in ranked if r == 1]
    with pytest.raises(ValueError):
        rfe_rank(X, y, ["a", "b", "c", "d"], keep=0)
    with pytest.raises(ValueError):
        RecursiveFeatureEliminator(small(), n_features_to_select=4).fit(X, y)


def test_importance_order(rng):
    X = rng.normal(size=(150, 3))
    y = (X[:, 2] > 0).astype(int)
    model = small(feature_names=["a", "b", "c"]).fit(X, y)
    assert importance_order(model)[0] == "c"


def test_incremental_curve(rng):
    X = rng.normal(size=(300, 10))
    y = (X[:, 0] > 0).astype(int)
    Xtr, Xte, ytr, yte = X[:200], X[200:], y[:200], y[200:]
    est = small(n_estimators=20)
    curve = incremental_curve(Xtr, ytr, Xte, yte, list(range(10)), est)
    assert [k for k, _ in curve] == list(range(1, 11))
    assert abs(curve[0][1] - curve[-1][1]) <= 0.05
    full = est.fit(Xtr, ytr).predict(Xte)
    assert curve[-1][1] == prf1_oracle(yte, full)[2]


def test_tolerance_minimal_k():
    curve = [(1, 0.70), (2, 0.80), (3, 0.875), (4, 0.89), (5, 0.88)]
    assert tolerance_minimal_k(curve, 0.02) == 3
    assert tolerance_minimal_k(curve, 0.0) == 4
    with pytest.raises(ValueError):
        tolerance_minimal_k([])
