"""Gradient-boosted decision trees on logistic loss, RFE and the feature-count curve.

Trees are grown level by level with exact greedy split search over presorted
columns; leaf weight is ``-G / (H + lambda)``. Missing values are filled with
training-set column means before fitting and again at predict time.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_array, check_is_fitted

_MARGIN_CLIP = 30.0


@njit(cache=True)
def _level_splits(X, order, node_of_row, n_nodes, g, h, G, H, lam, min_child_weight, gamma):
    n, d = X.shape
    best_gain = np.zeros(n_nodes)
    best_feat = np.full(n_nodes, -1, dtype=np.int64)
    best_lo = np.zeros(n_nodes)
    best_hi = np.zeros(n_nodes)
    GL = np.zeros(n_nodes)
    HL = np.zeros(n_nodes)
    last = np.zeros(n_nodes)
    seen = np.zeros(n_nodes, dtype=np.bool_)
    for j in range(d):
        GL[:] = 0.0
        HL[:] = 0.0
        seen[:] = False
        for k in range(n):
            i = order[k, j]
            nd = node_of_row[i]
            if nd < 0:
                continue
            v = X[i, j]
            if seen[nd] and v > last[nd]:
                gl = GL[nd]
                hl = HL[nd]
                gr = G[nd] - gl
                hr = H[nd] - hl
                if hl >= min_child_weight and hr >= min_child_weight:
                    gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam)
                                  - G[nd] * G[nd] / (H[nd] + lam)) - gamma
                    if gain > best_gain[nd]:
                        best_gain[nd] = gain
                        best_feat[nd] = j
                        best_lo[nd] = last[nd]
                        best_hi[nd] = v
            GL[nd] += g[i]
            HL[nd] += h[i]
            last[nd] = v
            seen[nd] = True
    return best_gain, best_feat, best_lo, best_hi


@dataclass
class Tree:
    feature: np.ndarray     # -1 marks a leaf
    threshold: np.ndarray   # go left when x < threshold
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray       # leaf weight before learning-rate scaling
    gain: np.ndarray
    cover: np.ndarray       # hessian sum of training rows in a leaf

    def to_dict(self) -> dict:
        return {
            "feature": [int(v) for v in self.feature],
            "threshold": [float(v) for v in self.threshold],
            "left": [int(v) for v in self.left],
            "right": [int(v) for v in self.right],
            "value": [float(v) for v in self.value],
            "gain": [float(v) for v in self.gain],
            "cover": [float(v) for v in self.cover],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=float),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=float),
            np.asarray(d["gain"], dtype=float),
            np.asarray(d["cover"], dtype=float),
        )

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            xv = X[rows, np.where(inner, f, 0)]
            nxt = np.where(xv < self.threshold[node], self.left[node], self.right[node])
            node = np.where(inner, nxt, node)


def _split_threshold(lo: float, hi: float) -> float:
    thr = lo + (hi - lo) / 2.0
    if not lo < thr <= hi:
        thr = hi
    return thr


def _grow_tree(X, order, rows_mask, g, h, max_depth, lam, min_child_weight, gamma) -> Tree:
    """Split structure is searched on the subsampled rows; leaf weights use every row."""
    n = X.shape[0]
    node_of_row = np.where(rows_mask, 0, -1).astype(np.int64)
    leaf_of_row = np.zeros(n, dtype=np.int64)
    feature, threshold, left, right, gain = [-1], [0.0], [-1], [-1], [0.0]

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        gain.append(0.0)
        return len(feature) - 1

    frontier = [0]          # tree node ids open at this level
    sums = [(float(g[rows_mask].sum()), float(h[rows_mask].sum()))]
    for _ in range(max_depth):
        if not frontier:
            break
        n_open = len(frontier)
        G = np.array([s[0] for s in sums])
        H = np.array([s[1] for s in sums])
        bgain, bfeat, blo, bhi = _level_splits(X, order, node_of_row, n_open, g, h, G, H,
                                               lam, min_child_weight, gamma)
        next_frontier, next_sums = [], []
        new_node_of_row = np.full(n, -1, dtype=np.int64)
        for k, tree_id in enumerate(frontier):
            if bfeat[k] < 0:
                continue
            f = int(bfeat[k])
            thr = _split_threshold(float(blo[k]), float(bhi[k]))
            lid, rid = new_node(), new_node()
            feature[tree_id] = f
            threshold[tree_id] = thr
            left[tree_id] = lid
            right[tree_id] = rid
            gain[tree_id] = float(bgain[k])
            below = X[:, f] < thr
            members = node_of_row == k
            for child, side in ((lid, below), (rid, ~below)):
                sel = members & side
                new_node_of_row[sel] = len(next_frontier)
                next_frontier.append(child)
                next_sums.append((float(g[sel].sum()), float(h[sel].sum())))
            at_node = leaf_of_row == tree_id
            leaf_of_row[at_node & below] = lid
            leaf_of_row[at_node & ~below] = rid
        frontier, sums, node_of_row = next_frontier, next_sums, new_node_of_row

    n_nodes = len(feature)
    G_all = np.bincount(leaf_of_row, weights=g, minlength=n_nodes)
    H_all = np.bincount(leaf_of_row, weights=h, minlength=n_nodes)
    feature = np.asarray(feature, dtype=np.int64)
    value = np.where(feature < 0, -G_all / (H_all + lam), 0.0)
    return Tree(feature, np.asarray(threshold), np.asarray(left, dtype=np.int64),
                np.asarray(right, dtype=np.int64), value, np.asarray(gain), H_all)


class GradientBoostedTrees(ClassifierMixin, BaseEstimator):
    """Binary GBDT classifier (logistic loss, second-order leaf weights).

    Parameters
    ----------
    n_estimators : int
        Boosting rounds.
    max_depth : int
        Depth limit of every tree.
    learning_rate : float
        Shrinkage applied to each tree's output.
    reg_lambda : float
        L2 penalty on leaf weights.
    subsample : float
        Fraction of rows drawn (without replacement) for each tree.
    min_child_weight : float
        Minimum hessian sum in a child.
    gamma : float
        Minimum gain for a split.
    random_state : int
        Seed for row subsampling.
    feature_names : sequence of str, optional
        Names stored with the model and in its JSON form.
    """

    def __init__(self, n_estimators=300, max_depth=4, learning_rate=0.1, reg_lambda=1.0,
                 subsample=0.8, min_child_weight=1.0, gamma=0.0, random_state=42, feature_names=None):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.reg_lambda = reg_lambda
        self.subsample = subsample
        self.min_child_weight = min_child_weight
        self.gamma = gamma
        self.random_state = random_state
        self.feature_names = feature_names

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        y = np.asarray(y).ravel()
        if len(y) != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {len(y)} labels")
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError(f"need exactly two classes, got {len(self.classes_)}")
        yb = (y == self.classes_[1]).astype(float)
        n, d = X.shape
        self.n_features_in_ = d
        self.feature_names_ = (list(self.feature_names) if self.feature_names is not None
                               else [f"x{i}" for i in range(d)])
        if len(self.feature_names_) != d:
            raise ValueError(f"{len(self.feature_names_)} feature names for {d} columns")

        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            means = np.nanmean(X, axis=0) if n else np.zeros(d)
        self.imputation_means_ = np.where(np.isnan(means), 0.0, means)
        Xf = np.where(np.isnan(X), self.imputation_means_, X)

        prior = yb.mean()
        self.base_score_ = float(math.log(prior / (1.0 - prior)))
        margin = np.full(n, self.base_score_)
        order = np.argsort(Xf, axis=0, kind="stable").astype(np.int64)
        rng = np.random.default_rng(self.random_state)
        n_sub = max(1, int(round(self.subsample * n)))
        self.trees_ = []
        for _ in range(self.n_estimators):
            p = expit(margin)
            g = p - yb
            h = p * (1.0 - p)
            if n_sub < n:
                mask = np.zeros(n, dtype=bool)
                mask[rng.choice(n, size=n_sub, replace=False)] = True
            else:
                mask = np.ones(n, dtype=bool)
            tree = _grow_tree(Xf, order, mask, g, h, int(self.max_depth), float(self.reg_lambda),
                              float(self.min_child_weight), float(self.gamma))
            self.trees_.append(tree)
            margin = margin + self.learning_rate * tree.predict(Xf)
        self._compile()
        return self

    # -- prediction ---------------------------------------------------------

    def _compile(self):
        """Concatenate all trees into flat arrays for vectorised evaluation."""
        offsets, total = [], 0
        for t in self.trees_:
            offsets.append(total)
            total += len(t.feature)
        if self.trees_:
            off = np.asarray(offsets, dtype=np.int64)
            self._flat = {
                "feature": np.concatenate([t.feature for t in self.trees_]),
                "threshold": np.concatenate([t.threshold for t in self.trees_]),
                "left": np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(self.trees_, off)]),
                "right": np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(self.trees_, off)]),
                "value": np.concatenate([t.value for t in self.trees_]),
                "roots": off,
            }
        else:
            self._flat = None

    def _prepare(self, X) -> np.ndarray:
        check_is_fitted(self, "trees_")
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return np.where(np.isnan(X), self.imputation_means_, X)

    def decision_function(self, X) -> np.ndarray:
        X = self._prepare(X)
        margin = np.full(X.shape[0], self.base_score_)
        if self._flat is None or X.shape[0] == 0:
            return margin
        f = self._flat
        node = np.broadcast_to(f["roots"], (X.shape[0], len(f["roots"]))).copy()
        rows = np.arange(X.shape[0])[:, None]
        while True:
            feat = f["feature"][node]
            inner = feat >= 0
            if not inner.any():
                break
            xv = X[rows, np.where(inner, feat, 0)]
            nxt = np.where(xv < f["threshold"][node], f["left"][node], f["right"][node])
            node = np.where(inner, nxt, node)
        return margin + self.learning_rate * f["value"][node].sum(axis=1)

    def predict_proba(self, X) -> np.ndarray:
        p = expit(np.clip(self.decision_function(X), -_MARGIN_CLIP, _MARGIN_CLIP))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return self.classes_[(self.decision_function(X) > 0).astype(int)]

    # -- importance ---------------------------------------------------------

    @property
    def feature_gains_(self) -> np.ndarray:
        """Summed split gain per feature (not normalised)."""
        check_is_fitted(self, "trees_")
        total = np.zeros(self.n_features_in_)
        for t in self.trees_:
            inner = t.feature >= 0
            np.add.at(total, t.feature[inner], t.gain[inner])
        return total

    @property
    def feature_importances_(self) -> np.ndarray:
        gains = self.feature_gains_
        s = gains.sum()
        return gains / s if s > 0 else gains

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        check_is_fitted(self, "trees_")
        return {
            "format": "ecgclues-gbdt/1",
            "params": self.get_params(deep=False) | {"feature_names": list(self.feature_names_)},
            "classes": [c.item() if hasattr(c, "item") else c for c in self.classes_],
            "base_score": self.base_score_,
            "feature_names": list(self.feature_names_),
            "imputation_means": [float(v) for v in self.imputation_means_],
            "importances": [float(v) for v in self.feature_importances_],
            "trees": [t.to_dict() for t in self.trees_],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "GradientBoostedTrees":
        model = cls(**d["params"])
        model.classes_ = np.asarray(d["classes"])
        model.base_score_ = float(d["base_score"])
        model.feature_names_ = list(d["feature_names"])
        model.n_features_in_ = len(model.feature_names_)
        model.imputation_means_ = np.asarray(d["imputation_means"], dtype=float)
        model.trees_ = [Tree.from_dict(t) for t in d["trees"]]
        model._compile()
        return model

    @classmethod
    def from_json(cls, text: str) -> "GradientBoostedTrees":
        return cls.from_dict(json.loads(text))


def mi_probability(model: GradientBoostedTrees, vector) -> float:
    """Probability of the positive (MI) class for one feature vector."""
    x = np.asarray(vector, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a single feature vector")
    if x.shape[0] != model.n_features_in_:
        raise ValueError(f"expected {model.n_features_in_} features, got {x.shape[0]}")
    return float(model.predict_proba(x[None, :])[0, 1])


# ---------------------------------------------------------------------------
# Feature ranking
# ---------------------------------------------------------------------------

class RecursiveFeatureEliminator(SelectorMixin, BaseEstimator):
    """Backward elimination by gain importance.

    Each round refits ``estimator`` on the surviving columns and drops the
    ``step`` least important ones; on equal importance the higher column index
    goes first. Survivors get rank 1, later eliminations better ranks.
    """

    def __init__(self, estimator=None, n_features_to_select=97, step=1):
        self.estimator = estimator
        self.n_features_to_select = n_features_to_select
        self.step = step

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        n_features = X.shape[1]
        keep = int(self.n_features_to_select)
        if keep <= 0:
            raise ValueError("n_features_to_select must be positive")
        if keep >= n_features:
            raise ValueError(f"n_features_to_select ({keep}) must be below the feature count ({n_features})")
        if int(self.step) < 1:
            raise ValueError("step must be at least 1")
        estimator = self.estimator if self.estimator is not None else GradientBoostedTrees()

        remaining = list(range(n_features))
        rounds: list[list[int]] = []
        while len(remaining) > keep:
            est = clone(estimator).fit(X[:, remaining], y)
            imp = np.asarray(est.feature_importances_)
            n_drop = min(int(self.step), len(remaining) - keep)
            # ascending importance, ties broken by descending column index
            order = sorted(range(len(remaining)), key=lambda k: (imp[k], -remaining[k]))
            dropped = [remaining[k] for k in order[:n_drop]]
            rounds.append(dropped)
            remaining = [c for c in remaining if c not in set(dropped)]

        ranking = np.ones(n_features, dtype=np.int64)
        for r, dropped in enumerate(rounds):
            ranking[dropped] = len(rounds) - r + 1
        self.ranking_ = ranking
        self.support_ = ranking == 1
        self.elimination_order_ = [c for dropped in rounds for c in dropped]
        self.n_features_in_ = n_features
        self.n_features_ = keep
        self.estimator_ = clone(estimator).fit(X[:, remaining], y)
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "support_")
        return self.support_


def rfe_rank(X, y, names: Sequence[str], keep: int, estimator=None, step: int = 1) -> list[tuple[str, int]]:
    """Feature names with their RFE rank, best first."""
    if keep <= 0:
        raise ValueError("keep must be positive")
    rfe = RecursiveFeatureEliminator(estimator, n_features_to_select=keep, step=step).fit(X, y)
    order = sorted(range(len(names)), key=lambda i: (rfe.ranking_[i], i))
    return [(names[i], int(rfe.ranking_[i])) for i in order]


def importance_order(model: GradientBoostedTrees) -> list[str]:
    """Model feature names sorted by gain importance, descending (ties by position)."""
    imp = model.feature_importances_
    idx = sorted(range(len(imp)), key=lambda i: (-imp[i], i))
    return [model.feature_names_[i] for i in idx]


def incremental_curve(X_train, y_train, X_test, y_test, ordered_columns: Sequence[int],
                      estimator=None, positive=1) -> list[tuple[int, float]]:
    """Held-out F1 of models trained on the top-k columns, k = 1..len(ordered_columns)."""
    from .metrics import f1_from_predictions

    estimator = estimator if estimator is not None else GradientBoostedTrees()
    curve = []
    for k in range(1, len(ordered_columns) + 1):
        cols = list(ordered_columns[:k])
        model = clone(estimator).set_params(feature_names=None).fit(X_train[:, cols], y_train)
        pred = model.predict(X_test[:, cols])
        curve.append((k, f1_from_predictions(y_test, pred, positive=positive)))
    return curve


def tolerance_minimal_k(curve: Sequence[tuple[int, float]], tolerance: float = 0.02) -> int:
    """Smallest feature count whose F1 is within ``tolerance`` of the curve's best."""
    if not curve:
        raise ValueError("empty curve")
    best = max(f for _, f in curve)
    return min(k for k, f in curve if f >= best - tolerance)
