"""Diverse counterfactual search for tree-ensemble classifiers.

A genetic search over the features allowed to vary. Individuals are scored by

    max(0, 0.5 + margin - p_target)
    + proximity_weight * proximity
    - diversity_weight * (distance to the nearest accepted counterfactual)

where proximity and distances are L1 in units of per-feature MAD, averaged
over the varied features. Each generation the ``k`` best valid, mutually
distinct individuals are accepted greedily. Accepted vectors are finally
pulled back towards the original one feature at a time while they stay valid.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)

MAD_FLOOR = 1e-6


class AlreadyTargetError(ValueError):
    pass


class NoCounterfactualError(RuntimeError):
    def __init__(self, message: str, best_probability: float, partial=None):
        super().__init__(f"{message} (best target probability {best_probability:.4f})")
        self.best_probability = best_probability
        self.partial = partial or []


@dataclass(frozen=True)
class FeatureRanges:
    names: tuple[str, ...]
    lo: np.ndarray
    hi: np.ndarray
    mad: np.ndarray

    def as_dict(self) -> dict[str, tuple[float, float]]:
        return {n: (float(a), float(b)) for n, a, b in zip(self.names, self.lo, self.hi)}

    def select(self, names: Sequence[str]) -> "FeatureRanges":
        idx = [self.names.index(n) for n in names]
        return FeatureRanges(tuple(names), self.lo[idx], self.hi[idx], self.mad[idx])

    def to_dict(self) -> dict:
        return {n: {"lo": float(a), "hi": float(b), "mad": float(m)}
                for n, a, b, m in zip(self.names, self.lo, self.hi, self.mad)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureRanges":
        names = tuple(d)
        return cls(names, np.array([d[n]["lo"] for n in names]), np.array([d[n]["hi"] for n in names]),
                   np.array([d[n]["mad"] for n in names]))


def derive_ranges(X, names: Sequence[str] | None = None, lower: float = 1.0, upper: float = 99.0) -> FeatureRanges:
    """Per-feature [p1, p99] bounds (linear interpolation) and MAD floored at 1e-6."""
    X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(X.shape[1]))
    lo = np.nanpercentile(X, lower, axis=0)
    hi = np.nanpercentile(X, upper, axis=0)
    med = np.nanmedian(X, axis=0)
    mad = np.nanmedian(np.abs(X - med), axis=0)
    mad = np.maximum(np.nan_to_num(mad, nan=MAD_FLOOR), MAD_FLOOR)
    return FeatureRanges(names, lo, hi, mad)


@dataclass
class CounterfactualQuery:
    original: np.ndarray
    target: int
    k: int
    features_to_vary: tuple[str, ...]
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise ValueError("ranges must be finite")


@dataclass
class CounterfactualSet:
    feature_names: tuple[str, ...]
    original: np.ndarray
    target: int
    counterfactuals: np.ndarray          # (k, n_features)
    p_target: np.ndarray
    proximity: np.ndarray
    query: CounterfactualQuery | None = None
    record_id: str = ""
    beat: int = -1
    elapsed_s: float = 0.0

    @property
    def k(self) -> int:
        return len(self.counterfactuals)

    def changed(self, j: int) -> dict[str, tuple[float, float]]:
        cf = self.counterfactuals[j]
        return {n: (float(a), float(b)) for n, a, b in zip(self.feature_names, self.original, cf) if a != b}

    @property
    def sparsity_count(self) -> np.ndarray:
        return (self.counterfactuals != self.original[None, :]).sum(axis=1)

    def to_json(self) -> dict:
        return {
            "record": self.record_id,
            "beat": self.beat,
            "features": list(self.feature_names),
            "original": [float(v) for v in self.original],
            "target": int(self.target),
            "cfs": [
                {"values": [float(v) for v in cf],
                 "changed": {n: [a, b] for n, (a, b) in self.changed(j).items()},
                 "p_target": float(self.p_target[j]),
                 "proximity": float(self.proximity[j])}
                for j, cf in enumerate(self.counterfactuals)
            ],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "CounterfactualSet":
        cfs = d["cfs"]
        n = len(d["features"])
        return cls(
            tuple(d["features"]),
            np.asarray(d["original"], dtype=float),
            int(d["target"]),
            np.asarray([c["values"] for c in cfs], dtype=float).reshape(-1, n),
            np.asarray([c["p_target"] for c in cfs], dtype=float),
            np.asarray([c.get("proximity", np.nan) for c in cfs], dtype=float),
            record_id=str(d.get("record", "")),
            beat=int(d.get("beat", -1)),
        )


class CounterfactualExplainer(BaseEstimator):
    """Genetic counterfactual search around a fitted binary classifier.

    ``fit`` learns feature ranges and MADs from training rows whose columns
    match the model's inputs; ``explain`` answers one query.
    """

    def __init__(self, model=None, k=3, population_size=120, max_generations=200, margin=0.05,
                 proximity_weight=0.5, diversity_weight=0.1, patience=10, min_separation=0.1,
                 revert_rate=0.3, posthoc_sparsity=True, random_state=0, feature_names=None):
        self.model = model
        self.k = k
        self.population_size = population_size
        self.max_generations = max_generations
        self.margin = margin
        self.proximity_weight = proximity_weight
        self.diversity_weight = diversity_weight
        self.patience = patience
        self.min_separation = min_separation
        self.revert_rate = revert_rate
        self.posthoc_sparsity = posthoc_sparsity
        self.random_state = random_state
        self.feature_names = feature_names

    def fit(self, X, y=None, ranges: FeatureRanges | None = None):
        if ranges is None:
            names = self.feature_names
            if names is None:
                names = getattr(self.model, "feature_names_", None)
            ranges = derive_ranges(X, names)
        self.ranges_ = ranges
        self.feature_names_ = tuple(ranges.names)
        self.n_features_in_ = len(self.feature_names_)
        return self

    # -- helpers ------------------------------------------------------------

    def _p_target(self, X: np.ndarray, target: int) -> np.ndarray:
        p = self.model.predict_proba(X)[:, 1]
        return p if target == 1 else 1.0 - p

    def _threshold(self) -> float:
        return 0.5 + self.margin

    # -- search -------------------------------------------------------------

    def explain(self, original, target: int | None = None, features_to_vary: Sequence[str] | None = None,
                k: int | None = None, random_state=None, record_id: str = "", beat: int = -1) -> CounterfactualSet:
        check_is_fitted(self, "ranges_")
        start = time.perf_counter()
        x0 = np.asarray(original, dtype=float).ravel()
        if x0.shape[0] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {x0.shape[0]}")
        x0 = check_array(x0[None, :], dtype=np.float64)[0]
        k = int(self.k if k is None else k)
        p_mi = float(self.model.predict_proba(x0[None, :])[0, 1])
        predicted = int(p_mi > 0.5)
        if target is None:
            target = 1 - predicted
        target = int(target)
        if predicted == target:
            raise AlreadyTargetError("query already classified as target")

        names = self.feature_names_
        vary = tuple(names) if features_to_vary is None else tuple(features_to_vary)
        unknown = set(vary) - set(names)
        if unknown:
            raise ValueError(f"features_to_vary not among model features: {sorted(unknown)}")
        vidx = np.array([names.index(n) for n in vary], dtype=np.int64)
        # widen the range so the original itself is always admissible
        lo = np.minimum(self.ranges_.lo, x0)
        hi = np.maximum(self.ranges_.hi, x0)
        query = CounterfactualQuery(x0, target, k, vary, lo, hi)
        mad = self.ranges_.mad[vidx]
        vlo, vhi = lo[vidx], hi[vidx]
        x0v = x0[vidx]
        nv = len(vidx)
        rng = np.random.default_rng(self.random_state if random_state is None else random_state)
        thr = self._threshold()

        def full(Z):
            out = np.repeat(x0[None, :], len(Z), axis=0)
            out[:, vidx] = Z
            return out

        def dist(A, B):
            return (np.abs(A[:, None, :] - B[None, :, :]) / mad).mean(axis=2)

        pop_size = int(self.population_size)
        pop = np.repeat(x0v[None, :], pop_size, axis=0)
        for i in range(pop_size):
            m = rng.integers(1, nv + 1)
            cols = rng.choice(nv, size=m, replace=False)
            pop[i, cols] = rng.uniform(vlo[cols], vhi[cols])

        accepted = np.empty((0, nv))
        accepted_p = np.empty(0)
        stable = 0
        best_p = 0.0
        for gen in range(int(self.max_generations)):
            # accepted individuals stay in the pool (elitist archive)
            pool = np.vstack([accepted, pop]) if len(accepted) else pop
            p = self._p_target(full(pool), target)
            best_p = max(best_p, float(p.max()))
            prox = (np.abs(pool - x0v) / mad).mean(axis=1)
            valid = (p >= thr) & np.any(pool != x0v, axis=1)

            new_acc = self._accept(pool, prox, valid, dist, k)
            if len(new_acc) == len(accepted) and len(new_acc) and np.array_equal(pool[new_acc], accepted):
                stable += 1
            else:
                stable = 0
            accepted = pool[new_acc]
            accepted_p = p[new_acc]
            if len(accepted) >= k and stable >= int(self.patience):
                break

            hinge = np.maximum(0.0, thr - p)
            fitness = hinge + self.proximity_weight * prox
            if len(accepted):
                fitness = fitness - self.diversity_weight * dist(pool, accepted).min(axis=1)
            pop = self._next_generation(pool, fitness, x0v, vlo, vhi, rng, pop_size)

        if len(accepted) == 0:
            raise NoCounterfactualError("no valid counterfactual within the search budget", best_p)

        if self.posthoc_sparsity:
            accepted, accepted_p = self._sparsify(accepted, x0v, full, target, dist)

        cfs = full(accepted)
        prox = (np.abs(accepted - x0v) / mad).mean(axis=1)
        result = CounterfactualSet(tuple(names), x0, target, cfs, accepted_p, prox, query,
                                   record_id=record_id, beat=beat,
                                   elapsed_s=time.perf_counter() - start)
        logger.debug("counterfactual query %s/%s took %.3f s", record_id, beat, result.elapsed_s)
        if len(accepted) < k:
            raise NoCounterfactualError(f"only {len(accepted)} of {k} distinct valid counterfactuals found",
                                        best_p, partial=[result])
        return result

    def _accept(self, pool, prox, valid, dist, k) -> list[int]:
        cand = np.flatnonzero(valid)
        if len(cand) == 0:
            return []
        # duplicates collapse onto their first occurrence
        _, first = np.unique(pool[cand], axis=0, return_index=True)
        cand = cand[np.sort(first)]
        chosen: list[int] = []
        nearest = np.full(len(cand), np.inf)
        for _ in range(k):
            ok = nearest >= self.min_separation
            if not ok.any():
                break
            score = self.proximity_weight * prox[cand]
            if chosen:
                score = score - self.diversity_weight * nearest
            score = np.where(ok, score, np.inf)
            pick = int(np.argmin(score))
            chosen.append(int(cand[pick]))
            nearest = np.minimum(nearest, dist(pool[cand], pool[[cand[pick]]])[:, 0])
        return chosen

    def _next_generation(self, pool, fitness, x0v, vlo, vhi, rng, size):
        order = np.argsort(fitness, kind="stable")
        n_elite = max(1, size // 10)
        elite = pool[order[:n_elite]]
        # tournament selection of size 2
        a = rng.integers(0, len(pool), size=(size - n_elite, 2))
        winners = np.where(fitness[a[:, 0]] <= fitness[a[:, 1]], a[:, 0], a[:, 1])
        b = rng.integers(0, len(pool), size=(size - n_elite, 2))
        mates = np.where(fitness[b[:, 0]] <= fitness[b[:, 1]], b[:, 0], b[:, 1])
        mix = rng.random((size - n_elite, pool.shape[1])) < 0.5
        children = np.where(mix, pool[winners], pool[mates])
        # one mutated feature per child
        rows = np.arange(len(children))
        cols = rng.integers(0, pool.shape[1], size=len(children))
        kind = rng.random(len(children))
        width = vhi[cols] - vlo[cols]
        step = children[rows, cols] + rng.normal(0.0, 0.1, size=len(children)) * width
        resample = rng.uniform(vlo[cols], vhi[cols])
        new = np.where(kind < self.revert_rate, x0v[cols],
                       np.where(kind < self.revert_rate + 0.2, resample, step))
        children[rows, cols] = np.clip(new, vlo[cols], vhi[cols])
        return np.vstack([elite, children])

    def _sparsify(self, accepted, x0v, full, target, dist, grid: int = 33):
        """Move each changed feature back towards the original while validity and separation hold."""
        thr = self._threshold()
        done: list[np.ndarray] = []
        done_p: list[float] = []
        for cf in accepted:
            cf = cf.copy()
            p_cf = float(self._p_target(full(cf[None, :]), target)[0])
            changed = np.flatnonzero(cf != x0v)
            changed = changed[np.argsort(np.abs(cf[changed] - x0v[changed]), kind="stable")]
            for j in changed:
                lo_t, hi_t = 0.0, 1.0
                for _ in range(2):
                    ts = np.linspace(lo_t, hi_t, grid)
                    trial = np.repeat(cf[None, :], grid, axis=0)
                    trial[:, j] = x0v[j] + ts * (cf[j] - x0v[j])
                    trial[-1, j] = cf[j]
                    p = self._p_target(full(trial), target)
                    ok = (p >= thr) & np.any(trial != x0v, axis=1)
                    if done:
                        ok &= dist(trial, np.vstack(done)).min(axis=1) >= self.min_separation
                    hits = np.flatnonzero(ok)
                    if len(hits) == 0:
                        break
                    h = hits[0]
                    if h == 0:
                        lo_t = hi_t = ts[0]
                        break
                    lo_t, hi_t = ts[h - 1], ts[h]
                if ok.any():
                    t_best = hi_t
                    new = cf.copy()
                    new[j] = x0v[j] + t_best * (cf[j] - x0v[j]) if t_best < 1.0 else cf[j]
                    p_new = float(self._p_target(full(new[None, :]), target)[0])
                    sep_ok = not done or dist(new[None, :], np.vstack(done)).min() >= self.min_separation
                    if p_new >= thr and sep_ok and np.any(new != x0v):
                        cf, p_cf = new, p_new
            done.append(cf)
            done_p.append(p_cf)
        return np.vstack(done), np.asarray(done_p)


# ---------------------------------------------------------------------------
# Population statistics
# ---------------------------------------------------------------------------

@dataclass
class AlterationReport:
    counts: dict[str, int]
    total_counterfactuals: int
    correct: int | None = None
    total: int | None = None
    ranking: list[tuple[str, int]] = field(default_factory=list)

    @property
    def pred_true(self) -> str:
        if self.correct is None or self.total is None:
            return ""
        return f"{self.correct}/{self.total}"

    def top(self, n: int = 3) -> list[str]:
        return [f"{name}: {count}" for name, count in self.ranking[:n]]

    def rows(self) -> list[dict]:
        return [{"feature": n, "count": c, "of": self.total_counterfactuals} for n, c in self.ranking]


def alteration_stats(cf_sets: Sequence[CounterfactualSet], correct: int | None = None,
                     total: int | None = None) -> AlterationReport:
    """How often each feature differs from its original across every counterfactual."""
    cf_sets = list(cf_sets)
    counts: dict[str, int] = {}
    n_cf = 0
    registry = None
    for cs in cf_sets:
        if registry is None:
            registry = cs.feature_names
        elif tuple(cs.feature_names) != tuple(registry):
            raise ValueError("counterfactual sets use different feature registries")
        diff = cs.counterfactuals != cs.original[None, :]
        n_cf += len(cs.counterfactuals)
        for j, name in enumerate(cs.feature_names):
            c = int(diff[:, j].sum())
            if c:
                counts[name] = counts.get(name, 0) + c
    ranking = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return AlterationReport(counts, n_cf, correct, total, ranking)


def filter_correct(model, X, y) -> tuple[np.ndarray, int, int]:
    """Mask of rows the model classifies correctly, with the (correct, total) counts."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if len(y) == 0:
        return np.zeros(0, dtype=bool), 0, 0
    mask = model.predict(X) == y
    return mask, int(mask.sum()), int(len(y))
