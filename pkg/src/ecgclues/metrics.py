"""Classification metrics and the clinician-facing interpretability metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .io import LEAD_NAMES, canonical_lead

TIERS = ("good", "moderate", "low")
WAVEFORMS = ("P", "Q", "R", "S", "T")


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall and F1; any zero denominator yields 0."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def confusion_counts(y_true, y_pred, positive=1) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn)."""
    t = np.asarray(y_true) == positive
    p = np.asarray(y_pred) == positive
    return int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(t & ~p)), int(np.sum(~t & ~p))


def f1_from_predictions(y_true, y_pred, positive=1) -> float:
    tp, fp, fn, _ = confusion_counts(y_true, y_pred, positive)
    return prf1(tp, fp, fn)[2]


def mcnemar_table(y_true, pred_a, pred_b) -> dict[str, int]:
    """Paired correct/incorrect counts of two classifiers on the same rows."""
    y = np.asarray(y_true)
    a = np.asarray(pred_a) == y
    b = np.asarray(pred_b) == y
    return {
        "both_correct": int(np.sum(a & b)),
        "a_only": int(np.sum(a & ~b)),
        "b_only": int(np.sum(~a & b)),
        "both_wrong": int(np.sum(~a & ~b)),
    }


def alignment_score(important_leads: Iterable[str], marked_leads: Iterable[str], mode: str = "agreement",
                    important_weight: float = 3.0, other_weight: float = 1.0) -> float:
    """Lead-weighted agreement between clinician-important and marked leads over all 12 leads.

    ``mode="agreement"`` credits a lead when it is important and marked or
    neither; ``mode="marked-only"`` credits every marked lead.
    """
    important = {canonical_lead(l) for l in important_leads}
    marked = {canonical_lead(l) for l in marked_leads}
    if mode not in ("agreement", "marked-only"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    if important_weight <= 0 or other_weight <= 0:
        raise ValueError("lead weights must be positive")
    num = 0.0
    den = 0.0
    for lead in LEAD_NAMES:
        w = important_weight if lead in important else other_weight
        den += w
        if mode == "agreement":
            hit = (lead in important) == (lead in marked)
        else:
            hit = lead in marked
        if hit:
            num += w
    # den >= 12 * min weight > 0; no floor, so rescaling both weights never changes the score
    return num / den


def vvs(scores: Sequence[int]) -> int:
    """Visualisation validity score: the sum of the five per-waveform scores (0..25)."""
    scores = list(scores)
    if len(scores) != len(WAVEFORMS):
        raise ValueError(f"expected {len(WAVEFORMS)} waveform scores, got {len(scores)}")
    for s in scores:
        if s != int(s) or not 0 <= s <= 5:
            raise ValueError(f"waveform score must be an integer in 0..5, got {s}")
    return int(sum(int(s) for s in scores))


# ---------------------------------------------------------------------------
# Weighted sparsity
# ---------------------------------------------------------------------------

def load_clinical_weights(path: str | Path | None = None) -> dict[str, float]:
    """Clinical importance scores (0..24) per feature; the packaged table by default."""
    if path is None:
        text = resources.files("ecgclues").joinpath("data/clinical_weights.csv").read_text()
    else:
        text = Path(path).read_text()
    weights = {}
    for row in csv.DictReader(text.splitlines()):
        score = float(row["score"])
        if not 0 <= score <= 24:
            raise ValueError(f"clinical score for {row['feature']} outside [0, 24]: {score}")
        weights[row["feature"]] = score
    return weights


def cf_scores(cf_set, weights: Mapping[str, float], ranges: Mapping[str, tuple[float, float]],
              default_weight: float | None = None) -> list[float]:
    """Weighted sparsity S_j of every counterfactual in one set."""
    names = list(cf_set.feature_names)
    w = []
    for n in names:
        if n in weights:
            w.append(float(weights[n]))
        elif default_weight is not None:
            w.append(float(default_weight))
        else:
            raise KeyError(f"no weight for feature {n!r}")
    w = np.asarray(w)
    total = w.sum()
    if total <= 0:
        raise ValueError("weights over the counterfactual features sum to zero")
    w = w / total
    widths = []
    for n in names:
        if n not in ranges:
            raise KeyError(f"no range for feature {n!r}")
        lo, hi = ranges[n]
        widths.append(hi - lo)
    widths = np.asarray(widths, dtype=float)
    original = np.asarray(cf_set.original, dtype=float)
    out = []
    for cf in np.atleast_2d(np.asarray(cf_set.counterfactuals, dtype=float)):
        delta = np.abs(cf - original)
        if np.any((widths == 0) & (delta != 0)):
            raise ValueError("feature moved although its range is degenerate")
        x = np.divide(delta, widths, out=np.zeros_like(delta), where=widths != 0)
        out.append(float(np.sum(np.abs(x * w))))
    return out


def weighted_sparsity(cf_sets, weights: Mapping[str, float], ranges: Mapping[str, tuple[float, float]],
                      default_weight: float | None = None) -> tuple[float, float]:
    """Mean and population standard deviation of S_j over every counterfactual."""
    scores = [s for cs in cf_sets for s in cf_scores(cs, weights, ranges, default_weight)]
    if not scores:
        return 0.0, 0.0
    arr = np.asarray(scores)
    mean = float(arr.sum() / len(arr))
    std = float(math.sqrt(float(np.sum((arr - mean) ** 2)) / len(arr)))
    return mean, std


def _box(values: Sequence[float]) -> dict[str, float]:
    a = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(a, [25, 50, 75])
    return {"n": int(len(a)), "min": float(a.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(a.max())}


@dataclass
class SparsityComparison:
    clinical: tuple[float, float]
    model: tuple[float, float]
    per_record: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)

    def summary(self) -> str:
        return (f"clinical {self.clinical[0]:.2f} ± {self.clinical[1]:.2f} vs "
                f"model {self.model[0]:.2f} ± {self.model[1]:.2f}")

    def rows(self) -> list[dict]:
        out = []
        for record, schemes in sorted(self.per_record.items()):
            for scheme, box in schemes.items():
                out.append({"record": record, "scheme": scheme, **box})
        return out


def compare_sparsity(cf_sets, clinical_weights: Mapping[str, float], model_importances: Mapping[str, float],
                     ranges: Mapping[str, tuple[float, float]],
                     default_weight: float | None = None) -> SparsityComparison:
    """Weighted sparsity under clinical and model-importance weights, overall and per record."""
    cf_sets = list(cf_sets)
    clinical = weighted_sparsity(cf_sets, clinical_weights, ranges, default_weight)
    model = weighted_sparsity(cf_sets, model_importances, ranges, default_weight)
    per_record: dict[str, dict[str, list[float]]] = {}
    for cs in cf_sets:
        rec = str(getattr(cs, "record_id", ""))
        slot = per_record.setdefault(rec, {"clinical": [], "model": []})
        slot["clinical"].extend(cf_scores(cs, clinical_weights, ranges, default_weight))
        slot["model"].extend(cf_scores(cs, model_importances, ranges, default_weight))
    boxes = {rec: {k: _box(v) for k, v in d.items() if v} for rec, d in per_record.items()}
    return SparsityComparison(clinical, model, boxes)


# ---------------------------------------------------------------------------
# Clinician labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClinicianLabels:
    record_id: str
    tier: str
    wrong_marks: int
    waveform_scores: tuple[int, int, int, int, int]
    important_leads: tuple[str, ...]
    exclusion: str = ""

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"tier must be one of {TIERS}, got {self.tier!r}")
        if len(self.waveform_scores) != 5:
            raise ValueError("exactly five waveform scores (P, Q, R, S, T) are required")

    @property
    def vvs(self) -> int:
        return vvs(self.waveform_scores)


_TIER_ALIASES = {"good": "good", "high": "good", "moderate": "moderate", "low": "low"}


def read_clinician_labels(path: str | Path) -> list[ClinicianLabels]:
    """CSV columns: record_id, tier, wrong_marks, p, q, r, s, t, important_leads (``;``-separated), exclusion."""
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            tier = _TIER_ALIASES.get(row["tier"].strip().lower())
            if tier is None:
                raise ValueError(f"{path}: unknown tier {row['tier']!r}")
            leads = tuple(canonical_lead(l) for l in row.get("important_leads", "").split(";") if l.strip())
            out.append(ClinicianLabels(
                record_id=row["record_id"].strip(),
                tier=tier,
                wrong_marks=int(row.get("wrong_marks") or 0),
                waveform_scores=tuple(int(row[k]) for k in ("p", "q", "r", "s", "t")),
                important_leads=leads,
                exclusion=(row.get("exclusion") or "").strip(),
            ))
    return out


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std())


def aggregate_interpretability(labels: Sequence[ClinicianLabels],
                               marked_leads: Mapping[str, Iterable[str]] | None = None,
                               alignment_mode: str = "agreement") -> dict:
    """Per-tier count and VVS mean ± std (population), excluded reports kept apart.

    With ``marked_leads`` (record id -> leads carrying a marking) the alignment
    score is aggregated per tier too.
    """
    included = [l for l in labels if not l.exclusion]
    excluded = [l for l in labels if l.exclusion]
    tiers = {}
    for tier in TIERS:
        members = [l for l in included if l.tier == tier]
        entry = {"count": len(members)}
        entry["vvs_mean"], entry["vvs_std"] = mean_std([l.vvs for l in members])
        if marked_leads is not None:
            scores = [alignment_score(l.important_leads, marked_leads.get(l.record_id, ()), alignment_mode)
                      for l in members]
            entry["alignment_mean"], entry["alignment_std"] = mean_std(scores)
        tiers[tier] = entry
    reasons = {}
    for reason in sorted({l.exclusion for l in excluded}):
        members = [l for l in excluded if l.exclusion == reason]
        m, s = mean_std([l.vvs for l in members])
        reasons[reason] = {"count": len(members), "vvs_mean": m, "vvs_std": s,
                           "records": [l.record_id for l in members]}
    return {"tiers": tiers, "excluded": reasons}


def format_tier(entry: Mapping) -> str:
    return f"{entry['count']}, {entry['vvs_mean']:.2f} ± {entry['vvs_std']:.2f}"
