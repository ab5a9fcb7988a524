from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecgclues.counterfactual import CounterfactualSet
from ecgclues.io import LEAD_NAMES
from ecgclues.metrics import (
    ClinicianLabels,
    aggregate_interpretability,
    alignment_score,
    compare_sparsity,
    confusion_counts,
    f1_from_predictions,
    format_tier,
    load_clinical_weights,
    mcnemar_table,
    prf1,
    read_clinician_labels,
    vvs,
    weighted_sparsity,
)

from oracles import prf1_oracle

# --- spreadsheet-style oracles (exact rational arithmetic) ---------------------------


def prf1_exact(tp, fp, fn):
    p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f = 2 * p * r / (p + r) if p + r else Fraction(0)
    return float(p), float(r), float(f)


def alignment_exact(important, marked, mode="agreement", wi=3, wo=1):
    num = den = Fraction(0)
    for lead in LEAD_NAMES:
        w = Fraction(wi) if lead in important else Fraction(wo)
        den += w
        if mode == "agreement":
            ok = (lead in important and lead in marked) or (lead not in important and lead not in marked)
        else:
            ok = lead in marked
        if ok:
            num += w
    return float(num / den)


def sparsity_exact(sets, weights, ranges):
    scores = []
    for names, original, cfs in sets:
        total = sum(Fraction(weights[n]) for n in names)
        for cf in cfs:
            s = Fraction(0)
            for n, a, b in zip(names, original, cf):
                lo, hi = ranges[n]
                x = abs(Fraction(b) - Fraction(a)) / (Fraction(hi) - Fraction(lo))
                s += abs(x * Fraction(weights[n]) / total)
            scores.append(s)
    mean = sum(scores) / len(scores)
    var = sum((s - mean) ** 2 for s in scores) / len(scores)
    return float(mean), math.sqrt(float(var))


def cfset(names, original, cfs, record_id="r"):
    cfs = np.asarray(cfs, dtype=float)
    return CounterfactualSet(tuple(names), np.asarray(original, dtype=float), 1, cfs,
                             np.full(len(cfs), 0.9), np.zeros(len(cfs)), record_id=record_id)


# --- prf1 -------------------------------------------------------------------------------

PRF_FIXTURES = [(1, 0, 0), (45, 5, 5), (0, 0, 0), (3, 7, 2), (10, 0, 30), (0, 4, 6), (99, 1, 0)]


@pytest.mark.parametrize("counts", PRF_FIXTURES)
def test_prf1_fixtures(counts):
    got = prf1(*counts)
    want = prf1_exact(*counts)
    assert all(abs(g - w) <= 1e-12 for g, w in zip(got, want))


def test_prf1_named_examples():
    assert prf1(1, 0, 0) == (1.0, 1.0, 1.0)
    assert prf1(45, 5, 5) == pytest.approx((0.9, 0.9, 0.9), abs=1e-12)
    assert prf1(0, 0, 0) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        prf1(-1, 0, 0)


@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_f1_zero_iff_product_zero(tp, fp, fn):
    p, r, f = prf1(tp, fp, fn)
    assert (f == 0) == (p * r == 0)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_f1_from_predictions_matches_loop(pairs):
    y, p = zip(*pairs)
    assert abs(f1_from_predictions(y, p) - prf1_oracle(y, p)[2]) <= 1e-12


def test_confusion_and_mcnemar():
    y = [1, 1, 0, 0, 1]
    a = [1, 0, 0, 1, 1]
    b = [1, 1, 1, 1, 0]
    assert confusion_counts(y, a) == (2, 1, 1, 1)
    assert mcnemar_table(y, a, b) == {"both_correct": 1, "a_only": 2, "b_only": 1, "both_wrong": 1}


# --- alignment ------------------------------------------------------------------------------

ALIGN_FIXTURES = [
    ({"II", "III", "aVF"}, {"II", "III", "aVF", "V2"}),
    (set(LEAD_NAMES), set(LEAD_NAMES)),
    (set(), set()),
    ({"V1", "V2", "V3"}, {"I", "aVL"}),
    ({"II"}, set(LEAD_NAMES)),
    ({"I", "V5", "V6"}, {"V5"}),
]


@pytest.mark.parametrize("important, marked", ALIGN_FIXTURES)
@pytest.mark.parametrize("mode", ["agreement", "marked-only"])
def test_alignment_fixtures(important, marked, mode):
    assert abs(alignment_score(important, marked, mode) - alignment_exact(important, marked, mode)) <= 1e-12


def test_alignment_seventeen_eighteenths():
    s = alignment_score({"II", "III", "aVF"}, {"II", "III", "aVF", "V2"})
    assert s == pytest.approx(17 / 18, abs=1e-12)
    assert round(s, 3) == 0.944


def test_alignment_extremes():
    assert alignment_score({"II"}, {"II"}) == 1.0
    everything_wrong = set(LEAD_NAMES) - {"II"}
    assert alignment_score({"II"}, everything_wrong) == 0.0


def test_alignment_unknown_lead():
    with pytest.raises(ValueError):
        alignment_score({"V9"}, set())
    with pytest.raises(ValueError):
        alignment_score({"II"}, set(), mode="sideways")


@given(st.sets(st.sampled_from(LEAD_NAMES)), st.sets(st.sampled_from(LEAD_NAMES)),
       st.floats(min_value=1e-3, max_value=1e3), st.sampled_from(["agreement", "marked-only"]))
def test_alignment_scale_free(important, marked, c, mode):
    base = alignment_score(important, marked, mode)
    scaled = alignment_score(important, marked, mode, important_weight=3 * c, other_weight=c)
    assert scaled == pytest.approx(base, abs=1e-12)
    assert 0.0 <= base <= 1.0


# --- VVS ---------------------------------------------------------------------------------------

VVS_FIXTURES = [(5, 5, 5, 5, 5), (0, 0, 0, 0, 0), (5, 4, 3, 2, 1), (1, 0, 5, 0, 3), (4, 4, 5, 5, 5)]


@pytest.mark.parametrize("scores", VVS_FIXTURES)
def test_vvs_fixtures(scores):
    total = 0
    for s in scores:
        total += s
    assert vvs(scores) == total


def test_vvs_maximum_is_25():
    assert vvs((5, 5, 5, 5, 5)) == 25


@pytest.mark.parametrize("bad", [(6, 0, 0, 0, 0), (-1, 0, 0, 0, 0), (1, 1, 1, 1), (2.5, 0, 0, 0, 0)])
def test_vvs_rejects_bad_scores(bad):
    with pytest.raises(ValueError):
        vvs(bad)


@given(st.lists(st.integers(0, 5), min_size=5, max_size=5), st.permutations(range(5)))
def test_vvs_permutation_invariant(scores, perm):
    assert vvs([scores[i] for i in perm]) == vvs(scores) == sum(scores)


# --- weighted sparsity -----------------------------------------------------------------------------

RANGES = {"II_R": (0.0, 2.0), "II_T": (-0.5, 0.5), "V3_ST": (-1.0, 3.0), "QTc": (0.3, 0.5)}
TABLE_W = {"II_R": 24, "II_T": 24, "V3_ST": 8, "QTc": 11}

SPARSITY_FIXTURES = [
    [(("II_R",), (1.0,), [(1.0,)])],
    [(("II_R", "II_T"), (0.5, 0.1), [(0.7, 0.1), (0.5, -0.2)])],
    [(("II_R", "II_T", "V3_ST"), (1.0, 0.0, 0.0), [(1.5, 0.2, 0.0), (1.0, 0.0, 2.0), (0.0, 0.4, -1.0)])],
    [(("QTc",), (0.4,), [(0.45,)]), (("QTc",), (0.35,), [(0.3,), (0.5,)])],
    [(("II_R", "QTc"), (1.2, 0.41), [(1.2, 0.45), (0.3, 0.41), (0.3, 0.45)]),
     (("II_R", "QTc"), (0.2, 0.33), [(0.25, 0.34)])],
]


@pytest.mark.parametrize("sets", SPARSITY_FIXTURES)
def test_weighted_sparsity_fixtures(sets):
    objs = [cfset(n, o, c) for n, o, c in sets]
    got = weighted_sparsity(objs, TABLE_W, RANGES)
    want = sparsity_exact(sets, TABLE_W, RANGES)
    assert abs(got[0] - want[0]) <= 1e-12
    assert abs(got[1] - want[1]) <= 1e-12


def test_sparsity_identity_and_full_range():
    same = cfset(["II_R"], [1.0], [[1.0]])
    assert weighted_sparsity([same], {"II_R": 1}, RANGES) == (0.0, 0.0)
    full = cfset(["II_R"], [0.0], [[2.0]])
    assert weighted_sparsity([full], {"II_R": 1}, RANGES) == (1.0, 0.0)


def test_sparsity_missing_range_or_weight():
    cs = cfset(["II_R", "V1_R"], [0, 0], [[1, 1]])
    with pytest.raises(KeyError):
        weighted_sparsity([cs], {"II_R": 1, "V1_R": 1}, RANGES)
    with pytest.raises(KeyError):
        weighted_sparsity([cs], {"II_R": 1}, {**RANGES, "V1_R": (0, 1)})


_vals = st.floats(min_value=-2, max_value=2, allow_nan=False)


@given(st.lists(st.tuples(_vals, _vals, _vals), min_size=1, max_size=4), st.tuples(_vals, _vals, _vals),
       st.floats(min_value=1e-3, max_value=1e3), st.floats(min_value=-5, max_value=5))
def test_sparsity_invariances(cfs, original, scale, shift):
    names = ("II_R", "II_T", "V3_ST")
    w = {"II_R": 3.0, "II_T": 1.0, "V3_ST": 2.0}
    base = weighted_sparsity([cfset(names, original, cfs)], w, RANGES)
    scaled = weighted_sparsity([cfset(names, original, cfs)], {k: v * scale for k, v in w.items()}, RANGES)
    moved = weighted_sparsity([cfset(names, np.add(original, shift), np.add(cfs, shift))], w, RANGES)
    assert scaled == pytest.approx(base, rel=1e-9, abs=1e-12)
    assert moved == pytest.approx(base, rel=1e-9, abs=1e-9)


def test_compare_sparsity_identity_and_format():
    sets = [cfset(n, o, c, record_id=f"r{i}") for i, (n, o, c) in enumerate(SPARSITY_FIXTURES[2] + SPARSITY_FIXTURES[1])]
    same = compare_sparsity(sets, TABLE_W, TABLE_W, RANGES)
    assert same.clinical == same.model
    diff = compare_sparsity(sets, TABLE_W, {"II_R": 0.1, "II_T": 0.6, "V3_ST": 0.3, "QTc": 0.0}, RANGES)
    assert diff.summary().startswith("clinical ") and " vs model " in diff.summary()
    m, s = diff.clinical
    assert diff.summary().split(" vs ")[0] == f"clinical {m:.2f} ± {s:.2f}"
    assert {r["record"] for r in diff.rows()} == {"r0", "r1"}


def test_single_cf_std_zero():
    cs = cfset(["II_R"], [0.0], [[0.5]])
    comp = compare_sparsity([cs], TABLE_W, {"II_R": 1.0}, RANGES)
    assert comp.clinical[1] == 0.0 and comp.model[1] == 0.0


def test_packaged_clinical_weights():
    w = load_clinical_weights()
    assert len(w) == 24
    assert (w["II_R"], w["V4_R"], w["aVR_T"]) == (24, 18, 5)
    assert all(0 <= v <= 24 for v in w.values())


# --- clinician labels ---------------------------------------------------------------------------

def _labels(tier, scores, exclusion="", rid="x", leads=("II",)):
    return ClinicianLabels(rid, tier, 0, tuple(scores), tuple(leads), exclusion)


def test_tier_identical_scores_std_zero():
    agg = aggregate_interpretability([_labels("good", (5, 5, 5, 4, 5))] * 4)
    assert agg["tiers"]["good"]["vvs_std"] == 0.0
    assert format_tier(agg["tiers"]["good"]) == "4, 24.00 ± 0.00"


def test_tier_format():
    assert format_tier({"count": 17, "vvs_mean": 23.2941, "vvs_std": 1.0440}) == "17, 23.29 ± 1.04"


def test_mixed_fixture_hand_aggregation():
    labels = [
        _labels("good", (5, 5, 5, 5, 5), rid="a"),
        _labels("good", (5, 4, 5, 5, 4), rid="b"),
        _labels("moderate", (3, 4, 5, 3, 4), rid="c"),
        _labels("moderate", (2, 3, 4, 4, 4), rid="d"),
        _labels("moderate", (5, 5, 5, 5, 5), rid="e", exclusion="VES"),
        _labels("low", (1, 0, 2, 1, 1), rid="f"),
    ]
    agg = aggregate_interpretability(labels, {"a": ["II"], "b": ["II", "V2"]})
    good = agg["tiers"]["good"]
    assert good["count"] == 2
    assert good["vvs_mean"] == pytest.approx(24.0, abs=1e-12)
    assert good["vvs_std"] == pytest.approx(1.0, abs=1e-12)
    mod = agg["tiers"]["moderate"]
    assert mod["count"] == 2 and mod["vvs_mean"] == pytest.approx(18.0) and mod["vvs_std"] == pytest.approx(1.0)
    assert agg["excluded"]["VES"]["records"] == ["e"]
    assert good["alignment_mean"] == pytest.approx((1.0 + 13 / 14) / 2, abs=1e-12)


def test_read_clinician_labels(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text(
        "record_id,tier,wrong_marks,p,q,r,s,t,important_leads,exclusion\n"
        "10,High,1,5,5,5,4,5,II;III;AVF,\n"
        "11,low,3,1,1,2,0,1,,artifact\n"
    )
    rows = read_clinician_labels(path)
    assert rows[0].tier == "good" and rows[0].vvs == 24
    assert rows[0].important_leads == ("II", "III", "aVF")
    assert rows[1].exclusion == "artifact"
