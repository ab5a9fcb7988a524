"""Acceptance criteria 1-10, one test each, at the stated tolerances.

Every test prints a single PASS/FAIL/SKIP line; the same lines are repeated
in the terminal summary so they survive output capture.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from ecgclues.config import PipelineConfig
from ecgclues.counterfactual import CounterfactualExplainer, NoCounterfactualError, filter_correct
from ecgclues.features import (
    FEATURE_INDEX,
    FEATURE_NAMES,
    TEMPORAL_FEATURES,
    beat_vector,
    build_feature_matrix,
    decode_feature_name,
    encode_feature_name,
)
from ecgclues.io import LEAD_NAMES
from ecgclues.metrics import (
    alignment_score,
    compare_sparsity,
    load_clinical_weights,
    prf1,
    vvs,
    weighted_sparsity,
)
from ecgclues.model import GradientBoostedTrees, importance_order
from ecgclues.pipeline import STAGES, run_all
from ecgclues.report import ChangedFeature, ReportLayout, build_markings, emphasis, render_report
from ecgclues.signal import process_record
from ecgclues.synth import BeatTemplate, make_cohort, synthesize, write_cohort

from oracles import ACCEPTANCE, full_oracle
from test_metrics import (
    ALIGN_FIXTURES,
    PRF_FIXTURES,
    RANGES,
    SPARSITY_FIXTURES,
    TABLE_W,
    VVS_FIXTURES,
    alignment_exact,
    cfset,
    prf1_exact,
    sparsity_exact,
)
from test_report import GOLDEN, _golden_inputs


@contextlib.contextmanager
def criterion(n: int, title: str):
    detail = [title]
    ACCEPTANCE[n] = ("FAIL", title)
    try:
        yield detail
    except pytest.skip.Exception:
        ACCEPTANCE[n] = ("SKIP", " | ".join(detail))
        print(f"criterion {n}: SKIP  {' | '.join(detail)}")
        raise
    except BaseException:
        ACCEPTANCE[n] = ("FAIL", " | ".join(detail))
        print(f"criterion {n}: FAIL  {' | '.join(detail)}")
        raise
    ACCEPTANCE[n] = ("PASS", " | ".join(detail))
    print(f"criterion {n}: PASS  {' | '.join(detail)}")


# --- 1 ------------------------------------------------------------------------------------

def test_criterion_01_feature_exactness():
    with criterion(1, "noiseless features vs closed form") as info:
        t0 = time.perf_counter()
        syn = synthesize(BeatTemplate(rr_ms=[900.0, 1000.0, 1100.0]), n_beats=9, fs=100.0, seed=0)
        worst_amp = worst_dur = 0.0
        checked = 0
        for pos in range(1, syn.truth.n_beats - 1):
            vec = beat_vector(syn.record, syn.truth, pos)
            oracle = full_oracle(syn, pos)
            assert set(oracle) == set(FEATURE_NAMES)
            for name, expected in oracle.items():
                got = vec[FEATURE_INDEX[name]]
                if expected is None:
                    assert math.isnan(got), name
                    continue
                checked += 1
                err = abs(got - expected)
                if name in TEMPORAL_FEATURES:
                    # one sample period; QTc divides the duration by sqrt(RR_Prev)
                    tol = 1.0 / syn.record.fs
                    if name == "QTc":
                        tol /= math.sqrt(oracle["RR_Prev"])
                    elif name == "RR_Rate":
                        tol = 1e-12
                    assert err <= tol, (name, got, expected)
                    worst_dur = max(worst_dur, err)
                else:
                    assert err <= 1e-9, (name, got, expected)
                    worst_amp = max(worst_amp, err)
        elapsed = time.perf_counter() - t0
        info.append(f"{checked} values, max amp err {worst_amp:.1e} mV, max dur err {worst_dur * 1000:.1f} ms")
        info.append(f"{elapsed:.2f}s")
        assert elapsed < 5.0


# --- 2 ------------------------------------------------------------------------------------

def test_criterion_02_feature_count_and_codec(small_cohort):
    with criterion(2, "194 columns, codec identity") as info:
        fm = build_feature_matrix([process_record(s.record) for s in small_cohort])
        assert fm.X.shape[1] == 194
        fm_one = build_feature_matrix([process_record(small_cohort[0].record)])
        assert fm_one.X.shape[1] == 194
        for name in FEATURE_NAMES:
            assert encode_feature_name(decode_feature_name(name)) == name
        info.append(f"{fm.X.shape[0]} beats x {fm.X.shape[1]} features")


# --- 3 ------------------------------------------------------------------------------------

PEAKS = ("P_peak", "Q_peak", "R_peak", "S_peak", "T_peak")


@pytest.mark.slow
def test_criterion_03_delineation_recovery():
    with criterion(3, "peak fiducials noiseless ±1, R at 20 dB ±2") as info:
        syn = synthesize(BeatTemplate(), n_beats=10, fs=100.0, seed=0)
        seg = process_record(syn.record, apply_denoise=False)
        worst = 0
        for w in seg.windows:
            for lead in LEAD_NAMES:
                for name in PEAKS:
                    expected = syn.truth.get(w.position, lead, name)
                    if expected is None:
                        continue
                    got = seg.fiducials.get(w.position, lead, name)
                    assert got is not None, (lead, name)
                    worst = max(worst, abs(got - expected))
        assert worst <= 1
        info.append(f"noiseless worst {worst} sample")

        hit = total = 0
        for seed in range(100):
            rr = 700.0 + 50.0 * (seed % 8)
            noisy = synthesize(BeatTemplate(rr_ms=rr, snr_db=20.0), n_beats=10, fs=100.0, seed=seed)
            detected = np.asarray(process_record(noisy.record).fiducials.r_peaks)
            for r in noisy.truth.r_peaks:
                total += 1
                hit += bool(len(detected)) and int(np.min(np.abs(detected - r))) <= 2
        info.append(f"20 dB: {hit}/{total} R peaks within ±2")
        assert hit / total >= 0.95


# --- 4 ------------------------------------------------------------------------------------

def test_criterion_04_classifier_sanity():
    with criterion(4, "XOR depth 2, 50 trees; seeded determinism") as info:
        grid = np.array(list(itertools.product([0.0, 1.0], repeat=2)))
        X = np.repeat(grid, 25, axis=0)
        y = (X[:, 0] != X[:, 1]).astype(int)
        model = GradientBoostedTrees(n_estimators=50, max_depth=2, random_state=0).fit(X, y)
        acc = float(np.mean(model.predict(X) == y))
        info.append(f"train accuracy {acc:.3f}")
        assert acc >= 0.95

        rng = np.random.default_rng(0)
        Z = rng.normal(size=(300, 8))
        t = (Z[:, 0] * Z[:, 1] + Z[:, 2] > 0).astype(int)
        a = GradientBoostedTrees(n_estimators=50, random_state=3).fit(Z, t).to_json()
        b = GradientBoostedTrees(n_estimators=50, random_state=3).fit(Z, t).to_json()
        assert a == b
        info.append("serialized models identical")


# --- 5 ------------------------------------------------------------------------------------

PTBXL = os.environ.get("ECGCLUES_PTBXL")


@pytest.mark.ptbxl
def test_criterion_05_ptbxl_cohort_and_f1_bands(tmp_path):
    import csv

    with criterion(5, "PTB-XL cohort sizes and F1 bands") as info:
        if not PTBXL:
            info.append("dataset not present")
            pytest.skip("PTB-XL not present: set ECGCLUES_PTBXL to the dataset root")
        root = Path(PTBXL)
        workdir = Path(os.environ.get("ECGCLUES_PTBXL_WORKDIR", tmp_path / "ptbxl"))
        cfg = PipelineConfig().with_overrides(
            "paths", records=str(root), manifest=str(root / "ptbxl_database.csv"), workdir=str(workdir))
        cfg = cfg.with_overrides("run", workers=os.cpu_count() or 1)
        cfg = cfg.with_overrides("explain", feature_sets=("5", "10", "15", "20"), max_queries=1)
        run_all(cfg, stages=STAGES[:6])

        counts = {(r["split"], r["label"]): int(r["patients"])
                  for r in csv.DictReader((workdir / "cohort_counts.csv").open())}
        info.append(f"cohort {counts}")
        assert counts == {("train", "NORM"): 1559, ("train", "MI"): 1559,
                          ("test", "NORM"): 390, ("test", "MI"): 390}

        f1 = {int(r["n_features"]): 100 * float(r["test_f1"])
              for r in csv.DictReader((workdir / "curve" / "feature_sets.csv").open())}
        info.append("F1 " + ", ".join(f"{k}: {v:.2f}" for k, v in sorted(f1.items())))
        assert abs(f1[20] - 86.59) <= 5.0
        assert abs(f1[97] - 88.47) <= 5.0
        order = [f1[k] for k in (5, 10, 15, 20, 97)]
        assert all(b >= a - 1.0 for a, b in zip(order, order[1:]))


# --- 6 ------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def synthetic_fm():
    cohort = make_cohort(20, seed=11, n_beats=8)
    fm = build_feature_matrix([process_record(s.record) for s in cohort])
    train = np.array([int(rid) % 5 != 0 for rid, _ in fm.provenance])
    full = GradientBoostedTrees(n_estimators=100, random_state=0, feature_names=list(fm.names))
    full.fit(fm.X[train], fm.labels[train])
    return fm, train, importance_order(full)


def explain_cohort(fm, train, names, n_queries):
    """GBDT on ``names`` and counterfactuals for the first correctly classified MI beats."""
    X = fm.columns(names)
    X = np.where(np.isnan(X), np.nanmean(X[train], axis=0), X)
    model = GradientBoostedTrees(n_estimators=100, random_state=0, feature_names=list(names))
    model.fit(X[train], fm.labels[train])
    explainer = CounterfactualExplainer(model, random_state=0).fit(X[train])
    mask, _, _ = filter_correct(model, X, fm.labels)
    rows = [i for i in np.flatnonzero(mask) if fm.labels[i] == 1][:n_queries]
    t0 = time.perf_counter()
    sets, failed = [], 0
    for q, i in enumerate(rows):
        rid, beat = fm.provenance[i]
        try:
            sets.append(explainer.explain(X[i], target=0, random_state=q, record_id=rid, beat=beat))
        except NoCounterfactualError:
            failed += 1
    elapsed = time.perf_counter() - t0
    return dict(model=model, explainer=explainer, rows=rows, sets=sets, failed=failed, elapsed=elapsed)


@pytest.fixture(scope="module")
def synthetic_cfs(synthetic_fm):
    fm, train, order = synthetic_fm
    return explain_cohort(fm, train, order[:5], 50)


def test_criterion_06_counterfactual_validity(synthetic_cfs):
    with criterion(6, "cf validity, ranges, k=3 distinct, grid oracle, runtime") as info:
        d = synthetic_cfs
        model, exp = d["model"], d["explainer"]
        assert len(d["rows"]) == 50
        n_cf = 0
        for cs in d["sets"]:
            p = model.predict_proba(cs.counterfactuals)[:, 0]
            assert np.all(p >= 0.5 + exp.margin)
            lo = np.minimum(exp.ranges_.lo, cs.original)
            hi = np.maximum(exp.ranges_.hi, cs.original)
            assert np.all((cs.counterfactuals >= lo) & (cs.counterfactuals <= hi))
            assert cs.k == 3 and len({tuple(c) for c in cs.counterfactuals}) == 3
            n_cf += cs.k
        info.append(f"{n_cf} cfs over {len(d['sets'])} queries valid, {d['failed']} without cf")
        info.append(f"{d['elapsed']:.1f}s for 50 beats at 5 features")
        assert d["failed"] == 0
        assert d["elapsed"] < 60.0

        # 1-D step model: the nearest valid point is found by exhaustive grid search
        class Step:
            n_features_in_ = 1
            feature_names_ = ["x0"]

            def predict_proba(self, Z):
                p = np.where(np.asarray(Z, dtype=float)[:, 0] > 0.5, 0.9, 0.1)
                return np.column_stack([1 - p, p])

        one = CounterfactualExplainer(Step(), k=1).fit(np.random.default_rng(0).uniform(0, 1, (400, 1)))
        cs = one.explain([0.2], target=1)
        lo, hi = one.ranges_.lo[0], one.ranges_.hi[0]
        grid = np.linspace(lo, hi, 100_001)
        valid = grid[Step().predict_proba(grid[:, None])[:, 1] >= 0.5 + one.margin]
        oracle = valid[np.argmin(np.abs(valid - 0.2))]
        gap = abs(cs.counterfactuals[0, 0] - oracle) / (hi - lo)
        info.append(f"grid oracle gap {100 * gap:.2f}% of range")
        assert gap <= 0.02


# --- 7 ------------------------------------------------------------------------------------

def test_criterion_07_metric_oracles():
    with criterion(7, "metric oracles, 17/18, VVS max 25") as info:
        for counts in PRF_FIXTURES:
            assert all(abs(g - w) <= 1e-12 for g, w in zip(prf1(*counts), prf1_exact(*counts)))
        for important, marked in ALIGN_FIXTURES:
            for mode in ("agreement", "marked-only"):
                assert abs(alignment_score(important, marked, mode) - alignment_exact(important, marked, mode)) <= 1e-12
        for scores in VVS_FIXTURES:
            assert vvs(scores) == sum(scores)
        for sets in SPARSITY_FIXTURES:
            got = weighted_sparsity([cfset(n, o, c) for n, o, c in sets], TABLE_W, RANGES)
            want = sparsity_exact(sets, TABLE_W, RANGES)
            assert abs(got[0] - want[0]) <= 1e-12 and abs(got[1] - want[1]) <= 1e-12
        info.append(f"fixtures prf1 {len(PRF_FIXTURES)}, alignment {len(ALIGN_FIXTURES)}, "
                    f"vvs {len(VVS_FIXTURES)}, sparsity {len(SPARSITY_FIXTURES)}")
        s = alignment_score({"II", "III", "aVF"}, {"II", "III", "aVF", "V2"})
        assert abs(s - 17 / 18) <= 1e-12
        assert vvs((5, 5, 5, 5, 5)) == 25
        with pytest.raises(ValueError):
            vvs((6, 5, 5, 5, 5))
        info.append(f"alignment {s:.3f}, VVS max 25")


# --- 8 ------------------------------------------------------------------------------------

def test_criterion_08_sparsity_comparison(synthetic_fm):
    with criterion(8, "clinical vs model sparsity, identity case") as info:
        fm, train, order = synthetic_fm
        # clinician-chosen features explained alongside the model's top five
        names = order[:5] + [n for n in ("II_T", "II_R", "V3_ST") if n not in order[:5]]
        d = explain_cohort(fm, train, names, 10)
        assert d["sets"]
        clinical = load_clinical_weights()
        importances = dict(zip(d["model"].feature_names_, d["model"].feature_importances_))
        ranges = d["explainer"].ranges_.as_dict()
        comp = compare_sparsity(d["sets"], clinical, importances, ranges, default_weight=0.0)
        m, s = comp.clinical
        mm, ms = comp.model
        assert comp.summary() == f"clinical {m:.2f} ± {s:.2f} vs model {mm:.2f} ± {ms:.2f}"
        assert {r["record"] for r in comp.rows()} == {cs.record_id for cs in d["sets"]}
        info.append(comp.summary())

        for w in (clinical, importances):
            same = compare_sparsity(d["sets"], w, w, ranges, default_weight=0.0)
            assert same.clinical == same.model
        info.append("identity weighting equal")


# --- 9 ------------------------------------------------------------------------------------

def test_criterion_09_vcce_rendering():
    with criterion(9, "marking count, emphasis monotone, golden SVG") as info:
        syn = synthesize(BeatTemplate(rr_ms=800.0), n_beats=5, fs=100.0, record_id="fixture", label="MI")
        rows = [ChangedFeature("fixture", 0, "II_R", 3, 3), ChangedFeature("fixture", 0, "V3_ST", 2, 3),
                ChangedFeature("fixture", 1, "II_R", 1, 3), ChangedFeature("fixture", 1, "QTc", 3, 3),
                ChangedFeature("fixture", 2, "aVF_ST_mean", 1, 3)]
        marks = build_markings(rows, syn.record, syn.truth)
        renderable = {(r.beat, r.feature) for r in rows if decode_feature_name(r.feature).renderable}
        assert len(marks) == len(renderable) == 4
        for k in (1, 3, 5):
            ws = [emphasis(c, k) for c in range(1, k + 1)]
            assert all(b > a for a, b in zip(ws, ws[1:]))
        record, golden_marks = _golden_inputs()
        for name, layout in (("fixture_12x1.svg", ReportLayout()),
                             ("fixture_6x2.svg", ReportLayout(rows=6, cols=2, grid=False))):
            svg = render_report(record, golden_marks, layout).encode("utf-8")
            assert svg == (GOLDEN / name).read_bytes(), name
        info.append(f"{len(marks)} markings, 2 golden files identical")


# --- 10 -----------------------------------------------------------------------------------

def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and "logs" not in p.relative_to(root).parts}


@pytest.mark.slow
def test_criterion_10_end_to_end_determinism(tmp_path):
    with criterion(10, "two full pipeline runs byte-identical") as info:
        cohort = tmp_path / "cohort"
        write_cohort(make_cohort(12, seed=0, n_beats=10), cohort)
        t0 = time.perf_counter()
        trees = []
        for name in ("a", "b"):
            cfg = PipelineConfig().with_overrides(
                "paths", records=str(cohort), manifest=str(cohort / "manifest.csv"), workdir=str(tmp_path / name))
            assert run_all(cfg) == {s: "ran" for s in STAGES}
            trees.append(_tree(tmp_path / name))
        elapsed = time.perf_counter() - t0
        a, b = trees
        assert sorted(a) == sorted(b)
        differing = [k for k in a if a[k] != b[k]]
        info.append(f"{len(a)} artifacts, {len(differing)} differ, {elapsed:.1f}s total")
        assert not differing, differing
        assert elapsed < 180.0
