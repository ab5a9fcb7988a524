"""Resumable pipeline stages writing plain files under a work directory.

Stages run in a fixed order; each one records the hashes of what it read
and wrote in ``manifest.json`` and is skipped when a rerun would read the
same inputs under the same configuration. Timing goes to ``logs/`` only, so
every other file is a deterministic function of inputs, config and seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io as _io
import json
import logging
import os
import platform
import shutil
import tempfile
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from importlib import metadata
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import PipelineConfig
from .counterfactual import (CounterfactualExplainer, CounterfactualSet, NoCounterfactualError,
                             alteration_stats, derive_ranges, filter_correct)
from .features import FEATURE_NAMES, build_feature_matrix, read_feature_csv, write_feature_csv
from .io import (LEAD_NAMES, N_LEADS, CohortManifest, EcgRecord, balanced_split, filter_cohort, load_record,
                 read_cohort_jsonl, sidecar_path, write_cohort_jsonl)
from .metrics import (aggregate_interpretability, compare_sparsity, confusion_counts, load_clinical_weights,
                      mcnemar_table, prf1, read_clinician_labels)
from .model import GradientBoostedTrees, RecursiveFeatureEliminator, importance_order, incremental_curve, \
    tolerance_minimal_k
from .report import build_markings, marked_leads, prepare_data, render_report
from .signal import FIDUCIALS, MISSING, FiducialSet, SegmentedRecord, delineate, denoise, \
    detect_record_r_peaks, segment_beats

logger = logging.getLogger(__name__)

STAGES = ("ingest", "segment", "features", "train", "rank", "curve", "explain", "render", "evaluate")
MANIFEST = "manifest.json"


class PreconditionError(RuntimeError):
    """An upstream artifact or input is missing; exit code 2 territory."""


# ---------------------------------------------------------------------------
# File helpers
# ---------------------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path: Path, data: str | bytes) -> Path:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _json_text(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _finite(v: float):
    return None if v is None or not np.isfinite(v) else float(v)


def _versions() -> dict[str, str]:
    out = {"python": platform.python_version()}
    for pkg in ("ecgclues", "numpy", "scipy", "scikit-learn", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


# ---------------------------------------------------------------------------
# Workspace
# ---------------------------------------------------------------------------

class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def manifest(self) -> dict:
        p = self.path(MANIFEST)
        if not p.exists():
            return {"stages": {}}
        return json.loads(p.read_text())

    def save_manifest(self, manifest: dict) -> None:
        atomic_write(self.path(MANIFEST), _json_text(manifest))

    def rel(self, p: Path) -> str:
        return Path(p).relative_to(self.root).as_posix()

    def log(self, name: str, lines: Iterable[str]) -> None:
        p = self.path("logs", f"{name}.log")
        p.parent.mkdir(parents=True, exist_ok=True)
        with p.open("a") as fh:
            for line in lines:
                fh.write(line + "\n")

    def stage_done(self, stage: str) -> bool:
        entry = self.manifest()["stages"].get(stage)
        if entry is None:
            return False
        return all(self.path(rel).exists() for rel in entry["outputs"])


def _require(ws: Workspace, stage: str) -> None:
    for upstream in STAGES[:STAGES.index(stage)]:
        if upstream in _UPSTREAM[stage] and not ws.stage_done(upstream):
            raise PreconditionError(f"run {upstream} first (needed by {stage})")


_UPSTREAM = {
    "ingest": (),
    "segment": ("ingest",),
    "features": ("ingest", "segment"),
    "train": ("ingest", "segment", "features"),
    "rank": ("ingest", "segment", "features", "train"),
    "curve": ("ingest", "segment", "features", "train", "rank"),
    "explain": ("ingest", "segment", "features", "train", "rank", "curve"),
    "render": ("ingest", "segment", "features", "train", "rank", "curve", "explain"),
    "evaluate": ("ingest", "segment", "features", "train", "rank", "curve", "explain", "render"),
}

_CONFIG_SECTIONS = {
    "ingest": ("run",),
    "segment": ("run", "delineation"),
    "features": ("run", "delineation"),
    "train": ("train",),
    "rank": ("train", "rank"),
    "curve": ("train", "rank", "explain"),
    "explain": ("train", "explain"),
    "render": ("explain", "layout"),
    "evaluate": ("explain",),
}


# ---------------------------------------------------------------------------
# Shared loaders
# ---------------------------------------------------------------------------

def _record_base(cfg: PipelineConfig, entry) -> Path:
    if not cfg.paths.records:
        raise PreconditionError("no records directory configured (paths.records / --records)")
    return Path(cfg.paths.records) / (entry.path or entry.record_id)


def _load_entry(cfg: PipelineConfig, entry) -> EcgRecord:
    base = _record_base(cfg, entry)
    fs = None
    csv_path = base.with_suffix(".csv") if base.suffix != ".csv" else base
    if not base.with_suffix(".hea").exists() and csv_path.exists():
        side = sidecar_path(csv_path)
        if not side.exists() or "fs" not in side.read_text():
            fs = cfg.run.fs
    rec = load_record(base, fs=fs, label=entry.label, patient_id=entry.patient_id)
    header = dataclasses.replace(rec.header, record_name=entry.record_id)
    return EcgRecord(header, rec.signals, entry.label, entry.patient_id)


def _record_inputs(cfg: PipelineConfig, entries) -> dict[str, str]:
    out = {}
    for e in entries:
        base = _record_base(cfg, e)
        for suffix in (".hea", ".dat", ".csv", ".meta"):
            p = base.with_suffix(suffix)
            if p.exists():
                out[f"records:{Path(e.path or e.record_id).with_suffix(suffix).as_posix()}"] = sha256_file(p)
    return out


def _read_jsonl(path: Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _load_segmented(cfg: PipelineConfig, ws: Workspace) -> dict[str, tuple[list[int], str, dict[int, dict]]]:
    peaks = {d["record"]: d for d in _read_jsonl(ws.path("segment", "rpeaks.jsonl"))}
    fid_rows: dict[str, list[dict]] = {}
    for row in _read_jsonl(ws.path("segment", "fiducials.jsonl")):
        fid_rows.setdefault(row["record"], []).append(row)
    out = {}
    for rid, d in peaks.items():
        out[rid] = (d["r_peaks"], d["reference_lead"], fid_rows.get(rid, []))
    return out


def _fiducial_set(r_peaks: Sequence[int], reference: str, rows: Sequence[dict]) -> FiducialSet:
    idx = np.full((len(r_peaks), N_LEADS, len(FIDUCIALS)), MISSING, dtype=np.int64)
    for row in rows:
        li = LEAD_NAMES.index(row["lead"])
        for j, name in enumerate(FIDUCIALS):
            if row.get(name) is not None:
                idx[row["position"], li, j] = int(row[name])
    return FiducialSet(np.asarray(r_peaks, dtype=np.int64), idx, reference)


def _restore_segmented(cfg: PipelineConfig, entry, seg_info) -> SegmentedRecord:
    r_peaks, reference, rows = seg_info
    record = denoise(_load_entry(cfg, entry), cfg.delineation)
    fid = _fiducial_set(r_peaks, reference, rows)
    return SegmentedRecord(record, fid, segment_beats(fid, r_peaks))


def _model_params(cfg: PipelineConfig) -> dict:
    t = cfg.train
    return dict(n_estimators=t.n_estimators, max_depth=t.max_depth, learning_rate=t.learning_rate,
                reg_lambda=t.reg_lambda, subsample=t.subsample, min_child_weight=t.min_child_weight,
                gamma=t.gamma, random_state=cfg.run.seed)


def _train_test(ws: Workspace):
    fm = read_feature_csv(ws.path("features", "features.csv"))
    return fm, fm.split("train"), fm.split("test")


def _feature_sets(cfg: PipelineConfig, ws: Workspace) -> dict[int, list[str]]:
    order = [row["feature"] for row in csv.DictReader(ws.path("rank", "importance.csv").open())]
    sets = {}
    for n in cfg.explain.sizes + [len(order)]:
        if n > len(order):
            raise ValueError(f"feature set of {n} exceeds the {len(order)} ranked features")
        names = list(order[:n])
        names += [f for f in cfg.explain.extra_features if f not in names]
        sets[n] = names
    return sets


def _load_model(path: Path) -> GradientBoostedTrees:
    return GradientBoostedTrees.from_json(Path(path).read_text())


def _impute(model: GradientBoostedTrees, X: np.ndarray) -> np.ndarray:
    return np.where(np.isnan(X), model.imputation_means_[None, :], X)


# ---------------------------------------------------------------------------
# Stages. Each returns (inputs, outputs): name -> hash, list of written paths.
# ---------------------------------------------------------------------------

def _stage_ingest(cfg: PipelineConfig, ws: Workspace):
    if not cfg.paths.manifest:
        raise PreconditionError("no manifest configured (paths.manifest / --manifest)")
    manifest_path = Path(cfg.paths.manifest)
    if not manifest_path.exists():
        raise PreconditionError(f"manifest {manifest_path} does not exist")
    inputs = {f"manifest:{manifest_path.name}": sha256_file(manifest_path)}
    cohort = filter_cohort(CohortManifest.from_csv(manifest_path))
    split = balanced_split(cohort, cfg.run.seed, cfg.run.test_fraction)
    out = ws.path("cohort.jsonl")
    tmp = ws.path(".cohort.jsonl.tmp")
    write_cohort_jsonl(split, tmp)
    os.replace(tmp, out)
    counts = [(part, label, sum(1 for e in split[part] if e.label == label))
              for part in ("train", "test") for label in ("NORM", "MI")]
    summary = atomic_write(ws.path("cohort_counts.csv"), _csv_text(["split", "label", "patients"], counts))
    return inputs, [out, summary]


def _segment_one(cfg: PipelineConfig, entry):
    rec = denoise(_load_entry(cfg, entry), cfg.delineation)
    r_peaks, reference = detect_record_r_peaks(rec, cfg.delineation)
    fid = delineate(rec, r_peaks, cfg.delineation, reference_lead=reference)
    windows = segment_beats(fid, r_peaks)
    return rec.record_id, r_peaks, reference, fid, windows


def _stage_segment(cfg: PipelineConfig, ws: Workspace):
    entries = read_cohort_jsonl(ws.path("cohort.jsonl"))
    inputs = {"cohort.jsonl": sha256_file(ws.path("cohort.jsonl")), **_record_inputs(cfg, entries)}

    def work(entry):
        try:
            return _segment_one(cfg, entry)
        except (ValueError, FileNotFoundError) as exc:
            return entry.record_id, exc

    with ThreadPoolExecutor(max_workers=max(1, cfg.run.workers)) as pool:
        results = list(pool.map(work, entries))

    peaks_lines, fid_lines, skipped = [], [], []
    for res in results:
        if len(res) == 2:
            skipped.append((res[0], str(res[1])))
            logger.warning("record %s skipped: %s", res[0], res[1])
            continue
        rid, r_peaks, reference, fid, windows = res
        peaks_lines.append(json.dumps({"record": rid, "r_peaks": [int(v) for v in r_peaks],
                                       "reference_lead": reference}, sort_keys=True))
        for w in windows:
            for row in fid.iter_json(rid, [w.position]):
                row["beat"] = w.beat_index
                row["position"] = w.position
                fid_lines.append(json.dumps(row))
    outs = [
        atomic_write(ws.path("segment", "rpeaks.jsonl"), "".join(l + "\n" for l in peaks_lines)),
        atomic_write(ws.path("segment", "fiducials.jsonl"), "".join(l + "\n" for l in fid_lines)),
        atomic_write(ws.path("segment", "skipped.csv"), _csv_text(["record_id", "reason"], skipped)),
    ]
    return inputs, outs


def _stage_features(cfg: PipelineConfig, ws: Workspace):
    entries = read_cohort_jsonl(ws.path("cohort.jsonl"))
    inputs = {name: sha256_file(ws.path(*name.split("/")))
              for name in ("cohort.jsonl", "segment/rpeaks.jsonl", "segment/fiducials.jsonl")}
    inputs.update(_record_inputs(cfg, entries))
    seg = _load_segmented(cfg, ws)
    kept = [e for e in entries if e.record_id in seg]
    segmented = [_restore_segmented(cfg, e, seg[e.record_id]) for e in kept]
    fm = build_feature_matrix(segmented, [e.split for e in kept])
    train_rows = fm.split("train").X
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        means = np.nanmean(train_rows, axis=0) if len(train_rows) else np.full(len(FEATURE_NAMES), np.nan)
    path = ws.path("features", "features.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = ws.path("features", ".features.tmp.csv")
    write_feature_csv(fm, tmp, imputation_means=means)
    os.replace(tmp.with_suffix(".json"), path.with_suffix(".json"))
    os.replace(tmp, path)
    return inputs, [path, path.with_suffix(".json")]


def _classification_row(name: str, y_true, y_pred) -> list:
    tp, fp, fn, tn = confusion_counts(y_true, y_pred)
    p, r, f = prf1(tp, fp, fn)
    return [name, len(y_true), tp, fp, fn, tn, p, r, f]


_CLS_HEADER = ["model", "n", "tp", "fp", "fn", "tn", "precision", "recall", "f1"]


def _stage_train(cfg: PipelineConfig, ws: Workspace):
    inputs = {"features/features.csv": sha256_file(ws.path("features", "features.csv"))}
    fm, train, test = _train_test(ws)
    if len(train) == 0:
        raise PreconditionError("no training beats; run features on a cohort with a train split")
    model = GradientBoostedTrees(**_model_params(cfg), feature_names=list(fm.names)).fit(train.X, train.labels)
    out = atomic_write(ws.path("model", "model.json"), model.to_json())
    rows = [_classification_row("all_train", train.labels, model.predict(train.X))]
    if len(test):
        rows.append(_classification_row("all_test", test.labels, model.predict(test.X)))
    rep = atomic_write(ws.path("model", "train_report.csv"), _csv_text(_CLS_HEADER, rows))
    return inputs, [out, rep]


def _stage_rank(cfg: PipelineConfig, ws: Workspace):
    inputs = {"features/features.csv": sha256_file(ws.path("features", "features.csv")),
              "model/model.json": sha256_file(ws.path("model", "model.json"))}
    fm, train, _ = _train_test(ws)
    base = GradientBoostedTrees(**_model_params(cfg))
    keep = min(cfg.rank.keep, len(fm.names) - 1)
    rfe = RecursiveFeatureEliminator(base, n_features_to_select=keep, step=cfg.rank.step).fit(train.X, train.labels)
    order = sorted(range(len(fm.names)), key=lambda i: (rfe.ranking_[i], i))
    ranking = atomic_write(ws.path("rank", "ranking.csv"),
                           _csv_text(["feature", "rank"], [(fm.names[i], int(rfe.ranking_[i])) for i in order]))
    survivors = [fm.names[i] for i in np.flatnonzero(rfe.support_)]
    model = GradientBoostedTrees(**_model_params(cfg), feature_names=survivors).fit(
        fm.columns(survivors)[np.asarray([s == "train" for s in fm.splits])], train.labels)
    imp = dict(zip(model.feature_names_, model.feature_importances_))
    names = importance_order(model)
    importance = atomic_write(ws.path("rank", "importance.csv"),
                              _csv_text(["feature", "importance"], [(n, float(imp[n])) for n in names]))
    return inputs, [ranking, importance]


def _stage_curve(cfg: PipelineConfig, ws: Workspace):
    inputs = {"features/features.csv": sha256_file(ws.path("features", "features.csv")),
              "rank/importance.csv": sha256_file(ws.path("rank", "importance.csv"))}
    fm, train, test = _train_test(ws)
    sets = _feature_sets(cfg, ws)
    order = sets[max(sets)]
    outs = []
    est = GradientBoostedTrees(**_model_params(cfg))
    if len(test):
        cols = [fm.names.index(n) for n in order]
        curve = incremental_curve(train.X, train.labels, test.X, test.labels, cols, est)
        k_tol = tolerance_minimal_k(curve, cfg.rank.tolerance)
    else:
        curve, k_tol = [], None
    outs.append(atomic_write(ws.path("curve", "curve.csv"), _csv_text(["n_features", "f1"], curve)))
    rows = []
    for n, names in sorted(sets.items()):
        model = GradientBoostedTrees(**_model_params(cfg), feature_names=names).fit(
            train.columns(names), train.labels)
        outs.append(atomic_write(ws.path("curve", "models", f"top{n}.json"), model.to_json()))
        f1 = (_classification_row(f"top{n}", test.labels, model.predict(test.columns(names)))[-1]
              if len(test) else float("nan"))
        rows.append((n, len(names), f1))
    outs.append(atomic_write(ws.path("curve", "feature_sets.csv"),
                             _csv_text(["set", "n_features", "test_f1"], rows)))
    outs.append(atomic_write(ws.path("curve", "summary.json"),
                             _json_text({"tolerance": cfg.rank.tolerance, "tolerance_minimal_k": k_tol,
                                         "best_f1": _finite(max((f for _, f in curve), default=float("nan")))})))
    return inputs, outs


def _explainer(cfg: PipelineConfig, model: GradientBoostedTrees) -> CounterfactualExplainer:
    e = cfg.explain
    return CounterfactualExplainer(model, k=e.k, population_size=e.population_size,
                                   max_generations=e.max_generations, margin=e.margin,
                                   proximity_weight=e.proximity_weight, diversity_weight=e.diversity_weight,
                                   patience=e.patience, min_separation=e.min_separation,
                                   posthoc_sparsity=e.posthoc_sparsity, random_state=cfg.run.seed)


def _stage_explain(cfg: PipelineConfig, ws: Workspace):
    fm, train, test = _train_test(ws)
    sets = _feature_sets(cfg, ws)
    inputs = {"features/features.csv": sha256_file(ws.path("features", "features.csv"))}
    for n in cfg.explain.sizes:
        inputs[f"curve/models/top{n}.json"] = sha256_file(ws.path("curve", "models", f"top{n}.json"))
    target_label = 1 if cfg.explain.query_class == "MI" else 0
    outs, summary, timing = [], [], []
    for n in cfg.explain.sizes:
        names = sets[n]
        model = _load_model(ws.path("curve", "models", f"top{n}.json"))
        X_test = _impute(model, test.columns(names))
        explainer = _explainer(cfg, model).fit(_impute(model, train.columns(names)))
        mask, n_correct, n_total = filter_correct(model, X_test, test.labels)
        rows = [i for i in np.flatnonzero(mask) if test.labels[i] == target_label]
        if cfg.explain.max_queries > 0:
            rows = rows[:cfg.explain.max_queries]
        sets_out, failed = [], 0
        for q, i in enumerate(rows):
            rid, beat = test.provenance[i]
            t0 = time.perf_counter()
            try:
                cs = explainer.explain(X_test[i], target=1 - target_label, random_state=cfg.run.seed + q,
                                       record_id=rid, beat=beat)
            except NoCounterfactualError as exc:
                failed += 1
                logger.info("no counterfactual for %s beat %s: %s", rid, beat, exc)
                timing.append(f"top{n} {rid} {beat} failed {time.perf_counter() - t0:.3f}s")
                continue
            timing.append(f"top{n} {rid} {beat} ok {time.perf_counter() - t0:.3f}s")
            sets_out.append(cs)
        lines = "".join(json.dumps(cs.to_json(), sort_keys=True) + "\n" for cs in sets_out)
        outs.append(atomic_write(ws.path("explain", f"top{n}.jsonl"), lines))
        correct_class = int(np.sum(mask & (test.labels == target_label)))
        total_class = int(np.sum(test.labels == target_label))
        report = alteration_stats(sets_out, correct_class, total_class)
        outs.append(atomic_write(ws.path("explain", f"alterations_top{n}.csv"),
                                 _csv_text(["feature", "count", "of"],
                                           [(r["feature"], r["count"], r["of"]) for r in report.rows()])))
        summary.append((f"top{n}", report.pred_true, len(rows), failed, report.total_counterfactuals,
                        "; ".join(report.top(3))))
    outs.append(atomic_write(ws.path("explain", "summary.csv"),
                             _csv_text(["set", "pred_true", "queries", "failed", "counterfactuals", "top3"],
                                       summary)))
    ws.log("explain", timing)
    return inputs, outs


def _read_cf_sets(path: Path) -> list[CounterfactualSet]:
    return [CounterfactualSet.from_json(d) for d in _read_jsonl(path)]


def _stage_render(cfg: PipelineConfig, ws: Workspace):
    n = cfg.explain.render_set
    if n not in cfg.explain.sizes:
        raise PreconditionError(f"render_set {n} is not among the explained feature sets {cfg.explain.sizes}")
    cf_path = ws.path("explain", f"top{n}.jsonl")
    inputs = {f"explain/top{n}.jsonl": sha256_file(cf_path),
              "features/features.csv": sha256_file(ws.path("features", "features.csv")),
              "segment/fiducials.jsonl": sha256_file(ws.path("segment", "fiducials.jsonl"))}
    entries = {e.record_id: e for e in read_cohort_jsonl(ws.path("cohort.jsonl"))}
    inputs.update(_record_inputs(cfg, entries.values()))
    fm = read_feature_csv(ws.path("features", "features.csv"))
    cf_sets = _read_cf_sets(cf_path)
    combined = prepare_data(cf_sets, fm)
    seg = _load_segmented(cfg, ws)
    outs, mark_rows, leads = [], [], {}
    for rid in sorted({c.record_id for c in combined}):
        sr = _restore_segmented(cfg, entries[rid], seg[rid])
        positions = {w.beat_index: w.position for w in sr.windows}
        marks = build_markings([c for c in combined if c.record_id == rid], sr.record, sr.fiducials, positions)
        svg = render_report(sr.record, marks, cfg.layout)
        outs.append(atomic_write(ws.path("reports", f"{rid}.svg"), svg))
        leads[rid] = marked_leads(marks)
        for m in marks:
            mark_rows.append((rid, m.beat, m.lead, m.kind, m.category, m.feature, m.count, m.k,
                              "" if m.value is None else m.value))
    outs.append(atomic_write(ws.path("reports", "markings.csv"),
                             _csv_text(["record_id", "beat", "lead", "kind", "category", "feature", "count", "k",
                                        "value_mv"], mark_rows)))
    outs.append(atomic_write(ws.path("reports", "marked_leads.json"), _json_text(leads)))
    return inputs, outs


def _stage_evaluate(cfg: PipelineConfig, ws: Workspace):
    fm, train, test = _train_test(ws)
    sets = _feature_sets(cfg, ws)
    n_render = cfg.explain.render_set
    inputs = {"features/features.csv": sha256_file(ws.path("features", "features.csv")),
              "model/model.json": sha256_file(ws.path("model", "model.json")),
              f"explain/top{n_render}.jsonl": sha256_file(ws.path("explain", f"top{n_render}.jsonl")),
              "reports/marked_leads.json": sha256_file(ws.path("reports", "marked_leads.json"))}
    outs = []
    rows, preds = [], {}
    full = _load_model(ws.path("model", "model.json"))
    if len(test):
        preds["all"] = full.predict(test.X)
        rows.append(_classification_row(f"all{len(fm.names)}", test.labels, preds["all"]))
        for n in sorted(sets):
            model = _load_model(ws.path("curve", "models", f"top{n}.json"))
            preds[n] = model.predict(test.columns(sets[n]))
            rows.append(_classification_row(f"top{n}", test.labels, preds[n]))
    outs.append(atomic_write(ws.path("evaluate", "metrics.csv"), _csv_text(_CLS_HEADER, rows)))
    if len(test) and n_render in preds:
        table = mcnemar_table(test.labels, preds[n_render], preds["all"])
        outs.append(atomic_write(ws.path("evaluate", "mcnemar.csv"),
                                 _csv_text(["a", "b", *table], [(f"top{n_render}", "all", *table.values())])))

    model = _load_model(ws.path("curve", "models", f"top{n_render}.json"))
    cf_sets = _read_cf_sets(ws.path("explain", f"top{n_render}.jsonl"))
    ranges = derive_ranges(_impute(model, train.columns(sets[n_render])), sets[n_render]).as_dict()
    clinical = load_clinical_weights(cfg.paths.clinical_weights or None)
    importances = dict(zip(model.feature_names_, (float(v) for v in model.feature_importances_)))
    summary = {}
    try:
        comparison = compare_sparsity(cf_sets, clinical, importances, ranges, default_weight=0.0)
        summary["sparsity"] = {"clinical_mean": comparison.clinical[0], "clinical_std": comparison.clinical[1],
                               "model_mean": comparison.model[0], "model_std": comparison.model[1],
                               "report": comparison.summary()}
        box_rows = [(r["record"], r["scheme"], r["n"], r["min"], r["q1"], r["median"], r["q3"], r["max"])
                    for r in comparison.rows()]
    except ValueError as exc:
        summary["sparsity"] = {"error": str(exc)}
        box_rows = []
    outs.append(atomic_write(ws.path("evaluate", "sparsity.csv"),
                             _csv_text(["record", "scheme", "n", "min", "q1", "median", "q3", "max"], box_rows)))
    summary["f1"] = {r[0]: _finite(r[-1]) for r in rows}
    if cfg.paths.clinician_labels:
        labels_path = Path(cfg.paths.clinician_labels)
        if not labels_path.exists():
            raise PreconditionError(f"clinician labels {labels_path} do not exist")
        inputs[f"labels:{labels_path.name}"] = sha256_file(labels_path)
        marked = json.loads(ws.path("reports", "marked_leads.json").read_text())
        agg = aggregate_interpretability(read_clinician_labels(labels_path), marked)
        outs.append(atomic_write(ws.path("evaluate", "interpretability.json"),
                                 _json_text(_nan_to_none(agg))))
    outs.append(atomic_write(ws.path("evaluate", "summary.json"), _json_text(_nan_to_none(summary))))
    return inputs, outs


def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


_RUNNERS: dict[str, Callable] = {
    "ingest": _stage_ingest,
    "segment": _stage_segment,
    "features": _stage_features,
    "train": _stage_train,
    "rank": _stage_rank,
    "curve": _stage_curve,
    "explain": _stage_explain,
    "render": _stage_render,
    "evaluate": _stage_evaluate,
}


def _input_fingerprint(cfg: PipelineConfig, ws: Workspace, stage: str) -> dict[str, str] | None:
    """Current hashes of the inputs the last run of ``stage`` recorded, None if any vanished."""
    entry = ws.manifest()["stages"].get(stage)
    if entry is None:
        return None
    out = {}
    for name in entry["inputs"]:
        if name.startswith("manifest:"):
            p = Path(cfg.paths.manifest)
        elif name.startswith("records:"):
            p = Path(cfg.paths.records) / name.split(":", 1)[1]
        elif name.startswith("labels:"):
            p = Path(cfg.paths.clinician_labels)
        else:
            p = ws.path(*name.split("/"))
        if not p.exists():
            return None
        out[name] = sha256_file(p)
    return out


def run_stage(stage: str, cfg: PipelineConfig, workdir: str | Path | None = None, force: bool = False) -> str:
    """Run one stage; returns "ran" or "skipped"."""
    if stage not in _RUNNERS:
        raise ValueError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    ws = Workspace(workdir if workdir is not None else cfg.paths.workdir)
    ws.root.mkdir(parents=True, exist_ok=True)
    _require(ws, stage)
    config_hash = cfg.section_hash(*_CONFIG_SECTIONS[stage])
    entry = ws.manifest()["stages"].get(stage)
    if not force and entry is not None and entry["config"] == config_hash:
        current = _input_fingerprint(cfg, ws, stage)
        outputs_ok = all(ws.path(rel).exists() and sha256_file(ws.path(rel)) == h
                         for rel, h in entry["outputs"].items())
        if current == entry["inputs"] and outputs_ok:
            logger.info("stage %s up to date, skipped", stage)
            return "skipped"
    t0 = time.perf_counter()
    inputs, outputs = _RUNNERS[stage](cfg, ws)
    manifest = ws.manifest()
    manifest["stages"][stage] = {
        "config": config_hash,
        "inputs": dict(sorted(inputs.items())),
        "outputs": {ws.rel(p): sha256_file(p) for p in sorted(outputs)},
        "versions": _versions(),
    }
    # downstream results are stale now
    for later in STAGES[STAGES.index(stage) + 1:]:
        manifest["stages"].pop(later, None)
    manifest["stages"] = {s: manifest["stages"][s] for s in STAGES if s in manifest["stages"]}
    ws.save_manifest(manifest)
    ws.log("timing", [f"{stage} {time.perf_counter() - t0:.3f}s"])
    return "ran"


def run_all(cfg: PipelineConfig, workdir: str | Path | None = None, stages: Sequence[str] = STAGES,
            force: bool = False) -> dict[str, str]:
    return {s: run_stage(s, cfg, workdir, force) for s in stages}


def make_report_bundle(workdir: str | Path, out: str | Path | None = None) -> Path:
    """Copy reports, per-beat counterfactual tables and metrics into one directory."""
    ws = Workspace(workdir)
    if not ws.root.exists() or not ws.path(MANIFEST).exists():
        raise PreconditionError(f"{ws.root} holds no pipeline run")
    for stage in ("explain", "render", "evaluate"):
        if not ws.stage_done(stage):
            raise PreconditionError(f"run {stage} first (needed by bundle)")
    bundle = Path(out) if out is not None else ws.path("bundle")
    if bundle.exists():
        shutil.rmtree(bundle)
    bundle.mkdir(parents=True)
    svgs = sorted(ws.path("reports").glob("*.svg"))
    cf_files = sorted(ws.path("explain").glob("top*.jsonl"))
    per_record: dict[str, list[tuple]] = {}
    for path in cf_files:
        set_name = path.stem
        for cs in _read_cf_sets(path):
            for j in range(cs.k):
                for name, (old, new) in cs.changed(j).items():
                    per_record.setdefault(cs.record_id, []).append(
                        (set_name, cs.beat, j, name, old, new, float(cs.p_target[j])))
    for svg in svgs:
        rid = svg.stem
        d = bundle / rid
        d.mkdir()
        shutil.copyfile(svg, d / svg.name)
        rows = sorted(per_record.get(rid, []), key=lambda r: (r[0], r[1], r[2], r[3]))
        atomic_write(d / "cf_table.csv",
                     _csv_text(["set", "beat", "cf", "feature", "old", "new", "p_target"], rows))
    for src in [ws.path("evaluate", "metrics.csv"), ws.path("evaluate", "sparsity.csv"),
                ws.path("explain", "summary.csv"), *sorted(ws.path("explain").glob("alterations_*.csv"))]:
        if src.exists():
            shutil.copyfile(src, bundle / src.name)
    return bundle
