"""Beat-level feature vectors: 14 temporal values plus 15 amplitudes per lead.

Column order is fixed: the temporal block first, then for each lead in
``LEAD_NAMES`` order its 15 amplitude features. Amplitude columns are named
``<lead>_<kind>`` (``V3_ST``), temporal ones carry no lead prefix (``QTc``).
Undetected fiducials propagate as NaN.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .io import LEAD_NAMES, EcgRecord
from .signal import DEFAULT_CONFIG, DelineationConfig, FiducialSet, SegmentedRecord, process_record

TEMPORAL_FEATURES: tuple[str, ...] = (
    "RR_Prev", "RR_Next", "RR_Rate", "PR_int", "PR_seg", "QRS", "P_Wave",
    "T_Wave", "T_left", "QT", "QTc", "ST", "PT", "PS",
)
AMPLITUDE_KINDS: tuple[str, ...] = (
    "R", "P", "Q", "S", "T", "PQ", "QR", "RS", "ST", "PS", "PT", "QS", "QT",
    "ST_mean", "ST_std",
)
PEAK_KINDS = ("P", "Q", "R", "S", "T")
PAIR_KINDS: dict[str, tuple[str, str]] = {
    "PQ": ("P", "Q"), "QR": ("Q", "R"), "RS": ("R", "S"), "ST": ("S", "T"),
    "PS": ("P", "S"), "PT": ("P", "T"), "QS": ("Q", "S"), "QT": ("Q", "T"),
}
SEGMENT_KINDS = ("ST_mean", "ST_std")

FEATURE_NAMES: tuple[str, ...] = TEMPORAL_FEATURES + tuple(
    f"{lead}_{kind}" for lead in LEAD_NAMES for kind in AMPLITUDE_KINDS
)
N_FEATURES = len(FEATURE_NAMES)
FEATURE_INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}

_PEAK_FIDUCIAL = {"P": "P_peak", "Q": "Q_peak", "R": "R_peak", "S": "S_peak", "T": "T_peak"}


class UnknownFeatureError(KeyError):
    pass


@dataclass(frozen=True)
class FeatureName:
    scope: str              # "temporal" or "lead"
    kind: str
    lead: str | None = None

    @property
    def category(self) -> str:
        if self.scope == "temporal":
            return "temporal"
        if self.kind in PEAK_KINDS:
            return "peak"
        if self.kind in PAIR_KINDS:
            return "pair"
        return "segment"

    @property
    def renderable(self) -> bool:
        return self.scope == "lead"

    @property
    def anchors(self) -> tuple[str, ...]:
        """Fiducials a marking of this feature is drawn at."""
        if self.category == "peak":
            return (_PEAK_FIDUCIAL[self.kind],)
        if self.category == "pair":
            a, b = PAIR_KINDS[self.kind]
            return (_PEAK_FIDUCIAL[a], _PEAK_FIDUCIAL[b])
        if self.category == "segment":
            return ("R_offset", "T_onset")
        return ()

    def encode(self) -> str:
        return self.kind if self.scope == "temporal" else f"{self.lead}_{self.kind}"


def decode_feature_name(name: str) -> FeatureName:
    """Split a registry name into lead and waveform kind."""
    if name not in FEATURE_INDEX:
        raise UnknownFeatureError(f"unknown feature {name!r}")
    if name in TEMPORAL_FEATURES:
        return FeatureName("temporal", name)
    lead, _, kind = name.partition("_")
    return FeatureName("lead", kind, lead)


def encode_feature_name(decoded: FeatureName) -> str:
    name = decoded.encode()
    if name not in FEATURE_INDEX:
        raise UnknownFeatureError(f"{decoded} does not name a registered feature")
    return name


# ---------------------------------------------------------------------------
# Per-beat extraction
# ---------------------------------------------------------------------------

def _span(a: int | None, b: int | None, fs: float) -> float:
    if a is None or b is None:
        return np.nan
    return (b - a) / fs


def extract_temporal(fid: dict[str, int | None], r_prev: int, r_peak: int, r_next: int, fs: float) -> np.ndarray:
    """The 14 temporal features of one beat, in seconds (RR_Rate is a ratio).

    The QRS offset stands in for the S offset.
    """
    rr_prev = (r_peak - r_prev) / fs
    rr_next = (r_next - r_peak) / fs
    qt = _span(fid["R_onset"], fid["T_offset"], fs)
    return np.array([
        rr_prev,
        rr_next,
        rr_next / rr_prev,
        _span(fid["P_onset"], fid["R_onset"], fs),
        _span(fid["P_offset"], fid["R_onset"], fs),
        _span(fid["R_onset"], fid["R_offset"], fs),
        _span(fid["P_onset"], fid["P_offset"], fs),
        _span(fid["T_onset"], fid["T_offset"], fs),
        _span(fid["T_onset"], fid["T_peak"], fs),
        qt,
        qt / np.sqrt(rr_prev),
        _span(fid["R_offset"], fid["T_onset"], fs),
        _span(fid["P_onset"], fid["T_offset"], fs),
        _span(fid["P_onset"], fid["R_offset"], fs),
    ])


def extract_amplitudes(x: np.ndarray, fid: dict[str, int | None]) -> np.ndarray:
    """The 15 amplitude features (mV) of one beat on one lead."""
    amp = {w: (float(x[fid[f]]) if fid[f] is not None else np.nan) for w, f in _PEAK_FIDUCIAL.items()}
    out = [amp[w] for w in ("R", "P", "Q", "S", "T")]
    for kind in ("PQ", "QR", "RS", "ST", "PS", "PT", "QS", "QT"):
        a, b = PAIR_KINDS[kind]
        out.append(amp[a] - amp[b])
    lo, hi = fid["R_offset"], fid["T_onset"]
    if lo is not None and hi is not None and hi > lo:
        seg = np.asarray(x[lo:hi], dtype=float)
        out.extend([float(seg.mean()), float(seg.std())])
    else:
        out.extend([np.nan, np.nan])
    return np.array(out)


def beat_vector(record: EcgRecord, fiducials: FiducialSet, position: int) -> np.ndarray:
    """All 194 features for the beat at ``position`` in the R-peak list."""
    r = fiducials.r_peaks
    if position <= 0 or position >= len(r) - 1:
        raise ValueError("beat needs a previous and a next R peak")
    temporal = extract_temporal(fiducials.reference(position), int(r[position - 1]),
                                int(r[position]), int(r[position + 1]), record.fs)
    parts = [temporal]
    for li in range(len(LEAD_NAMES)):
        parts.append(extract_amplitudes(record.signals[li], fiducials.beat_lead(position, li)))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Matrix assembly and persistence
# ---------------------------------------------------------------------------

@dataclass
class FeatureMatrix:
    X: np.ndarray
    labels: np.ndarray                     # 1 = MI, 0 = NORM
    provenance: list[tuple[str, int]]      # (record_id, beat_index)
    names: tuple[str, ...] = FEATURE_NAMES
    fs: float | None = None
    splits: list[str] = field(default_factory=list)

    def __len__(self):
        return self.X.shape[0]

    def subset(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return FeatureMatrix(
            self.X[rows], self.labels[rows], [self.provenance[i] for i in rows], self.names, self.fs,
            [self.splits[i] for i in rows] if self.splits else [],
        )

    def columns(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.names.index(n) for n in names]
        return self.X[:, idx]

    def split(self, name: str) -> "FeatureMatrix":
        return self.subset([s == name for s in self.splits])


def label_to_int(label: str | None) -> int:
    if label == "MI":
        return 1
    if label == "NORM":
        return 0
    raise ValueError(f"label must be NORM or MI, got {label!r}")


def build_feature_matrix(items: Iterable[SegmentedRecord], splits: Sequence[str] | None = None) -> FeatureMatrix:
    """One row per retained beat, rows in input order then beat order."""
    rows, labels, prov, split_col = [], [], [], []
    fs = None
    items = list(items)
    for k, seg in enumerate(items):
        rec = seg.record
        fs = rec.fs if fs is None else fs
        for w in seg.windows:
            rows.append(beat_vector(rec, seg.fiducials, w.position))
            labels.append(label_to_int(rec.label) if rec.label is not None else -1)
            prov.append((rec.record_id, w.beat_index))
            if splits is not None:
                split_col.append(splits[k])
    X = np.vstack(rows) if rows else np.empty((0, N_FEATURES))
    return FeatureMatrix(X, np.asarray(labels, dtype=int), prov, FEATURE_NAMES, fs, split_col)


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_feature_csv(fm: FeatureMatrix, path: str | Path, imputation_means: np.ndarray | None = None) -> None:
    """CSV of the matrix with provenance columns, plus a ``.json`` sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["record_id", "beat", "label", "split", *fm.names])
        for i in range(len(fm)):
            rid, beat = fm.provenance[i]
            split = fm.splits[i] if fm.splits else ""
            writer.writerow([rid, beat, int(fm.labels[i]), split, *(_fmt(v) for v in fm.X[i])])
    sidecar = {
        "columns": list(fm.names),
        "fs": fm.fs,
        "imputation_means": None if imputation_means is None else [_json_float(v) for v in imputation_means],
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n")


def _json_float(v):
    return None if np.isnan(v) else float(v)


def read_feature_csv(path: str | Path) -> FeatureMatrix:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text()) if path.with_suffix(".json").exists() else {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = tuple(header[4:])
        if sidecar.get("columns") and tuple(sidecar["columns"]) != names:
            raise ValueError(f"{path}: column names disagree with sidecar")
        rows, labels, prov, splits = [], [], [], []
        for row in reader:
            prov.append((row[0], int(row[1])))
            labels.append(int(row[2]))
            splits.append(row[3])
            rows.append([float(v) if v != "" else np.nan for v in row[4:]])
    X = np.array(rows, dtype=float).reshape(-1, len(names))
    return FeatureMatrix(X, np.array(labels, dtype=int), prov, names, sidecar.get("fs"),
                         splits if any(splits) else [])


class BeatFeatureExtractor(TransformerMixin, BaseEstimator):
    """Records in, one 194-wide feature row per retained beat out.

    ``transform`` also sets ``provenance_`` to the (record_id, beat_index)
    of every output row.
    """

    def __init__(self, delineation: DelineationConfig = DEFAULT_CONFIG, denoise: bool = True):
        self.delineation = delineation
        self.denoise = denoise

    def fit(self, records, y=None):
        self.n_features_out_ = N_FEATURES
        return self

    def transform(self, records):
        segmented = [process_record(r, self.delineation, apply_denoise=self.denoise) for r in records]
        fm = build_feature_matrix(segmented)
        self.provenance_ = fm.provenance
        return fm.X

    def get_feature_names_out(self, input_features=None):
        return np.asarray(FEATURE_NAMES, dtype=object)
