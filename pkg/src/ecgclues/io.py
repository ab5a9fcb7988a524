"""Reading ECG records and assembling the NORM/MI cohort.

Two record containers are supported: WFDB header/signal pairs stored in
format 16 (the PTB-XL low-rate release) and a plain CSV fallback with one
column per lead. The cohort side parses the PTB-XL style manifest, applies
the label filter and produces a balanced, patient-level train/test split.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

LEAD_NAMES: tuple[str, ...] = (
    "I", "II", "III", "aVR", "aVL", "aVF",
    "V1", "V2", "V3", "V4", "V5", "V6",
)
N_LEADS = len(LEAD_NAMES)

_LEAD_ALIASES = {name.lower(): name for name in LEAD_NAMES}


class WfdbParseError(ValueError):
    """Malformed WFDB header or signal file."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        self.line = line
        self.offset = offset
        where = ""
        if line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" (byte offset {offset})"
        super().__init__(message + where)


class CohortError(ValueError):
    """The cohort cannot be built from the given manifest and rules."""


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    storage_format: int | None
    gain: float
    baseline: float
    lead_name: str
    units: str = "mV"


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    sampling_rate: float
    n_samples: int
    signals: tuple[SignalSpec, ...] = ()

    @property
    def lead_names(self) -> list[str]:
        return [s.lead_name for s in self.signals]


@dataclass
class EcgRecord:
    """Twelve leads in millivolts, rows in ``LEAD_NAMES`` order."""

    header: RecordHeader
    signals: np.ndarray
    label: str | None = None
    patient_id: str | None = None

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=float)
        if self.signals.ndim != 2 or self.signals.shape[0] != N_LEADS:
            raise ValueError(
                f"expected {N_LEADS} leads, got signal array of shape {self.signals.shape}"
            )

    @property
    def fs(self) -> float:
        return self.header.sampling_rate

    @property
    def record_id(self) -> str:
        return self.header.record_name

    @property
    def n_samples(self) -> int:
        return self.signals.shape[1]

    def lead(self, name: str) -> np.ndarray:
        return self.signals[LEAD_NAMES.index(name)]

    def with_signals(self, signals: np.ndarray) -> "EcgRecord":
        return EcgRecord(self.header, signals, self.label, self.patient_id)


def canonical_lead(name: str) -> str:
    try:
        return _LEAD_ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown lead name {name!r}") from None


# ---------------------------------------------------------------------------
# WFDB
# ---------------------------------------------------------------------------

_GAIN_RE = re.compile(
    r"^(?P<gain>[-+0-9.eE]+)(?:\((?P<baseline>[-+0-9]+)\))?(?:/(?P<units>\S+))?$"
)


def parse_wfdb_header(text: str) -> RecordHeader:
    """Parse the text of a WFDB ``.hea`` file (single-segment records only).

    Lead names come from the last token of each signal line. Raises
    :class:`WfdbParseError` naming the offending line.
    """
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped and not stripped.startswith("#"):
            lines.append((lineno, stripped))
    if not lines:
        raise WfdbParseError("empty header")

    lineno, record_line = lines[0]
    tokens = record_line.split()
    if len(tokens) < 4:
        raise WfdbParseError(
            "record line must contain name, signal count, sampling rate and sample count",
            line=lineno,
        )
    record_name = tokens[0].split("/")[0]
    try:
        n_signals = int(tokens[1])
    except ValueError:
        raise WfdbParseError(f"bad signal count {tokens[1]!r}", line=lineno) from None
    try:
        # "fs/counter_freq(base_counter)" is legal; only fs matters here
        fs = float(tokens[2].split("/")[0])
    except ValueError:
        raise WfdbParseError(f"bad sampling rate {tokens[2]!r}", line=lineno) from None
    if not fs > 0:
        raise WfdbParseError(f"sampling rate must be positive, got {fs}", line=lineno)
    try:
        n_samples = int(tokens[3])
    except ValueError:
        raise WfdbParseError(f"bad sample count {tokens[3]!r}", line=lineno) from None
    if n_samples < 0:
        raise WfdbParseError("negative sample count", line=lineno)

    signal_lines = lines[1:]
    if len(signal_lines) != n_signals:
        where = signal_lines[-1][0] if signal_lines else lineno
        raise WfdbParseError(
            f"header declares {n_signals} signals but has {len(signal_lines)} signal lines",
            line=where,
        )

    specs = []
    for lineno, line in signal_lines:
        parts = line.split()
        if len(parts) < 3:
            raise WfdbParseError("signal line needs at least file, format and gain", line=lineno)
        file_name = parts[0]
        fmt_token = parts[1].split("x")[0].split(":")[0].split("+")[0]
        try:
            storage_format = int(fmt_token)
        except ValueError:
            raise WfdbParseError(f"bad storage format {parts[1]!r}", line=lineno) from None
        match = _GAIN_RE.match(parts[2])
        if match is None:
            raise WfdbParseError(f"unparseable gain {parts[2]!r}", line=lineno)
        try:
            gain = float(match.group("gain"))
        except ValueError:
            raise WfdbParseError(f"unparseable gain {parts[2]!r}", line=lineno) from None
        if gain == 0:
            gain = 200.0  # WFDB convention: zero gain means the default of 200
        if gain < 0:
            raise WfdbParseError(f"gain must be positive, got {gain}", line=lineno)
        if match.group("baseline") is not None:
            baseline = float(match.group("baseline"))
        elif len(parts) > 4:
            baseline = float(parts[4])  # adc zero
        else:
            baseline = 0.0
        units = match.group("units") or "mV"
        lead_name = parts[-1] if len(parts) > 3 else file_name
        specs.append(SignalSpec(file_name, storage_format, gain, baseline, lead_name, units))

    return RecordHeader(record_name, n_signals, fs, n_samples, tuple(specs))


def decode_signal_format16(
    data: bytes,
    gain: float | Sequence[float],
    baseline: float | Sequence[float] = 0.0,
    n_signals: int | None = None,
) -> np.ndarray:
    """Decode multiplexed little-endian 16-bit samples to millivolts.

    Returns an array of shape ``(n_signals, n_frames)``.
    """
    gain = np.atleast_1d(np.asarray(gain, dtype=float))
    baseline = np.atleast_1d(np.asarray(baseline, dtype=float))
    if n_signals is None:
        n_signals = max(len(gain), len(baseline))
    gain = np.broadcast_to(gain, (n_signals,))
    baseline = np.broadcast_to(baseline, (n_signals,))

    frame_bytes = 2 * n_signals
    n_frames, remainder = divmod(len(data), frame_bytes)
    if remainder:
        raise WfdbParseError("truncated final frame", offset=n_frames * frame_bytes)
    raw = np.frombuffer(data, dtype="<i2").reshape(n_frames, n_signals).T
    return (raw.astype(float) - baseline[:, None]) / gain[:, None]


def encode_signal_format16(
    millivolts: np.ndarray, gain: float | Sequence[float], baseline: float | Sequence[float] = 0.0
) -> bytes:
    """Inverse of :func:`decode_signal_format16` (values are rounded to ADC units)."""
    mv = np.atleast_2d(np.asarray(millivolts, dtype=float))
    n_signals = mv.shape[0]
    gain = np.broadcast_to(np.asarray(gain, dtype=float), (n_signals,))
    baseline = np.broadcast_to(np.asarray(baseline, dtype=float), (n_signals,))
    raw = np.rint(mv * gain[:, None] + baseline[:, None])
    if raw.min(initial=0) < -32768 or raw.max(initial=0) > 32767:
        raise ValueError("values do not fit in 16-bit ADC range")
    return raw.T.astype("<i2").tobytes()


def _to_canonical_order(signals: np.ndarray, lead_names: Sequence[str]) -> np.ndarray:
    canon = [canonical_lead(n) for n in lead_names]
    if sorted(canon) != sorted(LEAD_NAMES):
        raise ValueError(f"expected the 12 standard leads, got {list(lead_names)}")
    order = [canon.index(name) for name in LEAD_NAMES]
    return signals[order]


def read_wfdb_record(path: str | Path, label: str | None = None, patient_id: str | None = None) -> EcgRecord:
    """Read ``<path>.hea`` and its format-16 ``.dat`` file."""
    path = Path(path)
    if path.suffix in (".hea", ".dat"):
        path = path.with_suffix("")
    header = parse_wfdb_header(path.with_suffix(".hea").read_text())
    if header.n_signals != N_LEADS:
        raise WfdbParseError(f"expected {N_LEADS} signals, header has {header.n_signals}")
    formats = {s.storage_format for s in header.signals}
    if formats != {16}:
        raise WfdbParseError(f"unsupported format {sorted(formats)}; only format 16 is read")
    files = {s.file_name for s in header.signals}
    if len(files) != 1:
        raise WfdbParseError("signals spread over several files are not supported")
    data = (path.parent / files.pop()).read_bytes()
    mv = decode_signal_format16(
        data,
        [s.gain for s in header.signals],
        [s.baseline for s in header.signals],
        n_signals=header.n_signals,
    )
    if header.n_samples and mv.shape[1] != header.n_samples:
        raise WfdbParseError(
            f"signal file holds {mv.shape[1]} samples, header declares {header.n_samples}"
        )
    signals = _to_canonical_order(mv, header.lead_names)
    specs = sorted(header.signals, key=lambda s: LEAD_NAMES.index(canonical_lead(s.lead_name)))
    header = RecordHeader(header.record_name, header.n_signals, header.sampling_rate,
                          mv.shape[1], tuple(specs))
    return EcgRecord(header, signals, label=label, patient_id=patient_id)


def write_wfdb_record(record: EcgRecord, directory: str | Path, gain: float = 1000.0) -> Path:
    """Write a record as a format-16 header/signal pair; returns the header path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = record.record_id
    dat_name = f"{name}.dat"
    (directory / dat_name).write_bytes(encode_signal_format16(record.signals, gain, 0))
    lines = [f"{name} {N_LEADS} {_fmt_number(record.fs)} {record.n_samples}"]
    for lead in LEAD_NAMES:
        lines.append(f"{dat_name} 16 {_fmt_number(gain)}(0)/mV 16 0 0 0 0 {lead}")
    hea = directory / f"{name}.hea"
    hea.write_text("\n".join(lines) + "\n")
    return hea


def _fmt_number(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


# ---------------------------------------------------------------------------
# CSV fallback
# ---------------------------------------------------------------------------

def read_sidecar(path: str | Path) -> dict[str, str]:
    """Read a ``key = value`` sidecar file; blank lines and ``#`` comments are skipped."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith(("#", ";", "[")):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, sep, value = line.partition(":")
        if not sep:
            raise ValueError(f"{path}: cannot parse line {raw!r}")
        out[key.strip()] = value.strip()
    return out


def sidecar_path(csv_path: str | Path) -> Path:
    return Path(csv_path).with_suffix(".meta")


def load_record_csv(
    path: str | Path,
    fs: float | None = None,
    label: str | None = None,
    patient_id: str | None = None,
) -> EcgRecord:
    """Load a CSV record: a header row of 12 lead names, then one row per sample (mV).

    The sampling rate comes from ``fs`` or, failing that, from the ``<stem>.meta``
    sidecar next to the file.
    """
    path = Path(path)
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = read_sidecar(side)
    if fs is None:
        if "fs" not in meta:
            raise ValueError(f"{path}: no sampling rate given and no 'fs' in {side.name}")
        fs = float(meta["fs"])
    if not fs > 0:
        raise ValueError(f"sampling rate must be positive, got {fs}")

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            columns = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(columns) != N_LEADS:
            raise ValueError(f"{path}: expected 12 leads, found {len(columns)} columns")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != N_LEADS:
                raise ValueError(f"{path}:{lineno}: expected 12 leads, found {len(row)} values")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric cell in {row!r}") from None
    values = np.array(rows, dtype=float).reshape(-1, N_LEADS).T
    signals = _to_canonical_order(values, columns)
    name = meta.get("record_id", path.stem)
    specs = tuple(SignalSpec(path.name, None, 1.0, 0.0, lead) for lead in LEAD_NAMES)
    header = RecordHeader(name, N_LEADS, float(fs), signals.shape[1], specs)
    return EcgRecord(
        header,
        signals,
        label=label if label is not None else meta.get("label"),
        patient_id=patient_id if patient_id is not None else meta.get("patient_id"),
    )


def write_record_csv(record: EcgRecord, path: str | Path) -> Path:
    """Write a record as CSV (``repr`` floats, so re-reading is exact) plus its sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LEAD_NAMES)
        for frame in record.signals.T:
            writer.writerow([repr(float(v)) for v in frame])
    meta = {"record_id": record.record_id, "fs": _fmt_number(record.fs)}
    if record.patient_id is not None:
        meta["patient_id"] = record.patient_id
    if record.label is not None:
        meta["label"] = record.label
    sidecar_path(path).write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))
    return path


def load_record(path: str | Path, fs: float | None = None, **kwargs) -> EcgRecord:
    """Dispatch on what exists on disk: WFDB pair first, then CSV."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".hea", ".dat", ".csv") else path
    if base.with_suffix(".hea").exists():
        return read_wfdb_record(base, **kwargs)
    if base.with_suffix(".csv").exists():
        return load_record_csv(base.with_suffix(".csv"), fs=fs, **kwargs)
    raise FileNotFoundError(f"no .hea or .csv record at {base}")


# ---------------------------------------------------------------------------
# Cohort manifest, filtering and split
# ---------------------------------------------------------------------------

_SCP_PAIR_RE = re.compile(r"""['"]?([A-Za-z0-9_+\-]+)['"]?\s*:\s*([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?\d+)?)""")


def parse_scp_codes(text: str) -> dict[str, float]:
    """Scan ``{'NORM': 100.0, 'SR': 0.0}``-style text into a code -> likelihood map."""
    codes = {}
    for code, value in _SCP_PAIR_RE.findall(text or ""):
        likelihood = float(value)
        if not 0.0 <= likelihood <= 100.0:
            raise ValueError(f"likelihood for {code} outside [0, 100]: {likelihood}")
        codes[code] = likelihood
    return codes


@dataclass(frozen=True)
class ManifestRow:
    record_id: str
    patient_id: str
    scp_codes: Mapping[str, float]
    path: str = ""


@dataclass
class CohortManifest:
    rows: list[ManifestRow] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    @classmethod
    def from_csv(cls, path: str | Path) -> "CohortManifest":
        """Read a ``ptbxl_database.csv``-shaped file.

        Columns used: ``ecg_id`` (or ``record_id``), ``patient_id``,
        ``scp_codes`` and ``filename_lr`` (or ``path``).
        """
        rows = []
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                record_id = row.get("ecg_id") or row.get("record_id")
                if record_id is None:
                    raise ValueError(f"{path}: needs an 'ecg_id' or 'record_id' column")
                rows.append(
                    ManifestRow(
                        record_id=_clean_id(record_id),
                        patient_id=_clean_id(row.get("patient_id", record_id)),
                        scp_codes=parse_scp_codes(row.get("scp_codes", "")),
                        path=row.get("filename_lr") or row.get("path") or "",
                    )
                )
        return cls(rows)

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["ecg_id", "patient_id", "scp_codes", "filename_lr"])
            for row in self.rows:
                codes = "{" + ", ".join(f"'{k}': {float(v)!r}" for k, v in row.scp_codes.items()) + "}"
                writer.writerow([row.record_id, row.patient_id, codes, row.path])


def _clean_id(value: str) -> str:
    value = str(value).strip()
    try:
        number = float(value)
    except ValueError:
        return value
    return str(int(number)) if number.is_integer() else value


def _load_rule_lists() -> dict[str, list[str]]:
    text = resources.files("ecgclues").joinpath("data/cohort_rules.txt").read_text()
    lists: dict[str, list[str]] = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        lists[key.strip()] = [v.strip() for v in value.split(",") if v.strip()]
    return lists


@dataclass(frozen=True)
class FilterRules:
    """Label policy for the NORM vs. MI cohort.

    ``mi_priority`` lists the accepted MI codes, most specific first; a record
    carrying several of them resolves to the first one listed.
    """

    norm_codes: tuple[str, ...]
    mi_priority: tuple[str, ...]
    exclude_codes: tuple[str, ...]
    required_likelihood: float = 100.0

    @classmethod
    def default(cls) -> "FilterRules":
        lists = _load_rule_lists()
        return cls(
            norm_codes=tuple(lists["norm"]),
            mi_priority=tuple(lists["mi_priority"]),
            exclude_codes=tuple(lists["sttc"] + lists["injury"] + lists["posterior"]),
        )


@dataclass(frozen=True)
class CohortEntry:
    record_id: str
    patient_id: str
    label: str
    subtype: str
    path: str = ""
    split: str | None = None

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "patient_id": self.patient_id,
            "label": self.label,
            "subtype": self.subtype,
            "split": self.split,
            "path": self.path,
        }


def resolve_label(codes: Mapping[str, float], rules: FilterRules) -> tuple[str, str] | None:
    """Return ``(label, subtype)`` for one record or None when it is excluded."""
    if any(code in rules.exclude_codes for code in codes):
        return None
    certain = {c for c, v in codes.items() if v >= rules.required_likelihood}
    mi = [c for c in rules.mi_priority if c in certain]
    norm = [c for c in rules.norm_codes if c in certain]
    if mi and norm:
        return None
    if mi:
        return "MI", mi[0]
    if norm:
        return "NORM", norm[0]
    return None


def filter_cohort(manifest: CohortManifest | Iterable[ManifestRow], rules: FilterRules | None = None) -> list[CohortEntry]:
    """Keep records with exactly one certain NORM or MI label under ``rules``."""
    rules = rules or FilterRules.default()
    rows = manifest.rows if isinstance(manifest, CohortManifest) else list(manifest)
    cohort = []
    for row in rows:
        if isinstance(row, CohortEntry):
            # already filtered: re-derive from the resolved label
            resolved = resolve_label({row.subtype: rules.required_likelihood}, rules)
            if resolved is not None:
                cohort.append(row)
            continue
        resolved = resolve_label(row.scp_codes, rules)
        if resolved is None:
            continue
        label, subtype = resolved
        cohort.append(CohortEntry(row.record_id, row.patient_id, label, subtype, row.path))
    if not cohort:
        raise CohortError("cohort empty after filtering")
    return cohort


def _record_sort_key(record_id: str):
    return (0, int(record_id), "") if record_id.isdigit() else (1, 0, record_id)


def one_record_per_patient(cohort: Sequence[CohortEntry]) -> list[CohortEntry]:
    """Pick each patient's first MI record, or first NORM record if they have no MI."""
    by_patient: dict[str, list[CohortEntry]] = {}
    for entry in cohort:
        by_patient.setdefault(entry.patient_id, []).append(entry)
    chosen = []
    for entries in by_patient.values():
        entries = sorted(entries, key=lambda e: _record_sort_key(e.record_id))
        mi = [e for e in entries if e.label == "MI"]
        chosen.append(mi[0] if mi else entries[0])
    return sorted(chosen, key=lambda e: _record_sort_key(e.record_id))


def balanced_split(
    cohort: Sequence[CohortEntry], seed: int, test_fraction: float = 0.2
) -> dict[str, list[CohortEntry]]:
    """Undersample to equal class sizes, then split each class 80/20 by patient."""
    patients = one_record_per_patient(cohort)
    classes = {label: [e for e in patients if e.label == label] for label in ("NORM", "MI")}
    for label, members in classes.items():
        if not members:
            raise CohortError(f"no {label} patients in cohort")
    n = min(len(m) for m in classes.values())
    n_test = int(math.floor(test_fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    out: dict[str, list[CohortEntry]] = {"train": [], "test": []}
    for label in ("NORM", "MI"):
        members = classes[label]
        picked = rng.choice(len(members), size=n, replace=False)
        rng.shuffle(picked)
        for rank, idx in enumerate(picked):
            split = "test" if rank < n_test else "train"
            e = members[idx]
            out[split].append(CohortEntry(e.record_id, e.patient_id, e.label, e.subtype, e.path, split))
    for split in out:
        out[split].sort(key=lambda e: _record_sort_key(e.record_id))
    return out


def write_cohort_jsonl(split: Mapping[str, Sequence[CohortEntry]], path: str | Path) -> None:
    entries = [e for part in ("train", "test") for e in split.get(part, [])]
    entries.sort(key=lambda e: _record_sort_key(e.record_id))
    with Path(path).open("w") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def read_cohort_jsonl(path: str | Path) -> list[CohortEntry]:
    entries = []
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                entries.append(CohortEntry(d["record_id"], d["patient_id"], d["label"],
                                           d.get("subtype", d["label"]), d.get("path", ""),
                                           d.get("split")))
    return entries
