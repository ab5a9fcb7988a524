"""Synthetic 12-lead ECGs built from Gaussian waves with known fiducials.

Every beat is a sum of five Gaussians (P, Q, R, S, T) centred at fixed offsets
from the beat's R peak. Centres and widths are shared by all leads, amplitudes
are per lead. Ground-truth fiducials follow directly from the template:
peaks sit at the Gaussian centres and onsets/offsets at centre -/+ 2.5 sigma.
The QRS onset is the earliest onset among Q/R/S, the QRS offset the latest
offset.

Waves only count as present when the delineator could see them by
definition: P must be positive, Q and S negative, T non-zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .io import LEAD_NAMES, N_LEADS, CohortManifest, EcgRecord, ManifestRow, RecordHeader, SignalSpec, write_record_csv
from .signal import FIDUCIALS, MISSING, FiducialSet

WAVES = ("P", "Q", "R", "S", "T")
SIGMA_PER_FWHM = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
EDGE_SIGMAS = 2.5

# columns: P, Q, R, S, T amplitudes in mV
_DEFAULT_AMPLITUDES = {
    "I":   (0.10, -0.05, 0.80, -0.15, 0.25),
    "II":  (0.15, -0.10, 1.20, -0.25, 0.35),
    "III": (0.06, -0.06, 0.50, -0.12, 0.12),
    "aVR": (-0.12, 0.06, -0.95, 0.15, -0.28),
    "aVL": (0.05, -0.05, 0.30, -0.08, 0.08),
    "aVF": (0.10, -0.08, 0.85, -0.18, 0.22),
    "V1":  (0.08, 0.00, 0.25, -0.90, 0.10),
    "V2":  (0.09, -0.05, 0.50, -1.10, 0.40),
    "V3":  (0.09, -0.05, 0.90, -0.70, 0.45),
    "V4":  (0.10, -0.06, 1.40, -0.40, 0.40),
    "V5":  (0.10, -0.08, 1.30, -0.20, 0.30),
    "V6":  (0.09, -0.07, 1.00, -0.10, 0.25),
}


@dataclass(frozen=True)
class BeatTemplate:
    """Gaussian beat model.

    ``centers_ms`` are offsets from the R peak, ``widths_ms`` are full widths
    at half maximum, ``amplitudes`` maps lead name to the five wave amplitudes
    in mV. ``rr_ms`` is either one interval or a schedule cycled over the
    record. ``snr_db`` of None means noiseless.
    """

    centers_ms: Mapping[str, float] = field(
        default_factory=lambda: {"P": -200.0, "Q": -40.0, "R": 0.0, "S": 40.0, "T": 300.0})
    widths_ms: Mapping[str, float] = field(
        default_factory=lambda: {"P": 50.0, "Q": 20.0, "R": 25.0, "S": 20.0, "T": 90.0})
    amplitudes: Mapping[str, Sequence[float]] = field(default_factory=lambda: dict(_DEFAULT_AMPLITUDES))
    rr_ms: float | Sequence[float] = 1000.0
    snr_db: float | None = None
    lead_in_ms: float = 700.0

    def __post_init__(self):
        centers = [self.centers_ms[w] for w in WAVES]
        if any(b <= a for a, b in zip(centers, centers[1:])):
            raise ValueError("wave centres must be ordered P < Q < R < S < T")
        if any(self.widths_ms[w] <= 0 for w in WAVES):
            raise ValueError("wave widths must be positive")
        missing = set(LEAD_NAMES) - set(self.amplitudes)
        if missing:
            raise ValueError(f"amplitudes missing for leads {sorted(missing)}")

    def amplitude(self, lead: str, wave: str) -> float:
        return float(self.amplitudes[lead][WAVES.index(wave)])

    def sigma_ms(self, wave: str) -> float:
        return self.widths_ms[wave] * SIGMA_PER_FWHM

    def with_amplitude(self, lead: str, wave: str, value: float) -> "BeatTemplate":
        amps = {k: list(v) for k, v in self.amplitudes.items()}
        amps[lead][WAVES.index(wave)] = value
        return replace(self, amplitudes=amps)

    def rr_schedule(self, n_intervals: int) -> list[float]:
        if isinstance(self.rr_ms, (int, float)):
            return [float(self.rr_ms)] * n_intervals
        rr = list(self.rr_ms)
        return [float(rr[i % len(rr)]) for i in range(n_intervals)]


@dataclass
class SyntheticRecord:
    record: EcgRecord
    truth: FiducialSet
    r_times: np.ndarray        # continuous R times in samples
    template: BeatTemplate

    def wave_center(self, beat: int, wave: str) -> float:
        """Continuous centre (in samples) of one wave of one beat."""
        return float(self.r_times[beat] + self.template.centers_ms[wave] * self.record.fs / 1000.0)

    def wave_sigma(self, wave: str) -> float:
        return self.template.sigma_ms(wave) * self.record.fs / 1000.0

    def clean_value(self, lead: str, t: float | np.ndarray) -> np.ndarray | float:
        """Noise-free signal evaluated from the closed form at (fractional) sample times."""
        t = np.asarray(t, dtype=float)
        total = np.zeros_like(t)
        for b in range(len(self.r_times)):
            for wave in WAVES:
                amp = self.template.amplitude(lead, wave)
                if amp == 0:
                    continue
                c = self.wave_center(b, wave)
                s = self.wave_sigma(wave)
                total = total + amp * np.exp(-0.5 * ((t - c) / s) ** 2)
        return total if total.ndim else float(total)


def _wave_present(wave: str, amplitude: float) -> bool:
    if wave == "P":
        return amplitude > 0
    if wave in ("Q", "S"):
        return amplitude < 0
    return amplitude != 0


def synthesize(template: BeatTemplate, n_beats: int, fs: float, seed: int | None = 0,
               record_id: str = "synthetic", label: str | None = None,
               patient_id: str | None = None) -> SyntheticRecord:
    """Render ``n_beats`` beats at ``fs`` and return the record with its ground truth."""
    if n_beats < 3:
        raise ValueError("need at least 3 beats")
    narrowest = min(template.widths_ms.values()) * fs / 1000.0
    if narrowest < 2.0:
        raise ValueError(
            f"sampling rate {fs} Hz cannot resolve a {min(template.widths_ms.values())} ms wave "
            f"({narrowest:.2f} samples < 2)"
        )
    per_ms = fs / 1000.0
    rr = template.rr_schedule(n_beats - 1)
    r_ms = template.lead_in_ms + np.concatenate([[0.0], np.cumsum(rr)])
    r_times = np.round(r_ms * per_ms)
    tail = max(template.lead_in_ms, rr[-1] * 0.75)
    n_samples = int(round(r_ms[-1] * per_ms + tail * per_ms))

    t = np.arange(n_samples, dtype=float)
    signals = np.zeros((N_LEADS, n_samples))
    for li, lead in enumerate(LEAD_NAMES):
        for wave in WAVES:
            amp = template.amplitude(lead, wave)
            if amp == 0:
                continue
            sigma = template.sigma_ms(wave) * per_ms
            for r in r_times:
                c = r + template.centers_ms[wave] * per_ms
                lo = max(0, int(c - 8 * sigma))
                hi = min(n_samples, int(c + 8 * sigma) + 2)
                signals[li, lo:hi] += amp * np.exp(-0.5 * ((t[lo:hi] - c) / sigma) ** 2)

    if template.snr_db is not None:
        rng = np.random.default_rng(seed)
        rms = np.sqrt(np.mean(signals ** 2, axis=1, keepdims=True))
        noise_sd = rms * 10.0 ** (-template.snr_db / 20.0)
        signals = signals + rng.standard_normal(signals.shape) * noise_sd

    specs = tuple(SignalSpec(f"{record_id}.csv", None, 1.0, 0.0, lead) for lead in LEAD_NAMES)
    header = RecordHeader(record_id, N_LEADS, float(fs), n_samples, specs)
    record = EcgRecord(header, signals, label=label, patient_id=patient_id)
    truth = _ground_truth(template, r_times, fs, n_samples)
    return SyntheticRecord(record, truth, r_times, template)


def _ground_truth(template: BeatTemplate, r_times: np.ndarray, fs: float, n_samples: int) -> FiducialSet:
    per_ms = fs / 1000.0
    pos = {name: i for i, name in enumerate(FIDUCIALS)}
    idx = np.full((len(r_times), N_LEADS, len(FIDUCIALS)), MISSING, dtype=np.int64)

    def put(b, li, name, value):
        v = int(round(value))
        if 0 <= v < n_samples:
            idx[b, li, pos[name]] = v

    for b, r in enumerate(r_times):
        center = {w: r + template.centers_ms[w] * per_ms for w in WAVES}
        edge = {w: EDGE_SIGMAS * template.sigma_ms(w) * per_ms for w in WAVES}
        for li, lead in enumerate(LEAD_NAMES):
            present = {w: _wave_present(w, template.amplitude(lead, w)) for w in WAVES}
            put(b, li, "R_peak", r)
            if present["P"]:
                put(b, li, "P_onset", center["P"] - edge["P"])
                put(b, li, "P_peak", center["P"])
                put(b, li, "P_offset", center["P"] + edge["P"])
            if present["Q"]:
                put(b, li, "Q_peak", center["Q"])
            if present["S"]:
                put(b, li, "S_peak", center["S"])
            qrs = [w for w in ("Q", "R", "S") if template.amplitude(lead, w) != 0]
            put(b, li, "R_onset", min(center[w] - edge[w] for w in qrs))
            put(b, li, "R_offset", max(center[w] + edge[w] for w in qrs))
            if present["T"]:
                put(b, li, "T_onset", center["T"] - edge["T"])
                put(b, li, "T_peak", center["T"])
                put(b, li, "T_offset", center["T"] + edge["T"])
    return FiducialSet(r_times.astype(np.int64), idx, "II")


def truth_to_json(synthetic: SyntheticRecord) -> dict:
    fs = synthetic.record.fs
    return {
        "record_id": synthetic.record.record_id,
        "fs": fs,
        "r_peaks": [int(v) for v in synthetic.truth.r_peaks],
        "fiducials": list(synthetic.truth.iter_json(synthetic.record.record_id)),
        "template": {
            "centers_ms": dict(synthetic.template.centers_ms),
            "widths_ms": dict(synthetic.template.widths_ms),
            "amplitudes": {k: list(map(float, v)) for k, v in synthetic.template.amplitudes.items()},
        },
    }


# ---------------------------------------------------------------------------
# Two-class cohorts
# ---------------------------------------------------------------------------

# inferior-MI-like pattern: flattened/inverted T and deeper Q in II, III, aVF
DEFAULT_MI_CHANGES: dict[tuple[str, str], float] = {
    ("II", "T"): -0.15,
    ("III", "T"): -0.10,
    ("aVF", "T"): -0.12,
    ("II", "Q"): -0.25,
    ("III", "Q"): -0.20,
    ("aVF", "Q"): -0.22,
}


def cohort_template(label: str, rng: np.random.Generator, snr_db: float | None = 30.0,
                    mi_changes: Mapping[tuple[str, str], float] | None = None,
                    jitter: float = 0.1) -> BeatTemplate:
    """A per-patient template: default morphology, random amplitude/rate jitter,
    and for ``MI`` patients the amplitudes in ``mi_changes`` substituted."""
    changes = DEFAULT_MI_CHANGES if mi_changes is None else mi_changes
    amps = {}
    for lead in LEAD_NAMES:
        base = np.array(_DEFAULT_AMPLITUDES[lead], dtype=float)
        scale = rng.uniform(1 - jitter, 1 + jitter, size=len(WAVES))
        amps[lead] = base * scale
    if label == "MI":
        for (lead, wave), value in changes.items():
            amps[lead][WAVES.index(wave)] = value * rng.uniform(1 - jitter, 1 + jitter)
    mean_rr = rng.uniform(750.0, 1050.0)
    rr = [round(mean_rr * rng.uniform(0.97, 1.03) / 10.0) * 10.0 for _ in range(16)]
    return BeatTemplate(amplitudes={k: tuple(v) for k, v in amps.items()}, rr_ms=rr, snr_db=snr_db)


def make_cohort(n_per_class: int, fs: float = 100.0, seed: int = 0, n_beats: int = 10,
                snr_db: float | None = 30.0,
                mi_changes: Mapping[tuple[str, str], float] | None = None) -> list[SyntheticRecord]:
    """``n_per_class`` NORM and MI records, one per synthetic patient."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(2 * n_per_class):
        label = "NORM" if i % 2 == 0 else "MI"
        template = cohort_template(label, rng, snr_db=snr_db, mi_changes=mi_changes)
        rid = f"{i + 1:05d}"
        records.append(synthesize(template, n_beats, fs, seed=int(rng.integers(2**31)),
                                  record_id=rid, label=label, patient_id=f"p{i + 1:05d}"))
    return records


def write_cohort(records: Sequence[SyntheticRecord], directory: str | Path) -> Path:
    """Write CSV records, ground-truth JSON and a PTB-XL shaped manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "records").mkdir(parents=True, exist_ok=True)
    rows = []
    for syn in records:
        rec = syn.record
        rel = f"records/{rec.record_id}"
        write_record_csv(rec, directory / f"{rel}.csv")
        (directory / f"{rel}.truth.json").write_text(json.dumps(truth_to_json(syn), sort_keys=True))
        code = "NORM" if rec.label == "NORM" else "IMI"
        rows.append(ManifestRow(rec.record_id, rec.patient_id or rec.record_id, {code: 100.0, "SR": 0.0}, rel))
    manifest = directory / "manifest.csv"
    CohortManifest(rows).to_csv(manifest)
    return manifest
