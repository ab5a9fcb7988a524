"""Denoising, R-peak detection and per-lead P/QRS/T delineation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import median_filter, uniform_filter1d
from scipy.signal import butter, find_peaks, sosfiltfilt

from .io import LEAD_NAMES, N_LEADS, EcgRecord, read_sidecar

logger = logging.getLogger(__name__)

# Physiological order; a delineated beat has its present indices strictly
# increasing in this order.
FIDUCIALS: tuple[str, ...] = (
    "P_onset", "P_peak", "P_offset",
    "R_onset", "Q_peak", "R_peak", "S_peak", "R_offset",
    "T_onset", "T_peak", "T_offset",
)
_FID = {name: i for i, name in enumerate(FIDUCIALS)}
_R = _FID["R_peak"]
MISSING = -1


class NoBeatsError(ValueError):
    pass


@dataclass(frozen=True)
class DelineationConfig:
    """Window lengths (milliseconds) and thresholds used by the delineator."""

    band_low_hz: float = 0.5
    band_high_hz: float = 40.0
    filter_order: int = 4
    baseline_window_ms: float = 600.0
    integration_window_ms: float = 150.0
    refractory_ms: float = 200.0
    refine_ms: float = 50.0
    q_window_ms: float = 80.0
    s_window_ms: float = 80.0
    qrs_bound_ms: float = 120.0
    p_window_start_ms: float = 300.0
    p_window_end_ms: float = 100.0
    t_window_start_ms: float = 120.0
    t_window_end_ms: float = 450.0
    t_window_rr_fraction: float = 0.7
    edge_fraction: float = 0.05
    min_wave_mv: float = 0.02

    @classmethod
    def from_mapping(cls, values: dict) -> "DelineationConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise ValueError(f"unknown delineation parameter {key!r}")
            kwargs[key] = int(value) if key == "filter_order" else float(value)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "DelineationConfig":
        return cls.from_mapping(read_sidecar(path))

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


DEFAULT_CONFIG = DelineationConfig()


def _n(ms: float, fs: float) -> int:
    return int(round(ms * fs / 1000.0))


# ---------------------------------------------------------------------------
# Denoising
# ---------------------------------------------------------------------------

def denoise_signal(x: np.ndarray, fs: float, config: DelineationConfig = DEFAULT_CONFIG) -> np.ndarray:
    if fs < 2 * config.band_high_hz + 1:
        raise ValueError(
            f"sampling rate {fs} Hz is too low for a {config.band_high_hz} Hz band edge"
        )
    sos = butter(config.filter_order, [config.band_low_hz, config.band_high_hz],
                 btype="bandpass", fs=fs, output="sos")
    x = np.asarray(x, dtype=float)
    y = sosfiltfilt(sos, x, axis=-1)
    width = max(1, _n(config.baseline_window_ms, fs)) | 1
    size = (1,) * (y.ndim - 1) + (width,)
    return y - median_filter(y, size=size, mode="nearest")


def denoise(record: EcgRecord, config: DelineationConfig = DEFAULT_CONFIG) -> EcgRecord:
    """Zero-phase band-pass plus moving-median baseline removal on every lead."""
    return record.with_signals(denoise_signal(record.signals, record.fs, config))


# ---------------------------------------------------------------------------
# R peaks
# ---------------------------------------------------------------------------

def _derivative(x: np.ndarray) -> np.ndarray:
    # five-point centered derivative, no group delay
    p = np.pad(x, 2, mode="edge")
    return (-p[:-4] - 2 * p[1:-3] + 2 * p[3:-1] + p[4:]) / 8.0


def detect_r_peaks(signal: np.ndarray, fs: float, config: DelineationConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Pan-Tompkins style QRS detection on one lead.

    derivative -> square -> moving-window integration -> adaptive threshold
    with a refractory period and search-back; each detection is then moved to
    the largest absolute deflection within ``refine_ms``.
    """
    x = np.asarray(signal, dtype=float)
    x = x - np.median(x)
    integrated = uniform_filter1d(_derivative(x) ** 2, max(1, _n(config.integration_window_ms, fs)),
                                  mode="constant")
    if not np.any(integrated > 0):
        raise NoBeatsError("no beats detected")

    refractory = max(1, _n(config.refractory_ms, fs))
    candidates, _ = find_peaks(integrated, distance=refractory)
    if len(candidates) == 0:
        raise NoBeatsError("no beats detected")

    learn = integrated[: max(1, int(2 * fs))]
    spk = learn.max() / 3.0
    npk = learn.mean() / 2.0
    thr = npk + 0.25 * (spk - npk)
    accepted: list[int] = []
    skipped: list[int] = []
    rr: list[int] = []
    for c in candidates:
        value = integrated[c]
        if value > thr:
            if accepted and rr:
                mean_rr = np.mean(rr[-8:])
                gap = c - accepted[-1]
                if gap > 1.66 * mean_rr:
                    # search back for a missed beat at half the threshold
                    between = [s for s in skipped if accepted[-1] + refractory <= s <= c - refractory]
                    if between:
                        best = max(between, key=lambda s: integrated[s])
                        if integrated[best] > thr / 2:
                            rr.append(best - accepted[-1])
                            accepted.append(best)
                            spk = 0.25 * integrated[best] + 0.75 * spk
            if accepted:
                rr.append(c - accepted[-1])
            accepted.append(c)
            spk = 0.125 * value + 0.875 * spk
        else:
            skipped.append(c)
            npk = 0.125 * value + 0.875 * npk
        thr = npk + 0.25 * (spk - npk)

    if not accepted:
        raise NoBeatsError("no beats detected")

    half = max(0, _n(config.refine_ms, fs))
    refined = []
    for c in accepted:
        lo, hi = max(0, c - half), min(len(x), c + half + 1)
        refined.append(lo + int(np.argmax(np.abs(x[lo:hi]))))

    peaks: list[int] = []
    for p in sorted(refined):
        if peaks and p - peaks[-1] < refractory:
            if abs(x[p]) > abs(x[peaks[-1]]):
                peaks[-1] = p
            continue
        peaks.append(p)
    return np.asarray(peaks, dtype=np.int64)


def detect_record_r_peaks(record: EcgRecord, config: DelineationConfig = DEFAULT_CONFIG,
                          reference: str = "II") -> tuple[np.ndarray, str]:
    """R peaks on the reference lead, falling back to the highest-RMS lead."""
    try:
        return detect_r_peaks(record.lead(reference), record.fs, config), reference
    except NoBeatsError:
        rms = np.sqrt(np.mean(record.signals ** 2, axis=1))
        fallback = LEAD_NAMES[int(np.argmax(rms))]
        if fallback == reference:
            raise
        logger.info("%s: no beats on lead %s, using %s", record.record_id, reference, fallback)
        return detect_r_peaks(record.lead(fallback), record.fs, config), fallback


# ---------------------------------------------------------------------------
# Delineation
# ---------------------------------------------------------------------------

@dataclass
class FiducialSet:
    """Fiducial sample indices for every detected beat and lead.

    ``indices`` has shape ``(n_beats, 12, len(FIDUCIALS))``; undetected points
    hold ``MISSING``. Beat ``i`` is anchored at ``r_peaks[i]``.
    """

    r_peaks: np.ndarray
    indices: np.ndarray
    reference_lead: str = "II"

    @property
    def n_beats(self) -> int:
        return len(self.r_peaks)

    def get(self, beat: int, lead: str | int, name: str) -> int | None:
        li = lead if isinstance(lead, int) else LEAD_NAMES.index(lead)
        v = int(self.indices[beat, li, _FID[name]])
        return None if v == MISSING else v

    def beat_lead(self, beat: int, lead: str | int) -> dict[str, int | None]:
        li = lead if isinstance(lead, int) else LEAD_NAMES.index(lead)
        return {name: (None if v == MISSING else int(v))
                for name, v in zip(FIDUCIALS, self.indices[beat, li])}

    def reference(self, beat: int) -> dict[str, int | None]:
        return self.beat_lead(beat, self.reference_lead)

    def iter_json(self, record_id: str, beats: Iterable[int] | None = None):
        beats = range(self.n_beats) if beats is None else beats
        for b in beats:
            for lead in LEAD_NAMES:
                yield {"record": record_id, "beat": int(b), "lead": lead,
                       "r_peak": int(self.r_peaks[b]), **self.beat_lead(b, lead)}

    @classmethod
    def from_json_rows(cls, rows: Sequence[dict], reference_lead: str = "II") -> "FiducialSet":
        beats = sorted({int(r["beat"]) for r in rows})
        pos = {b: i for i, b in enumerate(beats)}
        r_peaks = np.zeros(len(beats), dtype=np.int64)
        idx = np.full((len(beats), N_LEADS, len(FIDUCIALS)), MISSING, dtype=np.int64)
        for r in rows:
            i = pos[int(r["beat"])]
            r_peaks[i] = int(r["r_peak"])
            li = LEAD_NAMES.index(r["lead"])
            for name in FIDUCIALS:
                if r.get(name) is not None:
                    idx[i, li, _FID[name]] = int(r[name])
        return cls(r_peaks, idx, reference_lead)


def _wave_edge(x: np.ndarray, start: int, stop: int, step: int, base: float, frac: float) -> int | None:
    """Walk from a wave's peak until it returns near the baseline or stops shrinking.

    Returns the first index whose deviation from ``base`` is at most ``frac`` of
    the peak deviation, or the index of the first local minimum of that
    deviation. None when ``stop`` is reached first.
    """
    height = abs(x[start] - base)
    if height == 0:
        return None
    prev = height
    i = start + step
    while (i >= stop) if step < 0 else (i <= stop):
        if i < 0 or i >= len(x):
            return None
        dev = abs(x[i] - base)
        if dev <= frac * height:
            return i
        if dev > prev:
            return i - step
        prev = dev
        i += step
    return None


def _is_extremum(x: np.ndarray, i: int, sign: float) -> bool:
    if i <= 0 or i >= len(x) - 1:
        return False
    v = sign * x[i]
    return v >= sign * x[i - 1] and v >= sign * x[i + 1] and (v > sign * x[i - 1] or v > sign * x[i + 1])


def _tangent_intercept(x: np.ndarray, peak: int, edge: int, base: float) -> int | None:
    """Tangent at the steepest point between ``edge`` and ``peak``, intersected with ``base``."""
    lo, hi = sorted((edge, peak))
    if hi - lo < 1:
        return None
    grad = np.gradient(x)
    seg = grad[lo:hi + 1]
    m = lo + int(np.argmax(np.abs(seg)))
    slope = grad[m]
    if slope == 0:
        return None
    t0 = m - (x[m] - base) / slope
    if not np.isfinite(t0):
        return None
    t0 = int(round(t0))
    # the intercept must fall on the outer side of the steepest point
    if (edge < peak and t0 > m) or (edge > peak and t0 < m):
        return None
    return t0


def _delineate_lead(x: np.ndarray, r: int, lo: int, hi: int, rr_next: int | None,
                    fs: float, cfg: DelineationConfig) -> np.ndarray:
    out = np.full(len(FIDUCIALS), MISSING, dtype=np.int64)
    out[_R] = r
    n = len(x)
    base = float(np.median(x[lo:hi])) if hi > lo else 0.0
    frac = cfg.edge_fraction
    min_amp = cfg.min_wave_mv

    def window(a: int, b: int) -> tuple[int, int]:
        return max(0, a), min(n - 1, b)

    # Q: minimum before R
    a, b = window(r - _n(cfg.q_window_ms, fs), r - 1)
    if b >= a:
        q = a + int(np.argmin(x[a:b + 1]))
        if q > a and x[q] < x[r] and _is_extremum(x, q, -1.0) and base - x[q] >= min_amp:
            out[_FID["Q_peak"]] = q
    # S: minimum after R
    a, b = window(r + 1, r + _n(cfg.s_window_ms, fs))
    if b >= a:
        s = a + int(np.argmin(x[a:b + 1]))
        if s < b and x[s] < x[r] and _is_extremum(x, s, -1.0) and base - x[s] >= min_amp:
            out[_FID["S_peak"]] = s

    bound = _n(cfg.qrs_bound_ms, fs)
    q = out[_FID["Q_peak"]]
    s = out[_FID["S_peak"]]
    left_anchor = q if q != MISSING else r
    right_anchor = s if s != MISSING else r
    onset = _wave_edge(x, left_anchor, max(0, r - bound), -1, base, frac)
    offset = _wave_edge(x, right_anchor, min(n - 1, r + bound), +1, base, frac)
    if onset is not None:
        out[_FID["R_onset"]] = onset
    if offset is not None:
        out[_FID["R_offset"]] = offset
    qrs_on = onset if onset is not None else left_anchor
    qrs_off = offset if offset is not None else right_anchor

    # P: positive deflection before the QRS
    a, b = window(max(lo, r - _n(cfg.p_window_start_ms, fs)), min(qrs_on - 1, r - _n(cfg.p_window_end_ms, fs)))
    if b > a:
        p = a + int(np.argmax(x[a:b + 1]))
        if a < p < b and _is_extremum(x, p, 1.0) and x[p] - base >= min_amp:
            out[_FID["P_peak"]] = p
            p_on = _wave_edge(x, p, max(0, lo, p - _n(cfg.p_window_start_ms, fs)), -1, base, frac)
            p_off = _wave_edge(x, p, qrs_on - 1, +1, base, frac)
            if p_on is not None:
                out[_FID["P_onset"]] = p_on
            if p_off is not None:
                out[_FID["P_offset"]] = p_off

    # T: largest deflection (either polarity) after the QRS
    t_end = _n(cfg.t_window_end_ms, fs)
    if rr_next is not None:
        t_end = min(t_end, int(cfg.t_window_rr_fraction * rr_next))
    a, b = window(max(qrs_off + 1, r + _n(cfg.t_window_start_ms, fs)), r + t_end)
    if b > a:
        seg = x[a:b + 1] - base
        t = a + int(np.argmax(np.abs(seg)))
        sign = 1.0 if x[t] >= base else -1.0
        if a < t < b and _is_extremum(x, t, sign) and abs(x[t] - base) >= min_amp:
            out[_FID["T_peak"]] = t
            left_edge = _wave_edge(x, t, qrs_off + 1, -1, base, frac)
            right_limit = min(n - 1, r + (rr_next if rr_next is not None else 2 * t_end))
            right_edge = _wave_edge(x, t, right_limit, +1, base, frac)
            if left_edge is None:
                left_edge = qrs_off + 1
            if right_edge is None:
                right_edge = right_limit
            t_on = _tangent_intercept(x, t, left_edge, base)
            t_off = _tangent_intercept(x, t, right_edge, base)
            if t_on is not None and 0 <= t_on < n:
                out[_FID["T_onset"]] = t_on
            if t_off is not None and 0 <= t_off < n:
                out[_FID["T_offset"]] = t_off

    return _enforce_order(out)


def _enforce_order(fid: np.ndarray) -> np.ndarray:
    """Drop points that break the strict ordering, working outward from R."""
    out = fid.copy()
    last = out[_R]
    for i in range(_R - 1, -1, -1):
        if out[i] == MISSING:
            continue
        if out[i] < last:
            last = out[i]
        else:
            out[i] = MISSING
    last = out[_R]
    for i in range(_R + 1, len(out)):
        if out[i] == MISSING:
            continue
        if out[i] > last:
            last = out[i]
        else:
            out[i] = MISSING
    return out


def beat_bounds(r_peaks: np.ndarray, n_samples: int) -> list[tuple[int, int]]:
    """Midpoint-to-midpoint ``[start, end)`` bounds for every R peak."""
    r = np.asarray(r_peaks, dtype=np.int64)
    if len(r) < 2:
        return [(0, n_samples)] * len(r)
    bounds = []
    for i, peak in enumerate(r):
        if i > 0:
            start = (r[i - 1] + peak) // 2
        else:
            start = max(0, peak - (r[1] - peak) // 2)
        if i + 1 < len(r):
            end = (peak + r[i + 1]) // 2
        else:
            end = min(n_samples, peak + (peak - r[i - 1]) // 2)
        bounds.append((int(start), int(end)))
    return bounds


def delineate(record: EcgRecord, r_peaks: Sequence[int], config: DelineationConfig = DEFAULT_CONFIG,
              reference_lead: str = "II") -> FiducialSet:
    """Delineate every lead around the shared R peaks."""
    r = np.asarray(r_peaks, dtype=np.int64)
    if len(r) < 3:
        raise ValueError("record too short after exclusion: need at least 3 R peaks")
    fs = record.fs
    bounds = beat_bounds(r, record.n_samples)
    idx = np.full((len(r), N_LEADS, len(FIDUCIALS)), MISSING, dtype=np.int64)
    for b, peak in enumerate(r):
        lo, hi = bounds[b]
        rr_next = int(r[b + 1] - peak) if b + 1 < len(r) else None
        for li in range(N_LEADS):
            idx[b, li] = _delineate_lead(record.signals[li], int(peak), lo, hi, rr_next, fs, config)
    return FiducialSet(r, idx, reference_lead)


@dataclass(frozen=True)
class BeatWindow:
    beat_index: int       # ordinal among retained beats
    position: int         # index into the record's R-peak list
    r_peak_global: int
    start: int
    end: int


def segment_beats(fiducials: FiducialSet | None, r_peaks: Sequence[int]) -> list[BeatWindow]:
    """One window per R peak except the first and the last."""
    r = np.asarray(r_peaks if r_peaks is not None else fiducials.r_peaks, dtype=np.int64)
    if len(r) < 3:
        raise ValueError("record too short after exclusion: need at least 3 R peaks")
    windows = []
    for pos in range(1, len(r) - 1):
        start = int((r[pos - 1] + r[pos]) // 2)
        end = int((r[pos] + r[pos + 1]) // 2)
        windows.append(BeatWindow(pos - 1, pos, int(r[pos]), start, end))
    return windows


@dataclass
class SegmentedRecord:
    """A record after denoising, R detection and delineation."""

    record: EcgRecord
    fiducials: FiducialSet
    windows: list[BeatWindow]


def process_record(record: EcgRecord, config: DelineationConfig = DEFAULT_CONFIG,
                   apply_denoise: bool = True) -> SegmentedRecord:
    clean = denoise(record, config) if apply_denoise else record
    r_peaks, reference = detect_record_r_peaks(clean, config)
    fiducials = delineate(clean, r_peaks, config, reference_lead=reference)
    return SegmentedRecord(clean, fiducials, segment_beats(fiducials, r_peaks))


def fiducials_to_jsonl(items: Iterable[tuple[str, FiducialSet, Sequence[BeatWindow]]], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for record_id, fid, windows in items:
            for w in windows:
                for row in fid.iter_json(record_id, [w.position]):
                    row["beat"] = w.beat_index
                    row["position"] = w.position
                    fh.write(json.dumps(row) + "\n")


def with_config(config: DelineationConfig, **changes) -> DelineationConfig:
    return replace(config, **changes)
