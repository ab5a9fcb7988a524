"""Counterfactual clues drawn onto a 12-lead ECG report.

Changed features are decompressed into per-beat markings (which lead, which
waveform, which beat) and rendered as a deterministic SVG document. A feature
changed by more of a beat's counterfactuals gets a heavier, more opaque mark.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .features import FeatureMatrix, decode_feature_name
from .io import LEAD_NAMES, EcgRecord
from .signal import FiducialSet

logger = logging.getLogger(__name__)

PX_PER_MM = 96.0 / 25.4


class ProvenanceError(ValueError):
    pass


@dataclass(frozen=True)
class ChangedFeature:
    record_id: str
    beat: int
    feature: str
    count: int        # counterfactuals of this beat that changed the feature
    k: int            # counterfactuals generated for this beat

    @property
    def frequency(self) -> float:
        return self.count / self.k


def prepare_data(cf_sets: Iterable, feature_matrix: FeatureMatrix | None = None,
                 provenance: Sequence[tuple[str, int]] | None = None, atol: float = 1e-9) -> list[ChangedFeature]:
    """Per (beat, feature) tally of how many counterfactuals changed the feature.

    Every set must refer to a beat listed in ``provenance`` (taken from the
    feature matrix when not given). With a matrix, the set's original values
    must also agree with the matrix row wherever the row is defined.
    """
    if provenance is None and feature_matrix is not None:
        provenance = feature_matrix.provenance
    row_of = None
    if provenance is not None:
        row_of = {(str(r), int(b)): i for i, (r, b) in enumerate(provenance)}
    out = []
    for cs in cf_sets:
        key = (str(cs.record_id), int(cs.beat))
        if row_of is not None:
            if key not in row_of:
                raise ProvenanceError(f"counterfactual set for {key[0]} beat {key[1]} has no matching feature row")
            if feature_matrix is not None:
                row = feature_matrix.X[row_of[key]]
                cols = [feature_matrix.names.index(n) for n in cs.feature_names]
                ref = row[cols]
                ok = np.isnan(ref) | np.isclose(ref, cs.original, rtol=0.0, atol=atol)
                if not ok.all():
                    bad = [n for n, good in zip(cs.feature_names, ok) if not good]
                    raise ProvenanceError(f"original values of {key[0]} beat {key[1]} disagree with the matrix: {bad}")
        cfs = np.atleast_2d(cs.counterfactuals)
        k = len(cfs)
        if k == 0:
            continue
        changed = (cfs != np.asarray(cs.original)[None, :]).sum(axis=0)
        for name, c in zip(cs.feature_names, changed):
            if c:
                out.append(ChangedFeature(key[0], key[1], name, int(c), k))
    out.sort(key=lambda r: (r.record_id, r.beat, r.feature))
    return out


# ---------------------------------------------------------------------------
# Markings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Marking:
    lead: str
    beat: int
    kind: str             # waveform kind: R, ST, ST_mean, ...
    category: str         # peak, pair or segment
    anchors: tuple[int, ...]
    count: int
    k: int
    feature: str
    value: float | None = None

    @property
    def emphasis(self) -> float:
        return emphasis(self.count, self.k)


def emphasis(count: int, k: int) -> float:
    """Selection frequency normalised by k, in (0, 1]."""
    if k <= 0 or not 0 < count <= k:
        raise ValueError(f"frequency {count}/{k} outside (0, 1]")
    return count / k


def stroke_width(weight: float) -> float:
    """Pixels at 96 dpi."""
    return 1.0 + 2.0 * weight


def stroke_opacity(weight: float) -> float:
    return 0.4 + 0.6 * weight


def build_markings(combined: Sequence[ChangedFeature], record: EcgRecord, fiducials: FiducialSet,
                   positions: Mapping[int, int] | None = None) -> list[Marking]:
    """Decode changed features of one record into markings.

    ``positions`` maps a retained beat index to its position in the R-peak
    list; by default beat ``b`` sits at position ``b + 1`` (the first R peak
    is never a retained beat). Temporal features are not drawn; markings whose
    anchors were not delineated are dropped and logged.
    """
    out = []
    for row in combined:
        if row.record_id != record.record_id:
            continue
        decoded = decode_feature_name(row.feature)
        if not decoded.renderable:
            continue
        pos = positions[row.beat] if positions is not None else row.beat + 1
        if not 0 <= pos < fiducials.n_beats:
            logger.info("%s beat %d: no fiducials, %s not marked", record.record_id, row.beat, row.feature)
            continue
        anchors = tuple(fiducials.get(pos, decoded.lead, a) for a in decoded.anchors)
        if any(a is None for a in anchors):
            logger.info("%s beat %d: %s lacks fiducials, not marked", record.record_id, row.beat, row.feature)
            continue
        if decoded.category == "segment" and anchors[1] <= anchors[0]:
            logger.info("%s beat %d: empty ST segment, %s not marked", record.record_id, row.beat, row.feature)
            continue
        value = None
        if decoded.category == "pair":
            x = record.lead(decoded.lead)
            value = float(x[anchors[0]] - x[anchors[1]])
        out.append(Marking(decoded.lead, row.beat, decoded.kind, decoded.category, anchors,
                           row.count, row.k, row.feature, value))
    out.sort(key=lambda m: (LEAD_NAMES.index(m.lead), m.beat, m.feature))
    return out


def marked_leads(markings: Iterable[Marking]) -> list[str]:
    leads = {m.lead for m in markings}
    return [l for l in LEAD_NAMES if l in leads]


# ---------------------------------------------------------------------------
# Layout and rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportLayout:
    rows: int = 12
    cols: int = 1
    mm_per_mv: float = 10.0
    mm_per_s: float = 25.0
    lead_height_mv: float = 3.0
    label_mm: float = 12.0
    margin_mm: float = 5.0
    legend_mm: float = 60.0
    grid: bool = True
    trace_color: str = "#000000"
    marking_color: str = "#d62728"
    band_color: str = "#1f77b4"
    grid_minor_color: str = "#fbe3e3"
    grid_major_color: str = "#f2a7a7"
    font_size_px: float = 10.0

    def __post_init__(self):
        if self.mm_per_mv <= 0 or self.mm_per_s <= 0 or self.lead_height_mv <= 0:
            raise ValueError("layout scales must be positive")
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < len(LEAD_NAMES):
            raise ValueError(f"a {self.rows}x{self.cols} grid cannot hold {len(LEAD_NAMES)} leads")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "ReportLayout":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValueError(f"unknown layout key {key!r}")
            default = getattr(cls, key)
            if isinstance(default, bool):
                kw[key] = str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kw[key] = int(raw)
            elif isinstance(default, float):
                kw[key] = float(raw)
            else:
                kw[key] = str(raw).strip()
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "ReportLayout":
        values = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line[0] in "#;[":
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        return cls.from_mapping(values)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _f(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _grid_path(x0: float, y0: float, w: float, h: float, step_mm: float) -> str:
    step = step_mm * PX_PER_MM
    parts = []
    n = int(round(w / step))
    for i in range(n + 1):
        x = x0 + i * step
        parts.append(f"M{_f(x)} {_f(y0)}V{_f(y0 + h)}")
    n = int(round(h / step))
    for i in range(n + 1):
        y = y0 + i * step
        parts.append(f"M{_f(x0)} {_f(y)}H{_f(x0 + w)}")
    return "".join(parts)


def render_report(record: EcgRecord, markings: Sequence[Marking], layout: ReportLayout | None = None,
                  title: str | None = None) -> str:
    """The report as an SVG string. Identical inputs give identical bytes."""
    layout = layout or ReportLayout()
    fs = record.fs
    n = record.n_samples
    cell_samples = int(np.ceil(n / layout.cols))
    cell_w = cell_samples / fs * layout.mm_per_s * PX_PER_MM
    cell_h = layout.lead_height_mv * layout.mm_per_mv * PX_PER_MM
    margin = layout.margin_mm * PX_PER_MM
    label_w = layout.label_mm * PX_PER_MM
    top = margin + layout.font_size_px * 1.6
    plot_x0 = margin + label_w
    plot_w = cell_w * layout.cols
    plot_h = cell_h * layout.rows
    legend_w = layout.legend_mm * PX_PER_MM
    width = plot_x0 + plot_w + margin + legend_w
    height = top + plot_h + margin

    px_per_sample = layout.mm_per_s * PX_PER_MM / fs
    px_per_mv = layout.mm_per_mv * PX_PER_MM

    def cell_of(li: int) -> tuple[int, int]:
        return li % layout.rows, li // layout.rows

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>\n',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
        f'viewBox="0 0 {_f(width)} {_f(height)}" font-family="sans-serif" font-size="{_f(layout.font_size_px)}">\n',
        f'<rect x="0" y="0" width="{_f(width)}" height="{_f(height)}" fill="#ffffff"/>\n',
    ]
    heading = title if title is not None else record.record_id
    out.append(f'<text x="{_f(margin)}" y="{_f(margin + layout.font_size_px)}">{escape(str(heading))}</text>\n')
    if layout.grid:
        out.append('<g id="grid" fill="none">\n')
        out.append(f'<path d="{_grid_path(plot_x0, top, plot_w, plot_h, 1.0)}" '
                   f'stroke="{layout.grid_minor_color}" stroke-width="0.5"/>\n')
        out.append(f'<path d="{_grid_path(plot_x0, top, plot_w, plot_h, 5.0)}" '
                   f'stroke="{layout.grid_major_color}" stroke-width="0.8"/>\n')
        out.append('</g>\n')

    by_lead: dict[str, list[Marking]] = {}
    for m in markings:
        by_lead.setdefault(m.lead, []).append(m)

    for li, lead in enumerate(LEAD_NAMES):
        row, col = cell_of(li)
        s0 = col * cell_samples
        s1 = min(n, s0 + cell_samples)
        x0 = plot_x0 + col * cell_w
        y_mid = top + row * cell_h + cell_h / 2.0

        def xy(i: int, v: float) -> tuple[float, float]:
            return x0 + (i - s0) * px_per_sample, y_mid - v * px_per_mv

        x = record.signals[li]
        out.append(f'<g id="lead-{lead}" class="lead">\n')
        out.append(f'<text x="{_f(x0 - label_w + 2)}" y="{_f(y_mid - cell_h / 4)}">{escape(lead)}</text>\n')
        pts = " ".join(f"{_f(px)},{_f(py)}" for px, py in (xy(i, float(x[i])) for i in range(s0, s1)))
        out.append(f'<polyline fill="none" stroke="{layout.trace_color}" stroke-width="1.00" '
                   f'stroke-linejoin="round" points="{pts}"/>\n')
        own = [m for m in by_lead.get(lead, ()) if all(s0 <= a < s1 for a in m.anchors)]
        if own:
            out.append('<g class="markings">\n')
            for m in own:
                out.append(_marking_svg(m, x, xy, layout, cell_h, y_mid))
            out.append('</g>\n')
        out.append('</g>\n')

    out.append(_legend_svg(markings, plot_x0 + plot_w + margin, top, layout))
    out.append('</svg>\n')
    return "".join(out)


def _marking_svg(m: Marking, x: np.ndarray, xy, layout: ReportLayout, cell_h: float, y_mid: float) -> str:
    w = m.emphasis
    sw = _f(stroke_width(w))
    op = _f(stroke_opacity(w))
    color = layout.marking_color
    label = quoteattr(f"{m.feature} beat {m.beat} {m.count}/{m.k}")
    if m.category == "peak":
        cx, cy = xy(m.anchors[0], float(x[m.anchors[0]]))
        r = 3.0 + 2.0 * w
        return (f'<circle data-feature={label} cx="{_f(cx)}" cy="{_f(cy)}" r="{_f(r)}" fill="none" '
                f'stroke="{color}" stroke-width="{sw}" stroke-opacity="{op}"/>\n')
    if m.category == "pair":
        (ax, ay), (bx, by) = (xy(a, float(x[a])) for a in m.anchors)
        tx, ty = (ax + bx) / 2.0 + 3.0, min(ay, by) - 3.0
        return (f'<g data-feature={label}>'
                f'<line x1="{_f(ax)}" y1="{_f(ay)}" x2="{_f(bx)}" y2="{_f(by)}" stroke="{color}" '
                f'stroke-width="{sw}" stroke-opacity="{op}" stroke-dasharray="4 2"/>'
                f'<text x="{_f(tx)}" y="{_f(ty)}" fill="{color}" fill-opacity="{op}">'
                f'{escape(m.kind)} {m.value:.2f} mV</text></g>\n')
    a, b = m.anchors
    (ax, _), (bx, _) = xy(a, 0.0), xy(b, 0.0)
    return (f'<rect data-feature={label} x="{_f(ax)}" y="{_f(y_mid - cell_h / 2)}" width="{_f(bx - ax)}" '
            f'height="{_f(cell_h)}" fill="{layout.band_color}" fill-opacity="{_f(0.1 + 0.3 * w)}" '
            f'stroke="{layout.band_color}" stroke-width="{sw}" stroke-opacity="{op}"/>\n')


def _legend_svg(markings: Sequence[Marking], x: float, y: float, layout: ReportLayout) -> str:
    if not markings:
        return ""
    totals: dict[str, list[int]] = {}
    for m in markings:
        t = totals.setdefault(m.feature, [0, 0])
        t[0] += m.count
        t[1] += m.k
    order = sorted(totals.items(), key=lambda kv: (-kv[1][0] / kv[1][1], kv[0]))
    line = layout.font_size_px * 1.4
    out = [f'<g id="legend">\n<text x="{_f(x)}" y="{_f(y + layout.font_size_px)}" font-weight="bold">'
           f'Counterfactual clues</text>\n']
    for i, (name, (c, k)) in enumerate(order, start=1):
        out.append(f'<text x="{_f(x)}" y="{_f(y + layout.font_size_px + i * line)}">'
                   f'{escape(name)}: {c}/{k}</text>\n')
    out.append('</g>\n')
    return "".join(out)


def write_report(svg: str, directory: str | Path, record_id: str) -> Path:
    path = Path(directory) / f"{record_id}.svg"
    path.write_text(svg, encoding="utf-8")
    return path


def with_layout(layout: ReportLayout, **changes) -> ReportLayout:
    return replace(layout, **changes)
