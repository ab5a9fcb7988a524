"""Pipeline configuration: an INI-style file with one section per stage.

Every key has a default, so an empty file is a valid configuration.
``PipelineConfig.dump()`` prints the full set of effective values.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .report import ReportLayout
from .signal import DelineationConfig


def _parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


@dataclass(frozen=True)
class PathsSection:
    records: str = ""
    manifest: str = ""
    workdir: str = "work"
    clinical_weights: str = ""      # empty: the packaged clinical table
    clinician_labels: str = ""      # optional CSV of clinician report labels


@dataclass(frozen=True)
class RunSection:
    seed: int = 42
    workers: int = 1
    fs: float = 100.0               # sampling rate of CSV records lacking a sidecar
    test_fraction: float = 0.2


@dataclass(frozen=True)
class TrainSection:
    n_estimators: int = 300
    max_depth: int = 4
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    subsample: float = 0.8
    min_child_weight: float = 1.0
    gamma: float = 0.0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must be in (0, 1]")


@dataclass(frozen=True)
class RankSection:
    keep: int = 97
    step: int = 1
    tolerance: float = 0.02


@dataclass(frozen=True)
class ExplainSection:
    feature_sets: tuple[str, ...] = ("5", "10", "15", "20")
    render_set: int = 20
    extra_features: tuple[str, ...] = ()    # always varied and drawn, e.g. clinician-requested leads
    query_class: str = "MI"                  # explain correctly classified beats of this class
    max_queries: int = 50                    # per feature set; 0 means all
    k: int = 3
    population_size: int = 120
    max_generations: int = 200
    margin: float = 0.05
    proximity_weight: float = 0.5
    diversity_weight: float = 0.1
    patience: int = 10
    min_separation: float = 0.1
    posthoc_sparsity: bool = True

    @property
    def sizes(self) -> list[int]:
        return [int(s) for s in self.feature_sets]


_SECTIONS = {
    "paths": PathsSection,
    "run": RunSection,
    "delineation": DelineationConfig,
    "train": TrainSection,
    "rank": RankSection,
    "explain": ExplainSection,
    "layout": ReportLayout,
}


def _coerce(cls, key: str, raw: str) -> Any:
    default = next(f.default for f in fields(cls) if f.name == key)
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return _parse_list(raw)
    return raw.strip()


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    run: RunSection = field(default_factory=RunSection)
    delineation: DelineationConfig = field(default_factory=DelineationConfig)
    train: TrainSection = field(default_factory=TrainSection)
    rank: RankSection = field(default_factory=RankSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    layout: ReportLayout = field(default_factory=ReportLayout)

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                           inline_comment_prefixes=None)
        parser.optionxform = str
        parser.read_string(text)
        sections = {}
        for name in parser.sections():
            if name not in _SECTIONS:
                raise ValueError(f"unknown config section [{name}]")
            section_cls = _SECTIONS[name]
            known = {f.name for f in fields(section_cls)}
            values = {}
            for key, raw in parser.items(name):
                if key not in known:
                    raise ValueError(f"unknown key {key!r} in [{name}]")
                values[key] = _coerce(section_cls, key, raw)
            sections[name] = section_cls(**values)
        return cls(**sections)

    @classmethod
    def from_file(cls, path: str | Path | None) -> "PipelineConfig":
        if path is None:
            return cls()
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, section: str, **values) -> "PipelineConfig":
        current = getattr(self, section)
        merged = {**{f.name: getattr(current, f.name) for f in fields(current)}, **values}
        return PipelineConfig(**{**self._sections(), section: type(current)(**merged)})

    def _sections(self) -> dict:
        return {name: getattr(self, name) for name in _SECTIONS}

    def dump(self) -> str:
        out = []
        for name in _SECTIONS:
            section = getattr(self, name)
            out.append(f"[{name}]\n")
            for f in fields(section):
                out.append(f"{f.name} = {_format(getattr(section, f.name))}\n")
            out.append("\n")
        return "".join(out)

    def section_hash(self, *names: str) -> str:
        """Digest of the named sections plus the seed; paths are excluded on purpose."""
        h = hashlib.sha256()
        h.update(f"seed={self.run.seed}\n".encode())
        for name in names:
            section = getattr(self, name)
            h.update(f"[{name}]\n".encode())
            for key, value in sorted(asdict(section).items()):
                h.update(f"{key}={_format(value)}\n".encode())
        return h.hexdigest()
