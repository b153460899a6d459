"""Run configuration. Every field has a default; ``{}`` runs end to end on synthetic data."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .aggregation import build_plan
from .encoder import ConceptSpec
from .errors import ConfigError, GeoProtoError
from .grid import GridSpec, SynthPattern
from .model import ModelConfig


@dataclass
class SynthConfig:
    seed: int = 7
    rows: int = 32
    cols: int = 32
    intervals: int = 40
    f_t: int = 1
    f_s: int = 1
    f_st: int = 2
    pattern: str = "hotspot"
    background_rate: float = 2.0
    hotspot_multiplier: float = 5.0
    hotspot_prob: float = 0.01

    def grid_spec(self) -> GridSpec:
        return GridSpec(m=self.rows, n=self.cols, T=self.intervals,
                        f_t=self.f_t, f_s=self.f_s, f_st=self.f_st)

    def synth_pattern(self) -> SynthPattern:
        return SynthPattern(name=self.pattern, background_rate=self.background_rate,
                            hotspot_multiplier=self.hotspot_multiplier, hotspot_prob=self.hotspot_prob)


@dataclass
class SampleConfig:
    d: int = 9
    t_in: int = 1
    stride: int = 1
    balance: float | None = 1.0
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_by: str = "time"
    seed: int = 0


@dataclass
class PoolingConfig:
    mode: str = "spatial"
    near: float = 2.0
    middle: float = 3.5


@dataclass
class ExplainConfig:
    top_n: int = 10
    percentile: float = 1.0


@dataclass
class RunConfig:
    data: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    samples: SampleConfig = field(default_factory=SampleConfig)
    concept: ConceptSpec = field(default_factory=ConceptSpec)
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    def validate(self) -> "RunConfig":
        try:
            self.synth.grid_spec()
            self.synth.synth_pattern()
            build_plan(self.samples.d, self.pooling.mode, self.pooling.near, self.pooling.middle)
        except GeoProtoError as exc:
            raise ConfigError(str(exc)) from None
        s = self.samples
        if s.d < 1 or s.d % 2 == 0:
            raise ConfigError(f"samples.d must be odd, got {s.d}")
        if s.t_in < 1 or s.stride < 1:
            raise ConfigError("samples.t_in and samples.stride must be >= 1")
        if s.balance is not None and s.balance <= 0:
            raise ConfigError("samples.balance must be positive")
        if len(s.split) != 3 or abs(sum(s.split) - 1.0) > 1e-9 or min(s.split) < 0:
            raise ConfigError(f"samples.split must be 3 fractions summing to 1, got {s.split}")
        if s.split_by not in ("time", "random"):
            raise ConfigError(f"samples.split_by must be 'time' or 'random', got {s.split_by!r}")
        if any(w > s.d for w in self.concept.window_sizes):
            raise ConfigError("concept window sizes cannot exceed the sample window d")
        if not 0 < self.explain.percentile <= 100:
            raise ConfigError("explain.percentile must be in (0, 100]")
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["concept"] = self.concept.to_dict()
        out["samples"]["split"] = list(self.samples.split)
        return out

    def digest(self, *sections: str) -> str:
        """Hash of the whole config, or of the named top-level sections only."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def encoding_digest(self) -> str:
        return self.digest("data", "synth", "samples", "concept")


_SECTIONS = {
    "synth": SynthConfig,
    "samples": SampleConfig,
    "concept": ConceptSpec,
    "pooling": PoolingConfig,
    "model": ModelConfig,
    "explain": ExplainConfig,
}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    values = dict(values)
    for key in ("split", "window_sizes", "temporal_window_sizes"):
        if isinstance(values.get(key), list):
            values[key] = tuple(values[key])
    try:
        return cls(**values)
    except GeoProtoError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - set(_SECTIONS) - {"data"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    kwargs = {name: _build(cls, raw[name], name) for name, cls in _SECTIONS.items() if name in raw}
    return RunConfig(data=raw.get("data"), **kwargs).validate()


def load_config(path: str | None) -> RunConfig:
    """Load a JSON config; ``None`` or ``"default"`` gives the defaults."""
    if path in (None, "default"):
        return RunConfig().validate()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    try:
        raw = json.loads(p.read_text() or "{}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    return config_from_dict(raw)
