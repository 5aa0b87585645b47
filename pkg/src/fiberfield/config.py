"""Experiment configuration: nested dataclasses read from TOML.

Unknown keys and wrongly typed values raise :class:`ConfigError` carrying the
dotted path of the offending field (``training.alpha_e``).
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .errors import ConfigError, InvalidArgument
from .trainer import TrainingConfig


@dataclass
class DomainConfig:
    kind: str = "grid"  # grid | mesh | cylinder | hemisphere | icosphere
    n: int = 35
    path: str = ""
    subdivisions: int = 3


@dataclass
class BasisConfig:
    kind: str = "auto"  # auto | planar | vector_heat
    source_vertex: int = -1  # -1: vertex of largest incident area
    source_vector: list[float] = field(default_factory=list)
    diffusion_time: float = 0.0  # 0: squared mean edge length


@dataclass
class TruthConfig:
    kind: str = "piecewise"  # piecewise | constant | file | none
    a: float = 1.0
    e1: float = 0.36
    e2: float = 0.16
    path: str = ""  # VTK with point data a, e1, e2 (kind = "file")


@dataclass
class SourceConfig:
    kind: str = "lhs"  # lhs | farthest | explicit
    count: int = 5
    start_vertex: int = 0
    vertices: list[int] = field(default_factory=list)
    hold_out: int = -1  # -1: drawn automatically


@dataclass
class SamplingConfig:
    total: int = 245
    maps: int = 3
    kind: str = "auto"  # auto | lhs | area
    shared: bool = False
    noise_ms: float = 0.0
    time_unit_ms: float = 1.0  # milliseconds per solver time unit
    fim_source_radius: float = 0.0


@dataclass
class EvaluateConfig:
    band_width_h: float = 2.0  # excluded band around the fiber discontinuity, in edge lengths
    unseen: bool = True


@dataclass
class SweepConfig:
    maps: list[int] = field(default_factory=lambda: [1, 3, 5])
    alpha_e: list[float] = field(default_factory=list)
    noise_ms: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    baseline: bool = False
    workers: int = 1


@dataclass
class ExperimentConfig:
    experiment: str = "experiment"
    seed: int = 0
    output: str = "runs"
    domain: DomainConfig = field(default_factory=DomainConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    truth: TruthConfig = field(default_factory=TruthConfig)
    sources: SourceConfig = field(default_factory=SourceConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> "ExperimentConfig":
        _choice("domain.kind", self.domain.kind, ("grid", "mesh", "cylinder", "hemisphere", "icosphere"))
        if self.domain.kind == "grid" and self.domain.n < 2:
            raise ConfigError("domain.n", "must be >= 2")
        if self.domain.kind == "mesh" and not self.domain.path:
            raise ConfigError("domain.path", "required when kind = 'mesh'")
        _choice("basis.kind", self.basis.kind, ("auto", "planar", "vector_heat"))
        if self.basis.source_vector and len(self.basis.source_vector) != 3:
            raise ConfigError("basis.source_vector", "must have 3 components")
        _choice("truth.kind", self.truth.kind, ("piecewise", "constant", "file", "none"))
        if self.truth.kind == "constant":
            if not -1 <= self.truth.a <= 1:
                raise ConfigError("truth.a", "must lie in [-1, 1]")
            for k in ("e1", "e2"):
                if not 0 < getattr(self.truth, k) <= self.training.cap:
                    raise ConfigError(f"truth.{k}", f"must lie in (0, {self.training.cap}]")
        if self.truth.kind == "file" and not self.truth.path:
            raise ConfigError("truth.path", "required when kind = 'file'")
        _choice("sources.kind", self.sources.kind, ("lhs", "farthest", "explicit"))
        n_src = len(self.sources.vertices) if self.sources.kind == "explicit" else self.sources.count
        if n_src < 1:
            raise ConfigError("sources.count", "at least one source is required")
        s = self.sampling
        _choice("sampling.kind", s.kind, ("auto", "lhs", "area"))
        if s.maps < 1:
            raise ConfigError("sampling.maps", "must be >= 1")
        if s.maps > n_src:
            raise ConfigError("sampling.maps", f"{s.maps} maps need at least as many sources ({n_src})")
        if s.total < s.maps:
            raise ConfigError("sampling.total", "must be >= sampling.maps")
        if s.noise_ms < 0:
            raise ConfigError("sampling.noise_ms", "must be >= 0")
        if s.time_unit_ms <= 0:
            raise ConfigError("sampling.time_unit_ms", "must be > 0")
        for name in ("maps", "seeds"):
            if not getattr(self.sweep, name):
                raise ConfigError(f"sweep.{name}", "must not be empty")
        if any(m > n_src for m in self.sweep.maps):
            raise ConfigError("sweep.maps", "map counts cannot exceed the number of sources")
        try:
            TrainingConfig(**dataclasses.asdict(self.training))
        except InvalidArgument as exc:
            raise ConfigError("training", str(exc)) from None
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["training"] = self.training.to_dict()
        if d["training"]["t_max"] is None:
            del d["training"]["t_max"]
        return d

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


def _choice(path, value, options):
    if value not in options:
        raise ConfigError(path, f"expected one of {', '.join(options)}, got {value!r}")


def _coerce(path: str, tp, value):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _coerce(path, args[0], value)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected a table")
        return from_dict(tp, value, path)
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(path, "expected an array")
        (inner, *_) = typing.get_args(tp) or (object,)
        out = [_coerce(f"{path}[{i}]", inner, v) for i, v in enumerate(value)]
        return tuple(out) if origin is tuple else out
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {k: _coerce(f"{path}.{k}" if path else k, hints[k], v) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except InvalidArgument as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


PRESETS = {"2d": TrainingConfig.preset_2d, "3d": TrainingConfig.preset_3d}


def parse_config(data: dict) -> ExperimentConfig:
    """Build a validated config; ``training.preset`` ("2d"/"3d") supplies
    defaults that explicit training keys override."""
    data = dict(data)
    tr = dict(data.get("training", {}))
    preset = tr.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("training.preset", f"expected one of {', '.join(PRESETS)}")
        base = PRESETS[preset]().to_dict()
        base.pop("t_max")
        tr = {**base, **tr}
    data["training"] = tr
    return from_dict(ExperimentConfig, data).validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"invalid TOML: {exc}") from None
    return parse_config(data)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(tomli_w.dumps(cfg.to_dict()))
