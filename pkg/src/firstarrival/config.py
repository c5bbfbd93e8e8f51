"""Run configuration: model, chain and prediction settings in one TOML file."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import tomli

from .vecchia import PcCalibration

FIELDS = ("x_pref", "x_year", "x_niche", "x_gev_mu", "x_gev_sigma")


@dataclass
class ModelConfig:
    gev_only: bool = False
    share_niche_gev: bool = True
    area_baseline_km2: float = 400.0
    pixel_km: float = 20.0
    k_neighbors: int = 5
    scalar_prior_var: float = 100.0
    xi_lower: float = -1.0
    xi_upper: float = 0.5
    pc_spatial: PcCalibration = field(default_factory=PcCalibration)
    pc_temporal: PcCalibration = field(default_factory=lambda: PcCalibration(range0=2.0))

    def pc_for(self, name: str) -> PcCalibration:
        return self.pc_temporal if name == "x_year" else self.pc_spatial


@dataclass
class ChainConfig:
    iterations: int = 20000
    burn_in: int = 15000
    thin: int = 4
    adapt_horizon: int | None = None  # defaults to burn_in
    target_mala: float = 0.57
    target_rw: float = 0.30
    delta_field: float = 0.1
    delta_scalar: float = 0.05
    delta_hyper: float = 0.3
    adapt_scalar_cov: bool = True
    scalar_blocks: str = "three"  # or "joint": sharing and GEV scalars in one block
    warm_start: str | None = None

    def __post_init__(self):
        if self.iterations < 0 or self.burn_in < 0 or self.thin < 1:
            raise ValueError("iterations and burn_in must be non-negative and thin positive")
        if self.scalar_blocks not in ("three", "joint"):
            raise ValueError(f"scalar_blocks must be 'three' or 'joint', not {self.scalar_blocks!r}")

    @property
    def horizon(self) -> int:
        return self.burn_in if self.adapt_horizon is None else min(self.adapt_horizon, self.burn_in)

    @property
    def n_draws(self) -> int:
        return max(self.iterations - self.burn_in, 0) // self.thin


@dataclass
class PredictConfig:
    mask_threshold: float = 0.01
    effort_mode: str = "observed"
    lambda_source: str = "model"
    quantiles: tuple[float, ...] = (0.1, 0.5, 0.9)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    data_dir: str | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        raw = dict(raw)
        unknown = set(raw) - {"model", "chain", "predict", "data_dir"}
        if unknown:
            raise ValueError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        return cls(model=_build(ModelConfig, raw.get("model", {})),
                   chain=_build(ChainConfig, raw.get("chain", {})),
                   predict=_build(PredictConfig, raw.get("predict", {})),
                   data_dir=raw.get("data_dir"))

    @classmethod
    def load(cls, path) -> RunConfig:
        with open(path, "rb") as fh:
            return cls.from_dict(tomli.load(fh))

    def to_toml(self) -> str:
        lines = []
        if self.data_dir is not None:
            lines.append(f"data_dir = {_toml_value(self.data_dir)}")
        for section in ("model", "chain", "predict"):
            _emit(lines, section, asdict(getattr(self, section)))
        return "\n".join(lines) + "\n"


def _build(cls, values: dict):
    names = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in names:
            raise ValueError(f"unknown {cls.__name__} key {key!r}")
        default = getattr(cls(), key) if key in names else None
        if is_dataclass(default):
            val = _build(type(default), val)
        elif isinstance(default, tuple):
            val = tuple(val)
        kwargs[key] = val
    return cls(**kwargs)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def _emit(lines, name, table: dict):
    lines.append(f"\n[{name}]")
    nested = {}
    for k, v in table.items():
        if isinstance(v, dict):
            nested[k] = v
        elif v is not None:
            lines.append(f"{k} = {_toml_value(v)}")
    for k, v in nested.items():
        _emit(lines, f"{name}.{k}", v)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
