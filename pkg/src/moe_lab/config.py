"""Declarative experiment configs (JSON) for the nine training regimes."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .models import Architecture
from .regularizers import RegConfig
from .training import TrainConfig

REGIMES = (
    "single_model",
    "vanilla",
    "vanilla+importance",
    "vanilla+Ls",
    "attentive",
    "attentive+importance",
    "attentive+Ls",
    "distill_from_importance",
    "distill_from_Ls",
)
DATASETS = ("mnist", "fmnist", "combined")

# w_importance is shared by all datasets; beta grids differ per dataset.
W_IMPORTANCE_GRID = [0.2, 0.4, 0.6, 0.8, 1.0]
BETA_GRIDS = {
    "mnist": ([1e-6, 1e-5], [10.0 ** -i for i in range(1, 7)]),
    "fmnist": ([1e-7, 1e-6], [10.0 ** -i for i in range(1, 8)]),
    "combined": ([1e-7, 1e-6], [10.0 ** -i for i in range(1, 8)]),
}


class ConfigError(ValueError):
    """Invalid experiment config; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def regime_gate(regime: str) -> str:
    if regime == "single_model":
        return "none"
    if regime.startswith("attentive"):
        return "attentive"
    return "softmax"


def regime_reg_kind(regime: str) -> str:
    if regime.endswith("importance") and not regime.startswith("distill"):
        return "importance"
    if regime.endswith("Ls") and not regime.startswith("distill"):
        return "similarity"
    return "none"


def is_distill(regime: str) -> bool:
    return regime.startswith("distill")


@dataclass
class DatasetSpec:
    name: str = "mnist"
    root: str | None = None
    mnist_root: str | None = None      # only for "combined"
    fmnist_root: str | None = None     # only for "combined"
    train_n: int | None = 10_000
    test_n: int | None = 2_000
    data_seed: int = 0

    def validate(self) -> None:
        if self.name not in DATASETS:
            raise ConfigError("dataset.name", f"must be one of {DATASETS}, got {self.name!r}")
        for key in ("train_n", "test_n"):
            v = getattr(self, key)
            if v is not None and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"dataset.{key}", f"must be a positive integer or null, got {v!r}")
        if self.name == "combined" and (self.train_n is None or self.test_n is None):
            raise ConfigError("dataset.train_n", "the combined dataset needs explicit train_n and test_n")


@dataclass
class Grid:
    w_importance: list[float] = field(default_factory=list)
    beta_s: list[float] = field(default_factory=list)
    beta_d: list[float] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    regime: str
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    n_experts: int = 5
    seeds: list[int] = field(default_factory=lambda: [0])
    grid: Grid = field(default_factory=Grid)
    train: dict = field(default_factory=dict)
    architecture: dict = field(default_factory=dict)
    source: str | None = None
    out: str | None = None
    name: str = ""

    # -- construction -------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        if "regime" not in d:
            raise ConfigError("regime", "missing")
        d = dict(d)
        ds = d.get("dataset", {})
        if isinstance(ds, str):
            ds = {"name": ds}
        d["dataset"] = _build(DatasetSpec, ds, "dataset")
        d["grid"] = _build(Grid, d.get("grid") or {}, "grid")
        cfg = cls(**d)
        if base_dir is not None:
            cfg._resolve_paths(Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"not valid JSON ({exc})") from exc
        cfg = cls.from_dict(raw, base_dir=path.parent)
        if not cfg.name:
            cfg.name = path.stem
        return cfg

    def _resolve_paths(self, base: Path) -> None:
        def fix(p):
            return p if p is None or Path(p).is_absolute() else str(base / p)
        self.source = fix(self.source)
        for key in ("root", "mnist_root", "fmnist_root"):
            setattr(self.dataset, key, fix(getattr(self.dataset, key)))

    def to_dict(self) -> dict:
        return asdict(self)

    # -- validation -----------------------------------------------------------
    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError("regime", f"must be one of {REGIMES}, got {self.regime!r}")
        self.dataset.validate()
        if not isinstance(self.n_experts, int) or self.n_experts < 1:
            raise ConfigError("n_experts", f"must be a positive integer, got {self.n_experts!r}")
        if self.regime == "single_model" and self.n_experts != 1:
            raise ConfigError("n_experts", "single_model has exactly one expert")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds", "must be a non-empty list of nonnegative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds", "contains duplicates")
        self._validate_grid()
        if is_distill(self.regime) and not self.source:
            raise ConfigError("source", f"{self.regime} needs a source checkpoint")
        if not is_distill(self.regime) and self.source:
            raise ConfigError("source", f"{self.regime} does not take a source checkpoint")
        try:
            self.base_train_config(0)
        except TypeError as exc:
            raise ConfigError("train", str(exc)) from exc
        except ValueError as exc:
            raise ConfigError(f"train.{_field_in(str(exc))}", str(exc)) from exc
        try:
            self.arch()
        except TypeError as exc:
            raise ConfigError("architecture", str(exc)) from exc

    def _validate_grid(self) -> None:
        kind = regime_reg_kind(self.regime)
        g = self.grid
        for name in ("w_importance", "beta_s", "beta_d"):
            values = getattr(g, name)
            if not isinstance(values, list):
                raise ConfigError(f"grid.{name}", "must be a list")
            for v in values:
                if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v) or v <= 0:
                    raise ConfigError(f"grid.{name}", f"values must be positive numbers, got {v!r}")
        if kind != "importance" and g.w_importance:
            raise ConfigError("grid.w_importance", f"not used by regime {self.regime}")
        if kind != "similarity" and (g.beta_s or g.beta_d):
            raise ConfigError("grid.beta_s" if g.beta_s else "grid.beta_d",
                              f"not used by regime {self.regime}")

    # -- derived objects ----------------------------------------------------------
    def arch(self) -> Architecture:
        return Architecture(**self.architecture)

    def base_train_config(self, seed: int) -> TrainConfig:
        opts = dict(self.train)
        if "reg" in opts or "seed" in opts:
            raise TypeError("train.reg and train.seed are set through grid and seeds")
        return TrainConfig(seed=seed, reg=RegConfig(regime_reg_kind(self.regime)), **opts)

    def grid_points(self) -> list[RegConfig]:
        """Regularizer settings to sweep; missing grid axes fall back to the defaults."""
        kind = regime_reg_kind(self.regime)
        if kind == "importance":
            ws = self.grid.w_importance or W_IMPORTANCE_GRID
            return [RegConfig("importance", w_importance=w) for w in ws]
        if kind == "similarity":
            default_s, default_d = BETA_GRIDS[self.dataset.name]
            bs = self.grid.beta_s or default_s
            bd = self.grid.beta_d or default_d
            return [RegConfig("similarity", beta_s=s, beta_d=d) for s, d in itertools.product(bs, bd)]
        return [RegConfig()]


def grid_tag(reg: RegConfig) -> str:
    if reg.kind == "importance":
        return f"w{reg.w_importance:g}"
    if reg.kind == "similarity":
        return f"bs{reg.beta_s:g}_bd{reg.beta_d:g}"
    return "default"


def _build(kind, d: Any, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(prefix, "must be an object")
    unknown = set(d) - set(kind.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"{prefix}.{sorted(unknown)[0]}", "unknown key")
    return kind(**d)


def _field_in(message: str) -> str:
    # TrainConfig messages start with the offending field name
    return message.split()[0] if message else "?"
