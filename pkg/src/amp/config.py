"""Validated run configuration (JSON) and the default hyper-parameter grid."""
from __future__ import annotations

import itertools
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .distributions import (
    DepthDistribution,
    DiscreteFoldedNormal,
    FixedDepth,
    LayerPrior,
    MixtureDFN,
    TruncatedPoisson,
)
from .graphs import GENERATORS, PRESETS, TaskSpec
from .model import ModelSpec
from .train import TrainConfig

DIM_GRID = (10, 20, 30)
PRESET_SCHEDULE = {"paper": (1500, 300), "desk": (300, 100)}


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(Strict):
    path: Optional[str] = None
    sizes: Optional[tuple[int, int, int]] = None
    generators: list[str] = Field(default_factory=lambda: list(GENERATORS))
    n_range: tuple[int, int] = (25, 35)
    seed: Optional[int] = None

    @field_validator("generators")
    @classmethod
    def _known_generators(cls, v):
        if not v:
            raise ValueError("generator mix is empty")
        bad = [g for g in v if g not in GENERATORS]
        if bad:
            raise ValueError(f"unknown generators {bad}; expected a subset of {list(GENERATORS)}")
        return v

    @field_validator("sizes")
    @classmethod
    def _positive(cls, v):
        if v is not None and any(s <= 0 for s in v):
            raise ValueError("split sizes must be positive")
        return v

    @field_validator("n_range")
    @classmethod
    def _range(cls, v):
        if v[0] < 2 or v[0] > v[1]:
            raise ValueError("n_range must satisfy 2 <= low <= high")
        return v

    @field_validator("path")
    @classmethod
    def _exists(cls, v):
        if v is not None and not (Path(v) / "manifest.json").is_file():
            raise ValueError(f"no dataset manifest at {v}")
        return v


class DepthConfig(Strict):
    family: Literal["poisson", "dfn", "mixture", "fixed"] = "dfn"
    rate: float = Field(10.0, gt=0)
    mu: float = 10.0
    sigma: float = Field(5.0, gt=0)
    mus: tuple[float, float] = (5.0, 15.0)
    sigmas: tuple[float, float] = (3.0, 3.0)
    depth: int = Field(2, ge=1)
    quantile: float = Field(0.99, gt=0, lt=1)

    def build(self) -> DepthDistribution:
        if self.family == "poisson":
            return TruncatedPoisson(self.rate, self.quantile)
        if self.family == "dfn":
            return DiscreteFoldedNormal(self.mu, self.sigma, self.quantile)
        if self.family == "mixture":
            return MixtureDFN(self.mus, self.sigmas, quantile=self.quantile)
        return FixedDepth(self.depth, self.quantile)

    def label(self) -> str:
        if self.family == "poisson":
            return f"poisson(rate={self.rate:g})"
        if self.family == "dfn":
            return f"dfn(mu={self.mu:g},sigma={self.sigma:g})"
        if self.family == "mixture":
            return "mixture(" + ",".join(f"{m:g}/{s:g}" for m, s in zip(self.mus, self.sigmas)) + ")"
        return f"fixed({self.depth})"


class PriorConfig(Strict):
    kind: Literal["uninformative", "poisson", "folded_normal"] = "uninformative"
    rate: float = Field(5.0, gt=0)
    mu: float = 5.0
    sigma: float = Field(10.0, gt=0)

    def build(self) -> LayerPrior:
        return LayerPrior(self.kind, self.rate, self.mu, self.sigma)


class ModelConfig(Strict):
    kind: Literal["gcn", "gin", "adgn"] = "gcn"
    dim: int = 20
    filter_mode: Literal["none", "input", "embedding"] = "embedding"
    depth: DepthConfig = Field(default_factory=DepthConfig)
    prior: PriorConfig = Field(default_factory=PriorConfig)
    weight_variance: float = Field(10.0, gt=0)
    max_layers: int = Field(200, ge=1)
    gin_eps: float = 0.0
    gcn_skip: bool = True
    adgn_step: float = Field(0.1, gt=0)
    adgn_gamma: float = Field(0.1, ge=0)


class TrainSettings(Strict):
    lr: float = Field(0.003, ge=0)
    weight_decay: float = Field(1e-6, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    epochs: Optional[int] = Field(None, ge=1)
    patience: Optional[int] = Field(None, ge=0)
    batch_size: Optional[int] = Field(32, ge=1)
    repeats: int = Field(1, ge=1)


class GridConfig(Strict):
    dim: list[int] = Field(default_factory=lambda: list(DIM_GRID))
    depth: list[DepthConfig] = Field(default_factory=lambda: [
        DepthConfig(family="poisson", rate=10.0),
        DepthConfig(family="dfn", mu=10.0, sigma=5.0),
        DepthConfig(family="dfn", mu=10.0, sigma=10.0),
        DepthConfig(family="mixture", mus=(5.0, 15.0), sigmas=(3.0, 3.0)),
    ])
    prior: list[PriorConfig] = Field(default_factory=lambda: [
        PriorConfig(kind="uninformative"),
        PriorConfig(kind="poisson", rate=5.0),
        PriorConfig(kind="folded_normal", mu=5.0, sigma=10.0),
    ])
    filter_mode: list[Literal["none", "input", "embedding"]] = Field(
        default_factory=lambda: ["none", "input", "embedding"])

    def size(self) -> int:
        return len(self.dim) * len(self.depth) * len(self.prior) * len(self.filter_mode)


class DiagnoseSettings(Strict):
    max_graphs: int = Field(16, ge=1)
    max_nodes: int = Field(250, ge=1)
    split: Literal["train", "val", "test"] = "val"


class RunConfig(Strict):
    task: Literal["diameter", "sssp", "eccentricity"]
    seed: int
    preset: Literal["paper", "desk"] = "desk"
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainSettings = Field(default_factory=TrainSettings)
    grid: GridConfig = Field(default_factory=GridConfig)
    diagnose: DiagnoseSettings = Field(default_factory=DiagnoseSettings)
    checkpoint: Optional[str] = None
    allow_offgrid: bool = False

    @model_validator(mode="after")
    def _grid_dims(self):
        if not self.allow_offgrid:
            dims = [self.model.dim] + list(self.grid.dim)
            bad = sorted({d for d in dims if d not in DIM_GRID})
            if bad:
                raise ValueError(f"embedding dim {bad} outside the grid {list(DIM_GRID)}; pass --allow-offgrid to permit")
        if any(d < 1 for d in [self.model.dim] + list(self.grid.dim)):
            raise ValueError("embedding dim must be positive")
        if self.checkpoint is not None and not Path(self.checkpoint).is_file():
            raise ValueError(f"checkpoint {self.checkpoint} does not exist")
        return self

    # derived views ------------------------------------------------------
    @property
    def task_spec(self) -> TaskSpec:
        return TaskSpec(self.task)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return tuple(self.data.sizes) if self.data.sizes else PRESETS[self.preset]

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    def model_spec(self, seed: int | None = None) -> ModelSpec:
        task = self.task_spec
        m = self.model
        return ModelSpec(
            input_dim=task.feature_dim, target_dim=task.target_dim, level=task.level, kind=m.kind, dim=m.dim,
            filter_mode=m.filter_mode, weight_variance=m.weight_variance,
            seed=self.seed if seed is None else seed, max_layers=m.max_layers, gin_eps=m.gin_eps,
            gcn_skip=m.gcn_skip,
            adgn_step=m.adgn_step, adgn_gamma=m.adgn_gamma,
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        epochs, patience = PRESET_SCHEDULE[self.preset]
        t = self.train
        return TrainConfig(
            epochs=t.epochs or epochs, patience=patience if t.patience is None else t.patience, lr=t.lr,
            weight_decay=t.weight_decay, betas=tuple(t.betas), adam_eps=t.adam_eps, batch_size=t.batch_size,
            seed=self.seed if seed is None else seed,
        )

    def grid_cells(self) -> list["RunConfig"]:
        """One config per grid cell, in lexicographic grid order."""
        g = self.grid
        cells = []
        for dim, depth, prior, mode in itertools.product(g.dim, g.depth, g.prior, g.filter_mode):
            data = self.model_dump()
            data["model"].update(dim=dim, depth=depth.model_dump(), prior=prior.model_dump(), filter_mode=mode)
            cells.append(RunConfig.model_validate(data))
        return cells

    def resolved(self) -> dict:
        return json.loads(self.model_dump_json())


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  {e}" for e in errors))
        self.errors = errors


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{path}: {err['msg']}")
    return out


def parse_config(source=None, overrides: dict | None = None) -> RunConfig:
    """Load JSON text, a path or a dict, apply flag overrides, validate."""
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = dict(source)
    else:
        text = Path(source).read_text() if Path(str(source)).is_file() else str(source)
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"<json>: {exc}"]) from None
    if not isinstance(data, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
