"""Strict run configuration read from TOML (or the canonical JSON dump)."""
from __future__ import annotations

import hashlib
import json
from typing import Literal, Optional

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError

CONFIG_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Strict):
    kind: Literal["blobs", "sine", "idx"] = "blobs"
    num_classes: int = Field(2, ge=1)
    n: int = Field(300, ge=0)
    dim: int = Field(2, ge=1)
    separation: float = 3.0
    images_path: str = ""
    labels_path: str = ""
    intervals: list[tuple[float, float]] = [(-5.0, 1.0), (1.0, 4.0)]

    def spec(self):
        from .tasks import DatasetSpec
        d = self.model_dump()
        d["intervals"] = tuple(tuple(i) for i in d["intervals"])
        return DatasetSpec(**d)


class ModelSection(_Strict):
    """The single task used by ``sample``, ``evaluate`` and ``probe``."""

    dataset: DatasetSection = DatasetSection()
    channels: int = Field(8, ge=1)
    depth: int = Field(2, ge=1)
    residual: bool = False
    val_fraction: float = Field(0.3, gt=0, lt=1)
    prior_precision: float = Field(5e-4, ge=0)
    batch_size: int = Field(32, ge=1)
    data_seed: int = 0


class SamplerSection(_Strict):
    kind: Literal["sgld", "sghmc", "psgld", "csgmcmc", "l2e", "kinetic_l2e"] = "sghmc"
    step_size: float = Field(1e-3, gt=0)
    friction: Optional[float] = Field(None, ge=0)
    momentum_decay: Optional[float] = Field(None, gt=0)
    mass: float = Field(1.0, gt=0)
    temperature: float = Field(1.0, ge=0)
    psgld_alpha: float = Field(0.99, gt=0, lt=1)
    psgld_lambda: float = Field(1e-5, gt=0)
    schedule: Literal["constant", "cosine_decay", "cyclical"] = "constant"
    num_cycles: int = Field(1, ge=1)
    exploration_ratio: float = Field(0.0, ge=0, lt=1)
    total_steps: Optional[int] = Field(None, ge=1)
    total_epochs: Optional[float] = Field(None, gt=0)
    burnin: Optional[int] = Field(None, ge=0)
    thin: Optional[int] = Field(None, ge=1)
    burnin_epochs: Optional[float] = Field(None, ge=0)
    thin_epochs: Optional[float] = Field(None, gt=0)
    num_samples: int = Field(10, ge=1)
    record_trace: bool = False

    @model_validator(mode="after")
    def _exclusive(self):
        if self.friction is not None and self.momentum_decay is not None:
            raise ValueError("give either friction or momentum_decay, not both")
        if self.total_steps is not None and self.total_epochs is not None:
            raise ValueError("give either total_steps or total_epochs, not both")
        if self.burnin is not None and self.burnin_epochs is not None:
            raise ValueError("give either burnin or burnin_epochs, not both")
        if self.thin is not None and self.thin_epochs is not None:
            raise ValueError("give either thin or thin_epochs, not both")
        return self


class MetaTrainSection(_Strict):
    task_family: Literal["classification", "mixture"] = "classification"
    datasets: list[DatasetSection] = [DatasetSection(kind="blobs", num_classes=2, dim=2),
                                      DatasetSection(kind="blobs", num_classes=3, dim=8)]
    channels: list[int] = [4, 8, 16]
    depths: list[int] = [1, 2, 3]
    residual: list[bool] = [False, True]
    val_fraction: float = Field(0.3, gt=0, lt=1)
    prior_precision: float = Field(5e-4, ge=0)
    batch_size: int = Field(32, ge=1)
    mixture_offsets: tuple[float, float] = (2.5, 3.5)
    outer_iters: int = Field(300, ge=0)
    sigma: float = Field(0.01, gt=0)
    pairs: int = Field(1, ge=1)
    inner_steps: int = Field(1500, ge=1)
    thin: int = Field(50, ge=1)
    samples: int = Field(10, ge=1)
    burnin: Optional[int] = Field(None, ge=0)
    val_batch_size: int = Field(128, ge=1)
    step_size: float = Field(0.01, gt=0)
    momentum_decay: float = Field(0.05, gt=0)
    friction: Optional[float] = Field(None, ge=0)
    sampler: Literal["l2e", "kinetic_l2e"] = "l2e"
    normalization: Literal["rms", "none"] = "rms"
    init: Literal["zero_heads", "identity"] = "zero_heads"
    penalty_factor: float = Field(10.0, gt=0)
    clip: float = Field(1.0, gt=0)
    lr: float = Field(0.01, gt=0)
    max_consecutive_divergences: int = Field(5, ge=1)
    checkpoint_every: int = Field(100, ge=0)

    def es_config(self):
        from .metatrain import ESConfig
        keys = ("sigma", "pairs", "inner_steps", "thin", "samples", "burnin", "val_batch_size",
                "step_size", "momentum_decay", "friction", "sampler", "penalty_factor", "clip", "lr",
                "max_consecutive_divergences")
        return ESConfig(**{k: getattr(self, k) for k in keys})

    def task_distribution(self, seed):
        if self.task_family == "mixture":
            from .targets import MixtureTaskDistribution
            return MixtureTaskDistribution(self.mixture_offsets)
        from .tasks import TaskDistribution
        return TaskDistribution([d.spec() for d in self.datasets], tuple(self.channels),
                                tuple(self.depths), tuple(self.residual), self.val_fraction,
                                self.prior_precision, self.batch_size, seed)


class DiagnosticsSection(_Strict):
    kappa: int = Field(2, ge=2)
    max_coords: int = Field(1024, ge=1)
    rank_normalize: bool = False
    report_scale: bool = False
    threshold: float = Field(1.1, gt=1)


class ProbeSection(_Strict):
    num_points: int = Field(21, ge=2)
    pairs: Literal["consecutive", "first_last", "all"] = "consecutive"


class PathsSection(_Strict):
    out: str = "out"
    checkpoint: Optional[str] = None
    reference: Optional[str] = None
    samples: Optional[str] = None


class RunConfig(_Strict):
    version: int = CONFIG_VERSION
    seed: int
    model: ModelSection = ModelSection()
    sampler: SamplerSection = SamplerSection()
    meta_train: MetaTrainSection = MetaTrainSection()
    diagnostics: DiagnosticsSection = DiagnosticsSection()
    probe: ProbeSection = ProbeSection()
    paths: PathsSection = PathsSection()

    @model_validator(mode="after")
    def _version(self):
        if self.version != CONFIG_VERSION:
            raise ValueError(f"config version {self.version} is not supported (expected {CONFIG_VERSION})")
        return self

    def canonical_json(self):
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def parse_config(data):
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration:\n{exc}") from exc


def load_config(path, seed=None):
    """Read a TOML or JSON config; ``seed`` overrides the file's value."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(raw) if str(path).endswith(".json") else tomllib.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    if seed is not None:
        data["seed"] = seed
    return parse_config(data)


def save_config(path, config):
    with open(path, "w") as fh:
        fh.write(json.dumps(config.model_dump(mode="json"), sort_keys=True, indent=2) + "\n")


def resolve_steps(section, train_size, batch_size):
    """Turn epoch-denominated burn-in, thinning and length into steps.

    One epoch is ``train_size // batch_size`` steps (the incomplete last
    batch is dropped).  Returns ``(total_steps, burnin, thin)``.
    """
    per_epoch = max(1, train_size // batch_size)
    burnin = section.burnin
    if burnin is None:
        burnin = int(round(section.burnin_epochs * per_epoch)) if section.burnin_epochs is not None else 0
    thin = section.thin
    if thin is None:
        thin = max(1, int(round(section.thin_epochs * per_epoch))) if section.thin_epochs is not None else 1
    if section.total_steps is not None:
        total = section.total_steps
    elif section.total_epochs is not None:
        total = max(1, int(round(section.total_epochs * per_epoch)))
    else:
        total = burnin + section.num_samples * thin
    if burnin + section.num_samples * thin > total and section.schedule != "cyclical":
        raise ConfigurationError(
            f"burnin {burnin} + {section.num_samples} samples x thin {thin} exceeds total_steps {total}")
    return total, burnin, thin
