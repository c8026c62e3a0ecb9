"""Experiment configuration: schema, validation and content digest."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import MissingArtifactError, PglaError


class ConfigError(PglaError):
    """Invalid configuration; ``issues`` lists ``(field path, message)`` pairs."""

    code = 2

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("invalid config: " + "; ".join(f"{p}: {m}" for p, m in self.issues))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Section):
    input_shape: tuple[int, ...] = Field((1, 16, 16), min_length=1, max_length=3)
    hidden: tuple[int, ...] = (32,)
    classes: int = Field(10, ge=2)
    activation: Literal["sigmoid", "tanh", "relu"] = "sigmoid"


class DatasetConfig(_Section):
    source: Literal["synthetic", "idx"] = "synthetic"
    images: str | None = None
    labels: str | None = None
    limit: int | None = Field(None, ge=1)
    noise: float = Field(0.1, ge=0)

    @model_validator(mode="after")
    def _paths(self):
        if self.source == "idx" and (self.images is None or self.labels is None):
            raise ValueError("idx source needs both 'images' and 'labels' paths")
        return self


class PerturbationConfig(_Section):
    mechanism: Literal["gaussian-dp", "laplace-dp", "per-layer-random"] = "gaussian-dp"
    epsilon: float = Field(1.0, gt=0)
    delta: float = Field(1e-5, ge=0, lt=1)
    clip: float = Field(1.0, gt=0)
    min_dataset_size: int = Field(600, ge=1)
    sigma_override: float | None = Field(None, ge=0)


class TopologyConfig(_Section):
    clients: int = Field(1, ge=1)
    aggregation_times: int = Field(1, ge=1)
    exposures: int = Field(1, ge=1)
    c_dp: float = Field(1.0, gt=0)
    server_noise: bool = False


class ScheduleConfig(_Section):
    T: int = Field(1000, ge=1)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.02, gt=0, lt=1)

    @model_validator(mode="after")
    def _order(self):
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self


class TrainingConfig(_Section):
    steps: int = Field(10000, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    width: int = Field(128, ge=1)
    blocks: int = Field(3, ge=1)
    time_dim: int = Field(64, ge=2, multiple_of=2)
    weighting: Literal["simple", "bound"] = "simple"
    conditional: bool = False
    # conditions: surrogate gradients with fresh noise of the published scale, or the intercepted uploads
    condition: Literal["perturbed-surrogate", "intercepted"] = "perturbed-surrogate"


class InversionSettings(_Section):
    enabled: bool = True
    iterations: int = Field(300, ge=1)
    step: float = Field(0.1, gt=0)
    label_step: float = Field(0.4, ge=0)
    restarts: int = Field(3, ge=0)
    baseline: bool = True  # also invert the raw perturbed gradient, same init


class AttackConfig(_Section):
    probes: int = Field(2000, ge=1)
    probe_source: Literal["uniform", "idx"] = "uniform"
    surrogate_init: Literal["global", "fresh"] = "global"
    entry: Literal["adaptive", "fixed-c"] = "adaptive"
    c: float = Field(0.5 ** 0.5, gt=0, lt=1)
    T_prime: int | None = Field(None, ge=0)
    stochastic: bool = True
    inversion: InversionSettings = InversionSettings()


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0, lt=2 ** 64)
    trials: int = Field(32, ge=1)
    model: ModelConfig = ModelConfig()
    dataset: DatasetConfig = DatasetConfig()
    perturbation: PerturbationConfig = PerturbationConfig()
    topology: TopologyConfig = TopologyConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    training: TrainingConfig = TrainingConfig()
    attack: AttackConfig = AttackConfig()
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def _probe_files(self):
        if self.attack.probe_source == "idx" and self.dataset.source != "idx":
            raise ValueError("attack.probe_source 'idx' reads the dataset files; set dataset.source to 'idx'")
        return self

    def canonical_json(self) -> str:
        """Stable serialization of everything that affects results."""
        return json.dumps(self.model_dump(mode="json", exclude={"output_dir"}), sort_keys=True,
                          separators=(",", ":"))

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).digest()

    @property
    def digest_hex(self) -> str:
        return self.digest.hex()

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with top-level or dotted-path overrides, e.g. ``{"attack.c": 0.5}``."""
        data = self.model_dump(mode="json")
        for path, value in changes.items():
            node = data
            *head, last = path.replace("__", ".").split(".")
            for key in head:
                node = node[key]
            node[last] = value
        return validate_config(data)


def _issues(exc: ValidationError):
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        yield loc, err["msg"]


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_issues(exc)) from None


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a JSON config (defaults when ``path`` is None) and apply overrides."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise MissingArtifactError(f"config file {str(p)!r} does not exist")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError([("<document>", f"not valid JSON: {exc}")]) from None
        if not isinstance(data, dict):
            raise ConfigError([("<document>", "top level must be an object")])
    data.update({k: v for k, v in overrides.items() if v is not None})
    return validate_config(data)


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()
