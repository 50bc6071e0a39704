"""Experiment configuration files (JSON, fixed schema, unknown keys rejected)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from dpglab.ebm import LAMBDA_MAX, FitConfig
from dpglab.tasks import TaskConfig, catalog_task
from dpglab.trainer import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "FitSection", "SweepSection", "BenchSection", "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FitSection(_Strict):
    lr: float = Field(0.5, gt=0)
    tolerance: float = Field(0.01, gt=0)
    max_iters: int = Field(10_000, ge=0)
    sample_size: int = Field(4096, ge=1)
    mode: Literal["exact", "snis"] = "exact"
    lambda_max: float = Field(LAMBDA_MAX, gt=0)
    seed: int = 0

    def fit_config(self) -> FitConfig:
        return FitConfig(lr=self.lr, tolerance=self.tolerance, max_iters=self.max_iters,
                         sample_size=self.sample_size, mode=self.mode, lambda_max=self.lambda_max)


class SweepSection(_Strict):
    batch_sizes: list[int] = Field(default_factory=lambda: [16, 64, 256])
    methods: list[Literal["reinforce", "reinforce_baseline", "ziegler", "gdc", "gdcpp"]] = Field(
        default_factory=lambda: ["gdc", "gdcpp"])
    seeds: list[int] = Field(default_factory=lambda: [0])
    # total samples per run; epochs = budget // batch_size so every run ends at equal samples_seen
    sample_budget: int | None = Field(None, ge=1)

    @field_validator("batch_sizes")
    @classmethod
    def _batches(cls, v):
        if not v:
            raise ValueError("batch_sizes must not be empty")
        if any(b < 1 for b in v):
            raise ValueError("batch sizes must be positive")
        return v

    @field_validator("methods", "seeds")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("list must not be empty")
        return v


class BenchSection(_Strict):
    checkpoint_every: int = Field(100, ge=1)
    mc_batch: int = Field(256, ge=2)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    # proposal acceptance cadence during the bench run; >1 lets q lag pi between tests
    accept_every: int = Field(1, ge=1)


class ExperimentConfig(_Strict):
    task: str | TaskConfig
    fit: FitSection = Field(default_factory=FitSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sweep: SweepSection = Field(default_factory=SweepSection)
    bench: BenchSection = Field(default_factory=BenchSection)
    dump: Literal["p", "a", "pz"] = "p"

    def task_config(self) -> TaskConfig:
        if isinstance(self.task, TaskConfig):
            return self.task
        try:
            return catalog_task(self.task)
        except KeyError as e:
            raise ConfigError(str(e.args[0])) from None

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def sha256(self) -> str:
        canon = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def parse_config(text: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text)

