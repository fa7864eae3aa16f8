"""Experiment configuration document (YAML) and its canonical hash."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .netgraph import ConfigError, NetworkConfig
from .preprocess import TissueMaskParams
from .trainer import TrainSchedule, config_hash

DATASET_ENV = "HISTODENSE_DATASET_ROOT"
RUN_DIRS = ("config", "checkpoints", "predictions", "reports", "logs")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NetworkSection(_Strict):
    growth_rate: int = Field(6, ge=1)
    encoder_blocks: list[int] = [3, 6, 9, 12, 15]
    decoder_blocks: list[int] | None = None
    compression: float | str = 0.5
    reduction_width_multiplier: int = Field(4, ge=1)
    input_channels: int = Field(6, ge=1)
    head: Literal["binary_2class", "multiclass_4"] = "binary_2class"
    variant: Literal["one_bn_denseunet", "tiramisu_baseline"] = "one_bn_denseunet"
    patch_side: int = Field(768, ge=1)

    def build(self) -> NetworkConfig:
        return NetworkConfig.from_dict(self.model_dump())


class ScheduleSection(_Strict):
    initial_lr: float = Field(0.001, gt=0)
    lr_decay: float = Field(0.99, gt=0, le=1)
    iterations_per_epoch: int = Field(400, ge=1)
    epochs: int = Field(250, ge=1)
    batch_size: int = Field(4, ge=1)

    def build(self) -> TrainSchedule:
        return TrainSchedule(**self.model_dump())


class IndexSection(_Strict):
    center_stride: int = Field(1, ge=1)
    max_centers: int = Field(0, ge=0)


class TissueSection(_Strict):
    radius: int = Field(5, ge=0)
    min_hole_area: int = Field(1024, ge=0)

    def build(self) -> TissueMaskParams:
        return TissueMaskParams(**self.model_dump())


class InferenceSection(_Strict):
    overlap: int | None = Field(None, ge=0)  # default: tile side / 4
    window: Literal["cosine", "uniform"] = "cosine"
    batch_size: int = Field(1, ge=1)


class ExperimentConfig(_Strict):
    task: Literal["digestpath", "gleason"]
    dataset_root: str
    output_dir: str
    label_source: str = "majority_vote"
    seed: int = 0
    fold_seed: int = 0
    folds: int = Field(10, ge=2)
    validation_fold: int = Field(0, ge=0)
    prefetch: int = Field(0, ge=0)
    network: NetworkSection = NetworkSection()
    schedule: ScheduleSection = ScheduleSection()
    index: IndexSection = IndexSection()
    tissue: TissueSection = TissueSection()
    inference: InferenceSection = InferenceSection()

    @field_validator("label_source")
    @classmethod
    def _label_source(cls, v: str) -> str:
        from .sampler import parse_label_source

        parse_label_source(v)
        return v

    def network_config(self) -> NetworkConfig:
        cfg = self.network.build()
        want = "binary_2class" if self.task == "digestpath" else "multiclass_4"
        if cfg.head != want:
            raise ConfigError(f"network.head: task {self.task} needs {want}, got {cfg.head}")
        return cfg

    @property
    def overlap(self) -> int:
        o = self.inference.overlap
        return self.network.patch_side // 4 if o is None else o

    def canonical(self) -> dict:
        d = self.model_dump(mode="json")
        d.pop("output_dir")
        d["network"] = self.network.build().to_dict()
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.canonical())

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir)

    def dump(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


def load_config(path: str | Path, check_paths: bool = True) -> ExperimentConfig:
    """Parse and validate; ``$HISTODENSE_DATASET_ROOT`` overrides dataset_root."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if os.environ.get(DATASET_ENV):
        doc["dataset_root"] = os.environ[DATASET_ENV]
    cfg = ExperimentConfig.model_validate(doc)
    cfg.network_config()
    if check_paths and not Path(cfg.dataset_root).is_dir():
        raise FileNotFoundError(f"dataset_root does not exist: {cfg.dataset_root}")
    return cfg
