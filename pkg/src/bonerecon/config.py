"""Run configuration: dataclass sections per stage plus named presets.

Unknown keys are rejected when loading from JSON. The `paper` preset pins
the published hyperparameters (w_u=0.5, w_k=0.1, w_m=0.5, momentum 0.98,
lr 0.01 decayed 0.1 per 100 epochs, 400 epochs, 256-scale inputs); `desk`
scales resolution, scene counts, and epochs down to test scale; `overfit`
is the single-scene convergence setup.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .phantom import PhantomConfig
from .training import LossConfig, PointCounts, TrainSchedule


@dataclass
class GeometryConfig:
    det_px: int = 128
    source_to_axis: float = 10.0
    source_to_detector: float = 15.0
    det_extent: float = 3.5
    angles_deg: tuple[float, ...] = (0.0, 90.0)


@dataclass
class DrrConfig:
    step: float = 0.002
    photons_n0: float = 1e5
    sigma_e: float = 1e-3


@dataclass
class ModelConfig:
    ct_resolution: int = 64
    teacher_base: int = 8
    student_base: int = 16
    seg_base: int = 8
    w_m: float = 0.5
    seg_threshold: float = 0.5


@dataclass
class DatasetConfig:
    labeled_train: int = 3
    val: int = 1
    test: int = 2
    unlabeled: int = 4
    base_seed: int = 7


@dataclass
class MetricConfig:
    n_points: int = 16384
    dsc_resolution: int = 64
    oracle_mesh_resolution: int = 192


@dataclass
class RunConfig:
    preset: str = "desk"
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    drr: DrrConfig = field(default_factory=DrrConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    teacher_schedule: TrainSchedule = field(default_factory=TrainSchedule)
    student_schedule: TrainSchedule = field(default_factory=TrainSchedule)
    seg_schedule: TrainSchedule = field(default_factory=TrainSchedule)
    loss: LossConfig = field(default_factory=LossConfig)
    points: PointCounts = field(default_factory=PointCounts)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    sample_mesh_resolution: int = 96
    teacher_points: int = 5000
    recon_resolution: int = 64
    recon_chunk: int = 32768
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def _from_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ValueError(f"expected an object for {cls.__name__}, got {type(data)}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        ftype = names[key].type
        nested = _SECTION_TYPES.get(key)
        if nested is not None and isinstance(value, dict):
            kwargs[key] = _from_dict(nested, value)
        elif key == "angles_deg":
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "phantom": PhantomConfig,
    "geometry": GeometryConfig,
    "drr": DrrConfig,
    "model": ModelConfig,
    "dataset": DatasetConfig,
    "teacher_schedule": TrainSchedule,
    "student_schedule": TrainSchedule,
    "seg_schedule": TrainSchedule,
    "loss": LossConfig,
    "points": PointCounts,
    "metrics": MetricConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data)


def load_config(path) -> RunConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def make_config(preset: str = "desk") -> RunConfig:
    """Named presets; `paper` documents published scale, `desk` runs on a desk."""
    if preset == "paper":
        return RunConfig(
            preset="paper",
            geometry=GeometryConfig(det_px=256),
            model=ModelConfig(ct_resolution=256, teacher_base=16, student_base=16),
            dataset=DatasetConfig(labeled_train=70, val=10, test=40, unlabeled=485),
            teacher_schedule=TrainSchedule(epochs=400, batch_size=3),
            student_schedule=TrainSchedule(epochs=400, batch_size=4),
            seg_schedule=TrainSchedule(epochs=400, batch_size=8),
            loss=LossConfig(w_u=0.5, w_k=0.1),
            points=PointCounts(n_surface=2500, n_uniform=2500, n_unlabeled=5000),
            metrics=MetricConfig(dsc_resolution=256),
            sample_mesh_resolution=192,
            recon_resolution=256,
        )
    if preset == "desk":
        return RunConfig(
            preset="desk",
            geometry=GeometryConfig(det_px=64),
            model=ModelConfig(ct_resolution=32),
            dataset=DatasetConfig(labeled_train=3, val=1, test=2, unlabeled=4),
            teacher_schedule=TrainSchedule(epochs=50, batch_size=3,
                                           decay_period=25),
            student_schedule=TrainSchedule(epochs=40, batch_size=2,
                                           decay_period=20),
            seg_schedule=TrainSchedule(epochs=40, batch_size=8, decay_period=20),
            points=PointCounts(n_surface=1000, n_uniform=1000, n_unlabeled=2000),
            teacher_points=3000,
            sample_mesh_resolution=96,
            recon_resolution=64,
        )
    if preset == "overfit":
        return RunConfig(
            preset="overfit",
            geometry=GeometryConfig(det_px=64),
            model=ModelConfig(ct_resolution=32),
            dataset=DatasetConfig(labeled_train=1, val=0, test=0, unlabeled=1),
            teacher_schedule=TrainSchedule(epochs=200, batch_size=3,
                                           decay_period=100),
            student_schedule=TrainSchedule(epochs=150, batch_size=2,
                                           decay_period=60),
            seg_schedule=TrainSchedule(epochs=60, batch_size=8, decay_period=30),
            points=PointCounts(n_surface=2000, n_uniform=2000, n_unlabeled=4000),
            teacher_points=5000,
            sample_mesh_resolution=96,
            recon_resolution=64,
        )
    raise ValueError(f"unknown preset {preset!r}; use desk, paper, or overfit")
