"""Experiment configuration: one dataclass tree, canonical JSON, content hash.

Defaults define the standard desk-scale benchmark (8 scenes x 12 views x
48x48 px, 5 classes) and the reference dual-branch training recipe. Paired
ablation runs vary single fields and share everything else, so the config
hash doubles as the identity of a run.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from cmc_forge.errors import ConfigError
from cmc_forge.nets import AugmentationSpec, default_strong_spec, default_weak_spec
from cmc_forge.worldgen import FeatureParams, SceneParams


@dataclass(frozen=True)
class DataParams:
    """Benchmark dataset: scenes, camera rig, annotations, reconstruction."""

    num_scenes: int = 8
    views_per_scene: int = 12
    image_size: int = 48
    scene: SceneParams = field(default_factory=SceneParams)
    features: FeatureParams = field(default_factory=FeatureParams)
    # camera rig, as fractions of scene_scale
    rig_radius: float = 0.95
    rig_height: float = 1.15
    rig_target_height: float = 0.12
    # annotations
    annotation_kind: str = "scribbles"  # points | scribbles | coarse
    scribble_length: float = 0.35
    scribble_thickness: int = 1
    min_region_area: int = 16
    coarse_erosion: int = 2
    # reconstruction simulator
    recon_noise: float = 0.03
    recon_density: str = "full"  # full | single_scan
    recon_scope: str = "multi_view"  # multi_view | single_frame
    scan_stride: int = 4


@dataclass(frozen=True)
class Schedule:
    """Two-stage schedule: base training, then a linear cross-modal ramp."""

    base_epochs: int = 12
    ramp_epochs: int = 5
    total_epochs: int = 40
    lambda_max_2d: float = 0.1
    lambda_max_3d: float = 0.1
    lr_2d: float = 0.002
    lr_3d: float = 0.04  # keeps the 20x ratio between branch learning rates
    batch_size: int = 4

    def validate(self) -> None:
        if self.base_epochs < 0 or self.ramp_epochs < 0 or self.total_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.base_epochs + self.ramp_epochs > self.total_epochs:
            raise ConfigError("base_epochs + ramp_epochs must not exceed total_epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataParams = field(default_factory=DataParams)
    schedule: Schedule = field(default_factory=Schedule)
    # model
    hidden_dim: int = 16
    # mean-teacher machinery
    ema_alpha: float = 0.99
    tau: float = 0.8
    beta: float = 0.5
    weight_decay_2d: float = 1e-8
    weight_decay_3d: float = 0.005
    teacher_augmentation: str = "weak"  # weak | none
    augment_weak: AugmentationSpec = field(default_factory=default_weak_spec)
    augment_strong: AugmentationSpec = field(default_factory=default_strong_spec)
    # cross-modal consistency
    enable_3d: bool = True
    confidence_mode: str = "both"  # both | pred | recon | none
    cmc_raw_sum: bool = False
    # sampling
    sampling_strategy: str = "view_aware"  # view_aware | random | correspondences_only
    sample_budget: int = 2048
    view_fraction: float = 0.6
    context_radius_factor: float = 0.5  # radius = factor * scene_scale
    # harness
    eval_every: int = 10
    checkpoint_every: int = 10

    def validate(self) -> "ExperimentConfig":
        self.schedule.validate()
        if not (0.0 <= self.ema_alpha <= 1.0):
            raise ConfigError("ema_alpha must be in [0, 1]")
        if not (0.0 < self.tau < 1.0):
            raise ConfigError("tau must be in (0, 1)")
        if not (0.0 <= self.beta <= 1.0):
            raise ConfigError("beta must be in [0, 1]")
        if self.confidence_mode not in ("both", "pred", "recon", "none"):
            raise ConfigError(f"unknown confidence_mode {self.confidence_mode!r}")
        if self.sampling_strategy not in ("view_aware", "random", "correspondences_only"):
            raise ConfigError(f"unknown sampling_strategy {self.sampling_strategy!r}")
        if self.teacher_augmentation not in ("weak", "none"):
            raise ConfigError(f"unknown teacher_augmentation {self.teacher_augmentation!r}")
        if self.data.annotation_kind not in ("points", "scribbles", "coarse"):
            raise ConfigError(f"unknown annotation_kind {self.data.annotation_kind!r}")
        if self.data.recon_density not in ("full", "single_scan"):
            raise ConfigError(f"unknown recon_density {self.data.recon_density!r}")
        if self.data.recon_scope not in ("multi_view", "single_frame"):
            raise ConfigError(f"unknown recon_scope {self.data.recon_scope!r}")
        if self.sample_budget < 1:
            raise ConfigError("sample_budget must be >= 1")
        return self


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(x) for x in obj]
    return obj


_NESTED = {
    "data": DataParams,
    "schedule": Schedule,
    "augment_weak": AugmentationSpec,
    "augment_strong": AugmentationSpec,
    "scene": SceneParams,
    "features": FeatureParams,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    def build(cls, payload):
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in payload:
                continue
            value = payload[f.name]
            if f.name in _NESTED and isinstance(value, dict):
                value = build(_NESTED[f.name], value)
            elif isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad config for {cls.__name__}: {exc}") from exc

    return build(ExperimentConfig, data).validate()


def canonical_json(config: ExperimentConfig) -> str:
    """Stable representation used for hashing and on-disk config.json."""
    return json.dumps(_to_jsonable(config), sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:16]


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(_to_jsonable(config), sort_keys=True, indent=1) + "\n")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return config_from_dict(data)
