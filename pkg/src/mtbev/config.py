"""Run configuration: scene geometry, model, optimizer, losses and training loop.

Configs are plain dataclasses grouped into sections that mirror the YAML file
layout (``scene``, ``model``, ``decoder``, ``optim``, ``loss``, ``train``).
Any key can be overridden from the command line with ``section.key=value``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

TASKS = ("det", "seg", "occ")
VARIANTS = ("transformer", "mamba")


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass(frozen=True)
class SceneSpec:
    extent_m: float = 8.0
    grid_h: int = 32
    grid_w: int = 32
    grid_z: int = 4
    out_h: int = 64
    out_w: int = 64
    out_z: int = 16
    height_m: float = 4.0
    n_det_classes: int = 4
    n_seg_classes: int = 3
    n_occ_classes: int = 6
    channels: int = 64
    lidar_noise: float = 0.1
    cam_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        validate_scene_spec(self)

    @property
    def cell_m(self) -> float:
        return 2.0 * self.extent_m / self.grid_h

    @property
    def empty_class(self) -> int:
        return self.n_occ_classes

    def with_seed(self, seed: int) -> "SceneSpec":
        return dataclasses.replace(self, seed=int(seed))


def validate_scene_spec(spec: SceneSpec) -> None:
    dims = ("grid_h", "grid_w", "grid_z", "out_h", "out_w", "out_z",
            "n_det_classes", "n_seg_classes", "n_occ_classes", "channels")
    for name in dims:
        if int(getattr(spec, name)) < 1:
            raise ConfigError(f"scene.{name} must be >= 1, got {getattr(spec, name)}")
    if spec.out_h != 2 * spec.grid_h or spec.out_w != 2 * spec.grid_w:
        raise ConfigError("output grid must be exactly 2x the BEV grid in h and w")
    if spec.out_z != 4 * spec.grid_z:
        raise ConfigError("output height must be exactly 4x grid_z")
    if spec.grid_h != spec.grid_w:
        raise ConfigError("BEV grid must be square (square extent)")
    if spec.n_occ_classes < spec.n_det_classes:
        raise ConfigError("n_occ_classes must be >= n_det_classes")
    if spec.extent_m <= 0 or spec.height_m <= 0:
        raise ConfigError("extent_m and height_m must be positive")
    if spec.lidar_noise < 0 or spec.cam_noise < 0:
        raise ConfigError("noise amplitudes must be non-negative")


@dataclass
class ModelConfig:
    tasks: tuple[str, ...] = TASKS
    n_det_queries: int = 32
    seg_blocks: int = 4
    use_mafi: bool = True
    occ_attn_dim: int = 16


@dataclass
class DecoderConfig:
    variant: str = "transformer"
    layers: int = 2
    heads: int = 4
    points: int = 4
    state_dim: int = 8
    ffn_ratio: int = 2
    use_tcs: bool = True


@dataclass
class OptimConfig:
    lr: float = 8e-4
    weight_decay: float = 0.01
    pct_start: float = 0.3
    div_factor: float = 10.0
    grad_clip: float = 10.0


@dataclass
class LossConfig:
    lambda_cls: float = 1.0
    lambda_reg: float = 0.25
    lambda_det: float = 1.0
    lambda_seg: float = 1.0
    lambda_occ: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class TrainConfig:
    steps: int = 800
    batch_size: int = 2
    n_scenes: int = 8
    seed: int = 7
    eval_every: int = 100
    ckpt_every: int = 200
    log_every: int = 10
    staged_fraction: float = 0.0
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        m, d, t = self.model, self.decoder, self.train
        m.tasks = tuple(m.tasks)
        if not m.tasks:
            raise ConfigError("at least one task must be enabled")
        unknown = set(m.tasks) - set(TASKS)
        if unknown:
            raise ConfigError(f"unknown tasks {sorted(unknown)}")
        if d.variant not in VARIANTS:
            raise ConfigError(f"decoder.variant must be one of {VARIANTS}, got {d.variant!r}")
        positive = {
            "model.n_det_queries": m.n_det_queries, "model.seg_blocks": m.seg_blocks,
            "model.occ_attn_dim": m.occ_attn_dim, "decoder.heads": d.heads,
            "decoder.points": d.points, "decoder.state_dim": d.state_dim,
            "decoder.ffn_ratio": d.ffn_ratio, "train.batch_size": t.batch_size,
            "train.n_scenes": t.n_scenes, "optim.lr": self.optim.lr,
        }
        for key, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{key} must be positive, got {value}")
        if d.layers < 0 or t.steps < 0:
            raise ConfigError("decoder.layers and train.steps must be non-negative")
        if self.scene.channels % d.heads:
            raise ConfigError("scene.channels must be divisible by decoder.heads")
        s = self.scene
        if m.n_det_queries > s.grid_h * s.grid_w * s.n_det_classes:
            raise ConfigError("model.n_det_queries exceeds the confidence volume size")
        if m.seg_blocks > s.grid_h:
            raise ConfigError("model.seg_blocks cannot exceed grid_h")
        if not 0.0 <= t.staged_fraction < 1.0:
            raise ConfigError("train.staged_fraction must lie in [0, 1)")
        lw = self.loss
        for name in ("lambda_cls", "lambda_reg", "lambda_det", "lambda_seg", "lambda_occ"):
            if getattr(lw, name) < 0:
                raise ConfigError(f"loss.{name} must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["model"]["tasks"] = list(self.model.tasks)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        unknown = set(data) - set(_SECTION_TYPES)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in _SECTION_TYPES.items():
            raw = dict(data.get(name) or {})
            known = {f.name for f in dataclasses.fields(section_cls)}
            extra = set(raw) - known
            if extra:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
            if name == "model" and "tasks" in raw:
                raw["tasks"] = tuple(raw["tasks"])
            kwargs[name] = section_cls(**raw)
        return cls(**kwargs)

    def with_overrides(self, overrides: list[str] | None) -> "RunConfig":
        data = self.to_dict()
        for item in overrides or []:
            apply_override(data, item)
        return RunConfig.from_dict(data)


_SECTION_TYPES = {
    "scene": SceneSpec,
    "model": ModelConfig,
    "decoder": DecoderConfig,
    "optim": OptimConfig,
    "loss": LossConfig,
    "train": TrainConfig,
}


def apply_override(data: dict[str, Any], item: str) -> None:
    """Apply one ``section.key=value`` override in place; value parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override must look like section.key=value, got {item!r}")
    path, raw = item.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or parts[0] not in _SECTION_TYPES:
        raise ConfigError(f"override key must be section.key, got {path!r}")
    section, key = parts
    data.setdefault(section, {})[key] = yaml.safe_load(raw)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
    for item in overrides or []:
        apply_override(data, item)
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
