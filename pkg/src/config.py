"""Run configuration: dataclasses, presets and JSON persistence.

``config.json`` at the repository root holds the default run configuration.
It names a preset and may override any nested field::

    {"preset": "desk", "optim": {"steps": 5000}, "seed": 3}
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional, Tuple

from .errors import ConfigError
from .supervision import LossWeights
from .utils import get_config_path

BACKBONE_KINDS = ("convnext_main", "basic_tiny")


@dataclass
class BackboneConfig:
    kind: str = "convnext_main"
    feature_dim: int = 256
    block_depths: Tuple[int, ...] = (3, 3, 9)
    stage_dims: Tuple[int, ...] = (96, 192, 384)
    scale: float = 1.0
    mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: Tuple[float, float, float] = (0.229, 0.224, 0.225)

    @property
    def dims(self):
        """Stage widths after applying ``scale``."""
        return tuple(max(8, int(round(d * self.scale))) for d in self.stage_dims)

    @property
    def context_dim(self):
        return self.feature_dim if self.kind == "basic_tiny" else self.feature_dim // 2

    def validate(self):
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"Unknown backbone kind {self.kind!r}", field="backbone.kind")
        if len(self.block_depths) != 3 or len(self.stage_dims) != 3:
            raise ConfigError("Backbones have exactly three stages", field="backbone.block_depths")
        if self.scale <= 0:
            raise ConfigError(f"scale must be positive, got {self.scale}", field="backbone.scale")
        if self.kind == "convnext_main" and self.feature_dim % 2:
            raise ConfigError(
                f"feature_dim {self.feature_dim} must be even to split context/hidden",
                field="backbone.feature_dim",
            )


@dataclass
class RefinerConfig:
    """Refinement settings.

    With ``share_blocks`` (the default) a single space-time block fills all
    ``n_blocks`` slots, and the same weights serve every refinement
    iteration. Turning it off gives each slot its own block, which adds
    about 2.7M parameters at full width and takes the full model outside its
    16.48M budget.
    """

    n_blocks: int = 3
    kernel: int = 7
    heads: int = 8
    expansion: int = 4
    corr_radius: int = 4
    corr_levels: int = 5
    iters: int = 4
    width: int = 256
    hidden_dim: int = 128
    corr_dims: Tuple[int, int] = (256, 192)
    motion_dims: Tuple[int, int] = (64, 64)
    merge_dim: int = 128
    share_blocks: bool = True

    @property
    def corr_channels(self):
        return self.corr_levels * (2 * self.corr_radius + 1) ** 2

    def validate(self):
        for name in ("n_blocks", "iters", "corr_levels", "heads", "expansion", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", field=f"refiner.{name}")
        if self.corr_radius < 0:
            raise ConfigError("corr_radius must be >= 0", field="refiner.corr_radius")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel {self.kernel} must be odd", field="refiner.kernel")
        if self.width % self.heads:
            raise ConfigError(
                f"width {self.width} not divisible by heads={self.heads}", field="refiner.heads"
            )


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    window: int = 16

    def validate(self):
        self.backbone.validate()
        self.refiner.validate()
        if self.window < 2 or self.window % 2:
            raise ConfigError(f"window {self.window} must be even and >= 2", field="model.window")
        if self.refiner.hidden_dim != self.backbone.context_dim:
            raise ConfigError(
                f"refiner.hidden_dim {self.refiner.hidden_dim} must equal the backbone's "
                f"context width {self.backbone.context_dim}",
                field="refiner.hidden_dim",
            )
        return self

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "model.").validate()


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    min_frames: int = 8
    max_frames: int = 24
    n_sprites: Tuple[int, int] = (1, 4)
    max_speed: float = 8.0
    max_rotation: float = 0.05
    max_zoom: float = 0.02
    n_tracks: int = 256
    flow_fraction: float = 0.3
    shift: float = 4.0
    scale_range: float = 0.1
    color_jitter: float = 0.1
    max_occluders: int = 2
    occluder_size: Tuple[int, int] = (6, 16)

    def validate(self):
        if self.height % 8 or self.width % 8:
            raise ConfigError(
                f"training resolution {self.height}x{self.width} must be a multiple of 8",
                field="data.height" if self.height % 8 else "data.width",
            )
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError("need 1 <= min_frames <= max_frames", field="data.min_frames")
        if not 0.0 <= self.flow_fraction <= 1.0:
            raise ConfigError("flow_fraction must lie in [0, 1]", field="data.flow_fraction")


@dataclass
class OptimConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_fraction: float = 0.01
    steps: int = 20000
    clip_norm: float = 1.0
    checkpoint_every: int = 1000
    log_every: int = 10

    def validate(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0", field="optim.lr")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1", field="optim.steps")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)", field="optim.warmup_fraction")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    output_dir: str = "Output"
    reference_mode: bool = False
    workers: int = 1

    def validate(self):
        self.model.validate()
        self.data.validate()
        self.optim.validate()
        if self.workers < 1:
            raise ConfigError("workers must be >= 1", field="workers")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "")


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"Expected an object for {prefix or 'config'}", field=prefix or None)
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"Unknown config key {prefix + key!r}", field=prefix + key)
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{prefix}{key}.")
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _merge(base, overrides, prefix=""):
    updates = {}
    for key, value in overrides.items():
        if not hasattr(base, key):
            raise ConfigError(f"Unknown config key {prefix + key!r}", field=prefix + key)
        current = getattr(base, key)
        if is_dataclass(current):
            updates[key] = _merge(current, value, f"{prefix}{key}.")
        elif isinstance(current, tuple):
            updates[key] = tuple(value)
        else:
            updates[key] = value
    return replace(base, **updates)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def full_config():
    """Full-size model: ConvNeXt backbone, D=256, three space-time blocks."""
    return RunConfig()


def tiny_config():
    return RunConfig(
        model=ModelConfig(
            backbone=BackboneConfig(
                kind="basic_tiny", feature_dim=128, block_depths=(2, 2, 2), stage_dims=(64, 128, 256)
            ),
        )
    )


def desk_config():
    """Roughly half a million parameters, sized for 64x64 CPU training."""
    return RunConfig(
        model=ModelConfig(
            backbone=BackboneConfig(feature_dim=64, block_depths=(1, 1, 3), scale=0.25),
            refiner=RefinerConfig(
                corr_radius=3,
                corr_levels=3,
                width=64,
                hidden_dim=32,
                corr_dims=(64, 48),
                motion_dims=(16, 16),
                merge_dim=32,
            ),
            window=8,
        )
    )


PRESETS = {"full": full_config, "tiny": tiny_config, "desk": desk_config}


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset {name!r}; choose from {sorted(PRESETS)}", field="preset")
    return PRESETS[name]()


def resolve_config(data):
    """Build a config from ``{"preset": ..., <overrides>}`` (preset defaults to full)."""
    data = dict(data or {})
    base = preset(data.pop("preset", "full"))
    return _merge(base, data).validate()


def load_config(path: Optional[str] = None):
    """Load configuration from config.json (or ``path``)."""
    config_path = Path(path) if path else Path(get_config_path())
    try:
        data = json.loads(config_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Failed to load config {config_path}: {e}")
    return resolve_config(data)


def save_config(cfg, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")
    return path
