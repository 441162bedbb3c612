"""Configuration records for the model, training, scoring and synthetic data."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


@dataclass
class EncoderConfig:
    depth: int = 8
    width: int = 256
    heads: int = 8
    memory_slots: int = 50
    mlp_ratio: float = 4.0
    long_skips: bool = True


@dataclass
class DecoderConfig:
    depth: int = 4
    width: int = 128
    heads: int = 4
    # "token": one sigmoid gate per token and level; "channel": one per channel
    gate_granularity: str = "token"
    mlp_ratio: float = 4.0
    fusion_residual: bool = True
    long_skips: bool = True


@dataclass
class ModelConfig:
    image_size: int = 224
    channels: int = 3
    patch_side: int = 16
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    mask_ratio: float = 0.75
    mem_enc: bool = True
    mc_dec: bool = True

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        self.validate()

    def validate(self) -> None:
        enc, dec = self.encoder, self.decoder
        if self.image_size % self.patch_side:
            raise ValueError(
                f"image_size {self.image_size} is not a multiple of patch_side {self.patch_side}"
            )
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        for name, width, heads in (("encoder", enc.width, enc.heads), ("decoder", dec.width, dec.heads)):
            if width % heads:
                raise ValueError(f"{name} width {width} is not divisible by {heads} heads")
            if width % 2:
                raise ValueError(f"{name} width must be even for positional embeddings")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if enc.depth < 1 or dec.depth < 1:
            raise ValueError("encoder and decoder need at least one block each")
        if dec.gate_granularity not in ("token", "channel"):
            raise ValueError(f"unknown gate granularity {dec.gate_granularity!r}")

    @property
    def grid_dims(self) -> tuple[int, int]:
        g = self.image_size // self.patch_side
        return (g, g)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_side) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side * self.channels

    @property
    def memory_slots(self) -> int:
        """Slots actually allocated; the Mem-Enc ablation switch forces zero."""
        return self.encoder.memory_slots if self.mem_enc else 0


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 256
    base_lr: float = 1.5e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    min_lr: float = 0.0
    betas: tuple[float, float] = (0.9, 0.95)
    seed: int = 0
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    augment: bool = True
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.crop_scale = tuple(self.crop_scale)
        self.crop_ratio = tuple(self.crop_ratio)
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) must be smaller than epochs ({self.epochs})"
            )
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"invalid crop scale range {self.crop_scale}")


@dataclass
class MsSsimParams:
    scales: int = 3
    weights: tuple[float, ...] | None = None  # None: standard weights, truncated and renormalised
    window_side: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.weights is not None:
            self.weights = tuple(float(w) for w in self.weights)

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


@dataclass
class ScoringConfig:
    n_seeds: int = 10
    mask_ratio: float = 0.75
    context_patches: int = 3
    seed_offset: int = 0
    # "score": average per-seed dissimilarities; "reconstruction": average the
    # composite reconstructions first and score once
    pooling: str = "score"
    ms_ssim: MsSsimParams = field(default_factory=MsSsimParams)

    def __post_init__(self):
        if isinstance(self.ms_ssim, dict):
            self.ms_ssim = MsSsimParams(**self.ms_ssim)
        if self.pooling not in ("score", "reconstruction"):
            raise ValueError(f"unknown pooling mode {self.pooling!r}")

    @property
    def seeds(self) -> list[int]:
        return list(range(self.seed_offset, self.seed_offset + self.n_seeds))


@dataclass
class SyntheticSpec:
    image_size: int = 64
    channels: int = 1
    n_train: int = 200
    n_test_normal: int = 50
    n_test_anomalous: int = 50
    anomaly: str = "blob"  # blob | square | intensity
    anomaly_size: tuple[int, int] = (6, 12)  # radius / half-side range in pixels
    anomaly_contrast: tuple[float, float] = (0.25, 0.45)
    n_gratings: int = 2
    grating_period: tuple[float, float] = (10.0, 20.0)
    orientation_jitter: float = 5.0  # degrees
    noise_sigma: float = 2.0
    noise_amplitude: float = 0.08
    seed: int = 0

    def __post_init__(self):
        self.anomaly_size = tuple(self.anomaly_size)
        self.anomaly_contrast = tuple(self.anomaly_contrast)
        self.grating_period = tuple(self.grating_period)
        if self.anomaly not in ("blob", "square", "intensity"):
            raise ValueError(f"unknown anomaly family {self.anomaly!r}")
        if 2 * self.anomaly_size[1] >= self.image_size:
            raise ValueError(
                f"anomaly size {self.anomaly_size[1]} does not fit in a {self.image_size}px image"
            )


@dataclass
class EvalConfig:
    group_size: int = 100
    n_groups: int = 5
    threshold: float = 0.5
    n_thresholds: int = 51
    seed: int = 0


def tiny_model_config(**overrides: Any) -> ModelConfig:
    """Desk-scale profile: 64px grayscale, encoder 4x128, decoder 2x64."""
    cfg = dict(
        image_size=64,
        channels=1,
        patch_side=8,
        encoder=EncoderConfig(depth=4, width=128, heads=4, memory_slots=50),
        decoder=DecoderConfig(depth=2, width=64, heads=4),
    )
    cfg.update(overrides)
    return ModelConfig(**cfg)


def tiny_train_config(**overrides: Any) -> TrainConfig:
    cfg = dict(epochs=200, batch_size=16, base_lr=1.5e-3, warmup_epochs=5)
    cfg.update(overrides)
    return TrainConfig(**cfg)


def tiny_scoring_config(**overrides: Any) -> ScoringConfig:
    # 3x3-patch context windows are 24px here, so the coarsest of 3 scales is 6px
    cfg = dict(ms_ssim=MsSsimParams(scales=3, window_side=5, sigma=1.0))
    cfg.update(overrides)
    return ScoringConfig(**cfg)


def to_dict(obj) -> dict:
    out = dataclasses.asdict(obj)
    return _listify(out)


def _listify(value):
    if isinstance(value, dict):
        return {k: _listify(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_listify(v) for v in value]
    return value


@dataclass
class RunConfig:
    """Everything a config file may set; missing sections take defaults."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            model=ModelConfig(**data.get("model", {})),
            train=TrainConfig(**data.get("train", {})),
            scoring=ScoringConfig(**data.get("scoring", {})),
            synthetic=SyntheticSpec(**data.get("synthetic", {})),
            eval=EvalConfig(**data.get("eval", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(to_dict(self), fh, sort_keys=False)
