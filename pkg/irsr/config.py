"""Validated configuration models.

Every component takes one of these pydantic models; command-level configs are
read from JSON files and echoed back, fully resolved, next to their outputs.
"""

from __future__ import annotations

import json
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Literal, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from irsr.errors import ConfigurationError, InputError
from irsr.settings import data_root

DEFAULT_CLASSES: tuple[str, ...] = ("stroma", "epithelium", "other")

ModelT = TypeVar("ModelT", bound=BaseModel)


class NetworkMode(str, Enum):
    """Normalization variant of the generator."""

    CGAN = "cgan"
    UGAN = "ugan"


class DegradationParams(BaseModel):
    """HR -> LR simulation parameters."""

    model_config = ConfigDict(frozen=True)

    # None disables the blur stage entirely.
    blur_sigma: Annotated[float, Field(gt=0)] | None = 3.0
    down_factor: int = Field(default=8, ge=1)
    down_mode: Literal["bilinear", "nearest"] = "bilinear"
    up_mode: Literal["bilinear", "nearest"] = "nearest"
    invert: bool = True


class AugmentationParams(BaseModel):
    """Random augmentation ranges applied per training sample."""

    model_config = ConfigDict(frozen=True)

    rotation_range: tuple[float, float] = (0.0, 180.0)
    exponent_range: tuple[float, float] = (0.25, 4.0)
    channels: tuple[int, ...] = (0, 1, 2)

    @field_validator("rotation_range")
    @classmethod
    def validate_rotation(cls, v: tuple[float, float]) -> tuple[float, float]:
        lo, hi = v
        if not 0.0 <= lo <= hi <= 180.0:
            raise ValueError(f"rotation range must lie within [0, 180], got {v}")
        return v

    @field_validator("exponent_range")
    @classmethod
    def validate_exponent(cls, v: tuple[float, float]) -> tuple[float, float]:
        lo, hi = v
        if not 0.0 < lo <= hi <= 4.0:
            raise ValueError(f"exponent range must satisfy 0 < min <= max <= 4, got {v}")
        return v

    @field_validator("channels")
    @classmethod
    def validate_channels(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if not v or any(c not in (0, 1, 2) for c in v):
            raise ValueError(f"channels must be a non-empty subset of (0, 1, 2), got {v}")
        return v


class GeneratorConfig(BaseModel):
    """Architecture of the U-Net/Res-Net hybrid generator."""

    model_config = ConfigDict(frozen=True)

    mode: NetworkMode = NetworkMode.CGAN
    # One width per resolution level followed by the bridge width.
    channel_schedule: tuple[int, ...] = (64, 128, 256, 512)
    class_names: tuple[str, ...] = DEFAULT_CLASSES
    cond_hidden: int = Field(default=64, ge=1)
    input_channels: Literal[1] = 1
    output_channels: Literal[1] = 1

    @field_validator("channel_schedule")
    @classmethod
    def validate_schedule(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if len(v) < 2:
            raise ValueError("channel schedule needs at least one level and a bridge width")
        if any(width <= 0 for width in v):
            raise ValueError(f"channel widths must be positive, got {v}")
        return v

    @field_validator("class_names")
    @classmethod
    def validate_classes(cls, v: tuple[str, ...]) -> tuple[str, ...]:
        if not v or len(set(v)) != len(v):
            raise ValueError(f"class names must be non-empty and unique, got {v}")
        return v

    @property
    def levels(self) -> int:
        return len(self.channel_schedule) - 1

    @property
    def size_divisor(self) -> int:
        """Spatial dimensions must be divisible by this (one halving per level)."""
        return 2**self.levels

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def conditional(self) -> bool:
        return self.mode is NetworkMode.CGAN


class DiscriminatorConfig(BaseModel):
    """Critic layout: two convolutions per width (stride 1 then stride 2)."""

    model_config = ConfigDict(frozen=True)

    widths: tuple[int, ...] = (64, 128, 256, 512)
    fc_width: int = Field(default=1024, ge=1)
    input_size: int = Field(default=96, ge=1)

    @field_validator("widths")
    @classmethod
    def validate_widths(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if not v or any(width <= 0 for width in v):
            raise ValueError(f"discriminator widths must be positive, got {v}")
        return v


class LossWeights(BaseModel):
    """Weights of the perceptual and adversarial terms in the phase-2 loss."""

    model_config = ConfigDict(frozen=True)

    alpha: float = Field(default=0.01, ge=0)
    gamma: float = Field(default=0.005, ge=0)


class ExtractorConfig(BaseModel):
    """Frozen feature extractor used by the perceptual loss."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["vgg19", "random", "identity"] = "vgg19"
    weights_path: Path | None = None
    seed: int = 0
    layers: int = Field(default=3, ge=1)
    width: int = Field(default=16, ge=1)

    @model_validator(mode="after")
    def require_weights(self) -> ExtractorConfig:
        if self.kind == "vgg19" and self.weights_path is None:
            raise ValueError("vgg19 extractor needs weights_path (no network download)")
        return self


class TrainingSchedule(BaseModel):
    """Two-phase training schedule."""

    model_config = ConfigDict(frozen=True)

    phase1_iters: int = Field(default=50_000, ge=0)
    # Counted in generator updates.
    phase2_iters: int = Field(default=100_000, ge=0)
    g_steps_per_d_step: int = Field(default=6, ge=1)
    lr_g: float = Field(default=1e-4, gt=0)
    lr_d_ratio: float = Field(default=0.1, gt=0)
    batch_size: int = Field(default=12, ge=1)
    patch_size: int = Field(default=96, ge=8)
    weights: LossWeights = Field(default_factory=LossWeights)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0)
    validate_every: int = Field(default=500, ge=1)
    checkpoint_every: int = Field(default=1000, ge=1)

    @property
    def lr_d(self) -> float:
        return self.lr_g * self.lr_d_ratio


class ManifestItem(BaseModel):
    """One HR source image with its class masks."""

    image: Path
    # Either one indexed raster or one single-channel raster per class.
    mask: Path | None = None
    masks: list[Path] | None = None
    split: Literal["train", "val"] = "train"

    @model_validator(mode="after")
    def one_mask_source(self) -> ManifestItem:
        if (self.mask is None) == (self.masks is None):
            raise ValueError(f"{self.image}: give exactly one of 'mask' or 'masks'")
        return self


class DatasetManifest(BaseModel):
    """Structured list of image/mask pairs and the class ordering."""

    classes: tuple[str, ...] = DEFAULT_CLASSES
    root: Path | None = None
    items: list[ManifestItem]

    @field_validator("items")
    @classmethod
    def non_empty(cls, v: list[ManifestItem]) -> list[ManifestItem]:
        if not v:
            raise ValueError("manifest lists no items")
        return v

    def split(self, name: str) -> list[ManifestItem]:
        return [item for item in self.items if item.split == name]

    @classmethod
    def load(cls, path: Path) -> DatasetManifest:
        """Read a manifest and resolve relative paths.

        Relative paths resolve against ``root`` if given, else ``IRSR_DATA_ROOT``,
        else the manifest's own directory.
        """
        manifest = load_config(cls, path)
        base = manifest.root or data_root() or path.parent

        def resolve(p: Path) -> Path:
            return p if p.is_absolute() else base / p

        items = [
            item.model_copy(
                update={
                    "image": resolve(item.image),
                    "mask": resolve(item.mask) if item.mask else None,
                    "masks": [resolve(m) for m in item.masks] if item.masks else None,
                }
            )
            for item in manifest.items
        ]
        return manifest.model_copy(update={"items": items, "root": base})


class SimulateConfig(BaseModel):
    """Config of the ``simulate`` command."""

    manifest: Path
    out_dir: Path
    degradation: DegradationParams = Field(default_factory=DegradationParams)
    augmentation: AugmentationParams = Field(default_factory=AugmentationParams)
    seed: int = 0


class TrainConfig(BaseModel):
    """Config of the ``train`` command."""

    manifest: Path
    out_dir: Path
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = Field(default_factory=DiscriminatorConfig)
    schedule: TrainingSchedule = Field(default_factory=TrainingSchedule)
    degradation: DegradationParams = Field(default_factory=DegradationParams)
    augmentation: AugmentationParams = Field(default_factory=AugmentationParams)
    # Required: vgg19 by default, which needs a local weights_path.
    extractor: ExtractorConfig
    seed: int = 0
    prefetch_workers: int = Field(default=0, ge=0)
    # "mse-only" stops after phase 1 (loss ablation).
    ablation: Literal["none", "mse-only"] = "none"

    @model_validator(mode="after")
    def patch_fits_networks(self) -> TrainConfig:
        patch = self.schedule.patch_size
        if patch % self.generator.size_divisor:
            raise ValueError(
                f"patch size {patch} not divisible by {self.generator.size_divisor}"
            )
        if patch != self.discriminator.input_size:
            raise ValueError(
                f"discriminator input size {self.discriminator.input_size} "
                f"differs from patch size {patch}"
            )
        return self


class InferOptions(BaseModel):
    """Options of the ``infer`` command."""

    model_config = ConfigDict(frozen=True)

    tile: int = Field(default=256, ge=8)
    overlap: int = Field(default=32, ge=0)
    percentile: float = Field(default=90.0, gt=0, le=100)
    workers: int = Field(default=1, ge=1)
    # Class ordering of the mask file; defaults to the checkpoint's ordering.
    class_names: tuple[str, ...] | None = None
    # Plane to read from a multi-band raster.
    band_index: int | None = None

    @model_validator(mode="after")
    def overlap_below_half_tile(self) -> InferOptions:
        if self.overlap * 2 >= self.tile:
            raise ValueError(f"overlap {self.overlap} must be < tile/2 ({self.tile / 2})")
        return self


def parse_config(cls: type[ModelT], data: Any) -> ModelT:
    """Validate ``data`` into ``cls``; validation failures become ConfigurationError."""
    if isinstance(data, cls):
        return data
    try:
        return cls.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid {cls.__name__}: {e}") from e


def load_config(cls: type[ModelT], path: Path) -> ModelT:
    """Read a JSON config file into ``cls``."""
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path} is not valid JSON: {e}") from e
    return parse_config(cls, data)


def write_resolved(config: BaseModel, out_dir: Path, name: str = "config.resolved.json") -> Path:
    """Echo the fully resolved config into ``out_dir`` for provenance."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(config.model_dump_json(indent=2))
    return path
