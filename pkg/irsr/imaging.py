"""Image planes, class-mask stacks and lossless raster I/O."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import tifffile
from loguru import logger
from PIL import Image

from irsr.errors import DimensionError, InputError

TIFF_SUFFIXES = {".tif", ".tiff"}
RANGE_TOLERANCE = 1e-6


class RangeTag(str, Enum):
    """Declared value range of an ImagePlane."""

    UNIT = "unit"  # [0, 1], storage
    SIGNED = "signed"  # [-1, 1], network

    @property
    def bounds(self) -> tuple[float, float]:
        return (0.0, 1.0) if self is RangeTag.UNIT else (-1.0, 1.0)


@dataclass(frozen=True)
class ImagePlane:
    """2-D grid of real intensities within a declared range."""

    values: np.ndarray
    range_tag: RangeTag = RangeTag.UNIT

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DimensionError(f"image plane must be a non-empty 2-D grid, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InputError("image plane contains non-finite values")

        lo, hi = self.range_tag.bounds
        if values.min() < lo - RANGE_TOLERANCE or values.max() > hi + RANGE_TOLERANCE:
            raise InputError(
                f"values [{values.min():.4g}, {values.max():.4g}] outside "
                f"{self.range_tag.value} range [{lo}, {hi}]"
            )
        # Rounding in weighted averages can leave values a hair outside.
        object.__setattr__(self, "values", np.clip(values, lo, hi))

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_signed(self) -> ImagePlane:
        if self.range_tag is RangeTag.SIGNED:
            return self
        return ImagePlane(self.values * 2.0 - 1.0, RangeTag.SIGNED)

    def to_unit(self) -> ImagePlane:
        if self.range_tag is RangeTag.UNIT:
            return self
        return ImagePlane((self.values + 1.0) / 2.0, RangeTag.UNIT)

    def crop(self, top: int, left: int, size: int) -> ImagePlane:
        return ImagePlane(self.values[top : top + size, left : left + size], self.range_tag)


@dataclass(frozen=True)
class ClassMaskStack:
    """One binary plane per class, spatially aligned with an ImagePlane."""

    classes: tuple[str, ...]
    planes: np.ndarray

    def __post_init__(self) -> None:
        planes = np.asarray(self.planes)
        if planes.ndim != 3:
            raise DimensionError(f"mask stack must be (K, H, W), got {planes.shape}")
        if planes.shape[0] != len(self.classes):
            raise DimensionError(
                f"{planes.shape[0]} mask planes for {len(self.classes)} classes"
            )
        if not np.isin(planes, (0, 1)).all():
            raise InputError("mask planes must be binary")
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "planes", planes.astype(np.uint8))

    @property
    def height(self) -> int:
        return int(self.planes.shape[1])

    @property
    def width(self) -> int:
        return int(self.planes.shape[2])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def from_index_map(cls, index_map: np.ndarray, classes: Sequence[str]) -> ClassMaskStack:
        """One-hot encode a raster holding one class index per pixel."""
        index_map = np.asarray(index_map)
        if index_map.ndim != 2:
            raise DimensionError(f"index map must be 2-D, got {index_map.shape}")
        if index_map.min() < 0 or index_map.max() >= len(classes):
            raise InputError(
                f"class indices {index_map.min()}..{index_map.max()} do not fit "
                f"{len(classes)} classes"
            )
        planes = np.stack([(index_map == k) for k in range(len(classes))]).astype(np.uint8)
        return cls(tuple(classes), planes)

    @classmethod
    def uniform(cls, class_name: str, classes: Sequence[str], shape: tuple[int, int]) -> ClassMaskStack:
        """Stack labelling every pixel with ``class_name``."""
        if class_name not in classes:
            raise InputError(f"unknown class {class_name!r}")
        index = np.full(shape, list(classes).index(class_name))
        return cls.from_index_map(index, classes)

    def check_aligned(self, shape: tuple[int, int]) -> None:
        if self.shape != tuple(shape):
            raise DimensionError(f"masks {self.shape} not aligned with image {tuple(shape)}")

    def crop(self, top: int, left: int, size: int) -> ClassMaskStack:
        return ClassMaskStack(self.classes, self.planes[:, top : top + size, left : left + size])

    def index_map(self) -> np.ndarray:
        """Class index per pixel (first set plane wins)."""
        return np.argmax(self.planes, axis=0)


def _read_raster(path: Path) -> tuple[np.ndarray, str]:
    if not path.exists():
        raise InputError(f"file not found: {path}")

    suffix = path.suffix.lower()
    if suffix in TIFF_SUFFIXES:
        return np.asarray(tifffile.imread(path)), "tiff"
    if suffix == ".npy":
        return np.load(path), "npy"

    try:
        with Image.open(path) as img:
            mode = img.mode
            if mode in ("RGBA", "LA", "CMYK", "YCbCr", "1"):
                img = img.convert("RGB" if mode != "1" else "L")
                mode = img.mode
            return np.asarray(img), mode
    except OSError as e:
        raise InputError(f"cannot decode {path}: {e}") from e


def _to_unit(arr: np.ndarray, mode: str, path: Path) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == np.uint16 or mode.startswith("I"):
        return arr.astype(np.float64) / 65535.0
    if np.issubdtype(arr.dtype, np.floating):
        values = arr.astype(np.float64)
        # Float rasters must already be unit range; only rounding error is clipped.
        if values.size and (values.min() < -RANGE_TOLERANCE or values.max() > 1.0 + RANGE_TOLERANCE):
            raise InputError(
                f"{path}: float raster spans [{values.min():.4g}, {values.max():.4g}], expected [0, 1]"
            )
        return np.clip(values, 0.0, 1.0)
    raise InputError(f"unsupported pixel type {arr.dtype}")


def read_color(path: Path) -> np.ndarray:
    """Read an HR source as an (H, W, 3) unit-range array; grayscale is replicated."""
    arr, mode = _read_raster(path)
    unit = _to_unit(arr, mode, path)
    if unit.ndim == 2:
        unit = np.repeat(unit[:, :, None], 3, axis=2)
    if unit.ndim != 3 or unit.shape[2] < 3:
        raise DimensionError(f"{path}: expected grayscale or 3-channel image, got {arr.shape}")
    return unit[:, :, :3]


def read_band(path: Path, band_index: int | None = None) -> np.ndarray:
    """Read a raw single-band absorbance plane without rescaling."""
    arr, _ = _read_raster(path)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3:
        if band_index is None:
            raise InputError(f"{path} holds {arr.shape[0]} planes; choose one with band_index")
        if not 0 <= band_index < arr.shape[0]:
            raise InputError(f"band index {band_index} out of range for {arr.shape[0]} planes")
        arr = arr[band_index]
    if arr.ndim != 2:
        raise DimensionError(f"{path}: expected a single-band plane, got {arr.shape}")
    return arr


def read_plane(path: Path) -> ImagePlane:
    """Read a stored unit-range grayscale raster (as written by ``write_plane``)."""
    arr, mode = _read_raster(path)
    if arr.ndim != 2:
        raise DimensionError(f"{path}: expected a single-channel raster, got {arr.shape}")
    return ImagePlane(_to_unit(arr, mode, path))


def read_masks(path: Path | Sequence[Path], classes: Sequence[str]) -> ClassMaskStack:
    """Read masks as an indexed raster, a directory of ``<class>.png`` files, or K rasters."""
    if isinstance(path, Path) and path.is_dir():
        paths: Sequence[Path] = [path / f"{name}.png" for name in classes]
    elif isinstance(path, Path):
        arr, _ = _read_raster(path)
        if arr.ndim != 2:
            raise DimensionError(f"{path}: indexed mask must be single-channel, got {arr.shape}")
        return ClassMaskStack.from_index_map(arr.astype(np.int64), classes)
    else:
        paths = path

    if len(paths) != len(classes):
        raise InputError(f"{len(paths)} mask files for {len(classes)} classes")
    planes = []
    for p in paths:
        arr, _ = _read_raster(p)
        if arr.ndim != 2:
            raise DimensionError(f"{p}: class mask must be single-channel, got {arr.shape}")
        planes.append((arr > 0).astype(np.uint8))
    if len({plane.shape for plane in planes}) != 1:
        raise DimensionError("class mask planes differ in size")
    return ClassMaskStack(tuple(classes), np.stack(planes))


def write_plane(path: Path, plane: ImagePlane) -> Path:
    """Write a plane losslessly: float32 TIFF for .tif/.tiff, else 16-bit PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    unit = plane.to_unit().values
    if path.suffix.lower() in TIFF_SUFFIXES:
        tifffile.imwrite(path, unit.astype(np.float32))
    else:
        quantized = np.round(unit * 65535.0).astype(np.uint16)
        Image.fromarray(quantized).save(path, format="PNG")
    logger.debug(f"Wrote {plane.height}x{plane.width} plane to {path}")
    return path


def write_masks(directory: Path, masks: ClassMaskStack) -> Path:
    """Write one 8-bit ``<class>.png`` per class into ``directory``."""
    directory.mkdir(parents=True, exist_ok=True)
    for name, plane in zip(masks.classes, masks.planes, strict=True):
        Image.fromarray((plane * 255).astype(np.uint8)).save(directory / f"{name}.png", format="PNG")
    return directory


def write_color(path: Path, color: np.ndarray) -> Path:
    """Write an (H, W, 3) unit-range array as an 8-bit RGB PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(color, 0, 1) * 255).astype(np.uint8)).save(path, format="PNG")
    return path
