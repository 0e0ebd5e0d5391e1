"""Paired LR/HR training data from HR colour images and class masks.

The degradation model stands in for the IR optics: one colour channel of the
HR image is inverted, contrast-adjusted with a random exponent, then blurred,
bilinearly down-sampled and nearest-neighbour up-sampled back to size. All
randomness comes from explicit ``numpy.random.Generator`` instances.
"""

from __future__ import annotations

import math
from collections import deque
from collections.abc import Iterator, Sequence
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Protocol, TypeVar

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel
from scipy import ndimage

from irsr.config import AugmentationParams, DatasetManifest, DegradationParams, ManifestItem
from irsr.errors import ConfigurationError, DimensionError, IrsrError, ParameterError
from irsr.imaging import ClassMaskStack, ImagePlane, read_color, read_masks, write_masks, write_plane

T = TypeVar("T")

Direction = Literal["down", "up"]
ResampleMode = Literal["bilinear", "nearest"]


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian truncated at radius ceil(3 sigma), normalized to sum 1."""
    if not sigma > 0:
        raise ParameterError(f"blur sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def gaussian_blur(img: ImagePlane, sigma: float) -> ImagePlane:
    """Separable Gaussian blur with reflect padding."""
    kernel = gaussian_kernel(sigma)
    # scipy "mirror" is reflection about the edge sample (d c b | a b c d).
    out = ndimage.correlate1d(img.values, kernel, axis=0, mode="mirror")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="mirror")
    return ImagePlane(out, img.range_tag)


def _linear_axis(values: np.ndarray, axis: int, out_len: int) -> np.ndarray:
    # Half-pixel-centre sampling with edge clamping.
    in_len = values.shape[axis]
    src = (np.arange(out_len, dtype=np.float64) + 0.5) * (in_len / out_len) - 0.5
    src = np.clip(src, 0.0, in_len - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_len - 1)
    frac = src - i0
    shape = [1, 1]
    shape[axis] = out_len
    frac = frac.reshape(shape)
    return np.take(values, i0, axis=axis) * (1.0 - frac) + np.take(values, i1, axis=axis) * frac


def resample(
    img: ImagePlane, factor: int, direction: Direction, mode: ResampleMode
) -> ImagePlane:
    """Scale an image by an integer factor."""
    if factor < 1:
        raise ParameterError(f"resample factor must be >= 1, got {factor}")
    h, w = img.shape
    values = img.values

    if direction == "down":
        if h % factor or w % factor:
            raise DimensionError(f"{h}x{w} image not divisible by down factor {factor}")
        out_h, out_w = h // factor, w // factor
        if mode == "nearest":
            out = values[::factor, ::factor]
        else:
            out = _linear_axis(_linear_axis(values, 0, out_h), 1, out_w)
    elif direction == "up":
        out_h, out_w = h * factor, w * factor
        if mode == "nearest":
            out = np.repeat(np.repeat(values, factor, axis=0), factor, axis=1)
        else:
            out = _linear_axis(_linear_axis(values, 0, out_h), 1, out_w)
    else:
        raise ParameterError(f"unknown resample direction {direction!r}")

    return ImagePlane(out, img.range_tag)


def rotate(
    color: np.ndarray, masks: ClassMaskStack, angle: float
) -> tuple[np.ndarray, ClassMaskStack]:
    """Rotate an (H, W, 3) image bilinearly and its masks by nearest neighbour."""
    if angle == 0.0:
        return color, masks
    rotated = ndimage.rotate(color, angle, axes=(1, 0), reshape=False, order=1, mode="mirror")
    planes = ndimage.rotate(masks.planes, angle, axes=(2, 1), reshape=False, order=0, mode="mirror")
    return np.clip(rotated, 0.0, 1.0), ClassMaskStack(masks.classes, planes)


def invert(img: ImagePlane) -> ImagePlane:
    """Map v to 1 - v."""
    return ImagePlane(1.0 - img.values, img.range_tag)


def apply_exponent(img: ImagePlane, exponent: float) -> ImagePlane:
    """Contrast adjustment v -> v ** exponent."""
    if not exponent > 0:
        raise ParameterError(f"contrast exponent must be positive, got {exponent}")
    return ImagePlane(np.power(img.values, exponent), img.range_tag)


def degrade(hr: ImagePlane, deg: DegradationParams) -> ImagePlane:
    """Blur, down-sample and up-sample back to the original size."""
    lr = gaussian_blur(hr, deg.blur_sigma) if deg.blur_sigma is not None else hr
    lr = resample(lr, deg.down_factor, "down", deg.down_mode)
    return resample(lr, deg.down_factor, "up", deg.up_mode)


@dataclass(frozen=True)
class AugmentationDraw:
    """Random choices for one training sample."""

    channel: int
    exponent: float
    angle: float = 0.0


def draw_augmentation(aug: AugmentationParams, rng: np.random.Generator) -> AugmentationDraw:
    """Draw angle, channel and exponent in that order from ``rng``."""
    angle = float(rng.uniform(*aug.rotation_range))
    channel = int(aug.channels[rng.integers(len(aug.channels))])
    exponent = float(rng.uniform(*aug.exponent_range))
    return AugmentationDraw(channel=channel, exponent=exponent, angle=angle)


def _simulate_with(
    hr_color: np.ndarray, deg: DegradationParams, draw: AugmentationDraw
) -> tuple[ImagePlane, ImagePlane]:
    """Simulate with pre-drawn augmentation choices."""
    if hr_color.ndim != 3 or hr_color.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) colour image, got {hr_color.shape}")
    h, w = hr_color.shape[:2]
    if h % deg.down_factor or w % deg.down_factor:
        raise DimensionError(f"{h}x{w} image not divisible by down factor {deg.down_factor}")

    gray = ImagePlane(hr_color[:, :, draw.channel])
    if deg.invert:
        gray = invert(gray)
    hr = apply_exponent(gray, draw.exponent)
    return degrade(hr, deg), hr


def simulate_lr(
    hr_color: np.ndarray,
    deg: DegradationParams,
    aug: AugmentationParams,
    rng: np.random.Generator,
) -> tuple[ImagePlane, ImagePlane]:
    """Simulate an (lr, hr) grayscale pair from an HR colour image.

    One channel is picked at random, inverted, and raised to a random exponent
    shared by both outputs; the lr branch is then degraded.
    """
    channel = int(aug.channels[rng.integers(len(aug.channels))])
    exponent = float(rng.uniform(*aug.exponent_range))
    return _simulate_with(hr_color, deg, AugmentationDraw(channel=channel, exponent=exponent))


def sample_window(
    shape: tuple[int, int], size: int, rng: np.random.Generator
) -> tuple[int, int]:
    """Top-left corner of a size x size window, uniform over valid positions."""
    h, w = shape
    if h < size or w < size:
        raise DimensionError(f"{h}x{w} image smaller than {size}x{size} patch")
    top = int(rng.integers(h - size + 1))
    left = int(rng.integers(w - size + 1))
    return top, left


def sample_patch(
    img: ImagePlane, masks: ClassMaskStack, size: int, rng: np.random.Generator
) -> tuple[ImagePlane, ClassMaskStack]:
    """Crop the same random window from an image and its masks."""
    masks.check_aligned(img.shape)
    top, left = sample_window(img.shape, size, rng)
    return img.crop(top, left, size), masks.crop(top, left, size)


def epoch_iterator(
    dataset: Sequence[T],
    batch_size: int,
    rng: np.random.Generator,
    epochs: int | None = None,
) -> Iterator[list[T]]:
    """Yield shuffled fixed-size batches; every epoch visits each item once.

    The final short batch of an epoch is dropped. Runs forever unless
    ``epochs`` is given.
    """
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    if not 1 <= batch_size <= len(dataset):
        raise ConfigurationError(
            f"batch size {batch_size} must be between 1 and the dataset size {len(dataset)}"
        )

    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset) - batch_size + 1, batch_size):
            yield [dataset[i] for i in order[start : start + batch_size]]
        epoch += 1


class Source(Protocol):
    """Anything that can provide an HR colour image and its class masks."""

    name: str

    def load(self) -> tuple[np.ndarray, ClassMaskStack]: ...


@dataclass(frozen=True)
class FileSource:
    """Manifest entry read from disk on every access."""

    name: str
    item: ManifestItem
    classes: tuple[str, ...]

    def load(self) -> tuple[np.ndarray, ClassMaskStack]:
        color = read_color(self.item.image)
        mask_path = self.item.mask if self.item.mask is not None else self.item.masks
        assert mask_path is not None
        masks = read_masks(mask_path, self.classes)
        masks.check_aligned(color.shape[:2])
        return color, masks


@dataclass(frozen=True)
class ArraySource:
    """In-memory source."""

    name: str
    color: np.ndarray
    masks: ClassMaskStack

    def load(self) -> tuple[np.ndarray, ClassMaskStack]:
        return self.color, self.masks


def sources_from_manifest(manifest: DatasetManifest, split: str) -> list[FileSource]:
    """File-backed sources for one split of a manifest."""
    items = manifest.split(split)
    return [
        FileSource(name=item.image.stem, item=item, classes=manifest.classes) for item in items
    ]


@dataclass
class PatchBatch:
    """Network-ready batch in unit range: lr/hr (B, 1, P, P), masks (B, K, P, P)."""

    lr: torch.Tensor
    hr: torch.Tensor
    masks: torch.Tensor
    names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.lr.shape[0])


def make_training_sample(
    source: Source,
    deg: DegradationParams,
    aug: AugmentationParams,
    patch_size: int,
    rng: np.random.Generator,
) -> tuple[ImagePlane, ImagePlane, ClassMaskStack]:
    """Rotate, simulate and crop one random training patch."""
    color, masks = source.load()
    draw = draw_augmentation(aug, rng)
    color, masks = rotate(color, masks, draw.angle)
    lr, hr = _simulate_with(color, deg, draw)
    top, left = sample_window(hr.shape, patch_size, rng)
    return (
        lr.crop(top, left, patch_size),
        hr.crop(top, left, patch_size),
        masks.crop(top, left, patch_size),
    )


def collate(
    samples: Sequence[tuple[ImagePlane, ImagePlane, ClassMaskStack]], names: list[str]
) -> PatchBatch:
    """Stack samples into float32 tensors."""
    lr = np.stack([s[0].values for s in samples])[:, None]
    hr = np.stack([s[1].values for s in samples])[:, None]
    masks = np.stack([s[2].planes for s in samples])
    return PatchBatch(
        lr=torch.from_numpy(lr.astype(np.float32)),
        hr=torch.from_numpy(hr.astype(np.float32)),
        masks=torch.from_numpy(masks.astype(np.float32)),
        names=names,
    )


class StreamPosition(BaseModel):
    """Resumable position of a PatchBatchStream."""

    epoch: int = 0
    batch: int = 0


class PatchBatchStream:
    """Endless stream of augmented training batches.

    Epoch ``e`` is shuffled with a generator seeded by ``(seed, e)`` and batch
    ``b`` of that epoch is augmented with its own generator seeded by
    ``(seed, e, b)``, so the stream can resume at any position and each batch
    is reproducible whichever worker builds it.
    """

    def __init__(
        self,
        sources: Sequence[Source],
        deg: DegradationParams,
        aug: AugmentationParams,
        patch_size: int,
        batch_size: int,
        seed: int,
        workers: int = 0,
        start: StreamPosition | None = None,
    ) -> None:
        if not sources:
            raise ConfigurationError("training split is empty")
        if batch_size > len(sources):
            raise ConfigurationError(
                f"batch size {batch_size} exceeds {len(sources)} training images"
            )
        self.sources = list(sources)
        self.deg = deg
        self.aug = aug
        self.patch_size = patch_size
        self.batch_size = batch_size
        self.seed = seed
        self.position = (start or StreamPosition()).model_copy()
        self._executor = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None
        self._pending: deque[tuple[StreamPosition, Future[PatchBatch]]] = deque()
        self._prefetch = 2 * workers
        self._cursor = self.position.model_copy()

    @property
    def batches_per_epoch(self) -> int:
        """Full batches per epoch; the remainder is dropped."""
        return len(self.sources) // self.batch_size

    def epoch_order(self, epoch: int) -> list[list[int]]:
        """Source indices of every batch in ``epoch``."""
        rng = np.random.default_rng([self.seed, epoch])
        indices = list(range(len(self.sources)))
        return list(epoch_iterator(indices, self.batch_size, rng, epochs=1))

    def build_batch(self, position: StreamPosition) -> PatchBatch:
        """Build the batch at ``position`` from its own seeded generator."""
        indices = self.epoch_order(position.epoch)[position.batch]
        rng = np.random.default_rng([self.seed, position.epoch, position.batch])
        samples = [
            make_training_sample(
                self.sources[i], self.deg, self.aug, self.patch_size, rng
            )
            for i in indices
        ]
        return collate(samples, [self.sources[i].name for i in indices])

    def _advance(self, position: StreamPosition) -> StreamPosition:
        """Position of the next batch."""
        if position.batch + 1 >= self.batches_per_epoch:
            return StreamPosition(epoch=position.epoch + 1, batch=0)
        return StreamPosition(epoch=position.epoch, batch=position.batch + 1)

    def seek(self, position: StreamPosition) -> None:
        """Continue from ``position``; prefetched batches are discarded."""
        for _, future in self._pending:
            future.cancel()
        self._pending.clear()
        self.position = position.model_copy()
        self._cursor = position.model_copy()

    def __iter__(self) -> PatchBatchStream:
        return self

    def __next__(self) -> PatchBatch:
        if self._executor is None:
            batch = self.build_batch(self.position)
        else:
            while len(self._pending) < max(self._prefetch, 1):
                self._pending.append(
                    (self._cursor, self._executor.submit(self.build_batch, self._cursor))
                )
                self._cursor = self._advance(self._cursor)
            _, future = self._pending.popleft()
            batch = future.result()
        self.position = self._advance(self.position)
        return batch

    def close(self) -> None:
        """Shut down prefetch workers."""
        if self._executor is not None:
            self._executor.shutdown(wait=True, cancel_futures=True)


def build_validation_batch(
    sources: Sequence[Source], deg: DegradationParams, patch_size: int, seed: int
) -> PatchBatch:
    """Fixed validation set: one centred, unrotated patch per image.

    Channel choice is seeded per image; the contrast exponent is 1.
    """
    if not sources:
        raise ConfigurationError("validation split is empty")
    aug = AugmentationParams(rotation_range=(0.0, 0.0), exponent_range=(1.0, 1.0))
    samples = []
    for index, source in enumerate(sources):
        color, masks = source.load()
        rng = np.random.default_rng([seed, index])
        lr, hr = simulate_lr(color, deg, aug, rng)
        h, w = hr.shape
        if h < patch_size or w < patch_size:
            raise DimensionError(f"{source.name}: {h}x{w} smaller than patch {patch_size}")
        top, left = (h - patch_size) // 2, (w - patch_size) // 2
        samples.append(
            (lr.crop(top, left, patch_size), hr.crop(top, left, patch_size), masks.crop(top, left, patch_size))
        )
    return collate(samples, [s.name for s in sources])


@dataclass
class MaterializeReport:
    """Names written and per-entry errors of a materialize run."""

    written: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        """True when every entry was written."""
        return not self.failed


def materialize_dataset(
    sources: Sequence[Source],
    out_dir: Path,
    deg: DegradationParams,
    aug: AugmentationParams,
    seed: int,
) -> MaterializeReport:
    """Write full-size simulated pairs to ``lr/``, ``hr/`` and ``masks/<name>/``.

    Entry ``i`` uses a generator seeded by ``(seed, i)``; failures are recorded
    per entry and do not stop the remaining entries.
    """
    report = MaterializeReport()
    for index, source in enumerate(sources):
        try:
            color, masks = source.load()
            rng = np.random.default_rng([seed, index])
            draw = draw_augmentation(aug, rng)
            color, masks = rotate(color, masks, draw.angle)
            lr, hr = _simulate_with(color, deg, draw)
            write_plane(out_dir / "lr" / f"{source.name}.png", lr)
            write_plane(out_dir / "hr" / f"{source.name}.png", hr)
            write_masks(out_dir / "masks" / source.name, masks)
            report.written.append(source.name)
        except IrsrError as e:
            logger.error(f"{source.name}: {e}")
            report.failed[source.name] = str(e)

    logger.info(f"Materialized {len(report.written)} pairs, {len(report.failed)} failures")
    return report


