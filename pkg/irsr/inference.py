"""Super-resolution of real single-band absorbance images.

A band is normalized to its percentile value, converted to signed range and
run through the generator in overlapping tiles whose outputs are blended
with linear feather weights.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel

from irsr.checkpoint import atomic_write, checkpoint_load, file_sha256
from irsr.config import InferOptions
from irsr.errors import ConfigurationError, DegenerateInputError, DimensionError, InputError, ParameterError
from irsr.generator import Generator
from irsr.imaging import ClassMaskStack, ImagePlane, RangeTag, read_band, read_masks, write_plane

# Reported throughput of the reference GPU implementation, seconds per megapixel.
REFERENCE_S_PER_MPX = 1.0


def percentile_divisor(band: np.ndarray, percentile: float = 90.0) -> float:
    """Value at ``percentile`` with linear interpolation between order statistics."""
    arr = np.asarray(band, dtype=np.float64)
    if arr.size == 0:
        raise DimensionError("absorbance band is empty")
    if not np.all(np.isfinite(arr)):
        raise InputError("absorbance band contains non-finite values")
    if not 0.0 < percentile <= 100.0:
        raise ParameterError(f"percentile must lie in (0, 100], got {percentile}")
    if not np.any(arr):
        raise DegenerateInputError("absorbance band is all zeros")
    divisor = float(np.percentile(arr, percentile))
    if divisor <= 0.0:
        raise DegenerateInputError(f"{percentile}th percentile is {divisor:.4g}; cannot normalize")
    return divisor


def normalize_band(
    band: np.ndarray, percentile: float = 90.0, divisor: float | None = None
) -> ImagePlane:
    """Divide by the percentile value and clamp to [0, 1].

    A ``divisor`` already obtained from :func:`percentile_divisor` is used as is.
    """
    if divisor is None:
        divisor = percentile_divisor(band, percentile)
    elif not divisor > 0.0:
        raise DegenerateInputError(f"normalization divisor must be positive, got {divisor}")
    return ImagePlane(np.clip(np.asarray(band, dtype=np.float64) / divisor, 0.0, 1.0))


@dataclass(frozen=True)
class TileLayout:
    """Tile grid over a reflect-padded image."""

    tile: int
    overlap: int
    tiles_y: int
    tiles_x: int
    pad_top: int
    pad_bottom: int
    pad_left: int
    pad_right: int

    @property
    def stride(self) -> int:
        return self.tile - self.overlap

    @property
    def count(self) -> int:
        return self.tiles_y * self.tiles_x

    def origins(self) -> list[tuple[int, int]]:
        return [
            (ty * self.stride, tx * self.stride)
            for ty in range(self.tiles_y)
            for tx in range(self.tiles_x)
        ]


def plan_tiles(shape: tuple[int, int], tile: int, overlap: int) -> TileLayout:
    if overlap < 0 or 2 * overlap >= tile:
        raise ParameterError(f"overlap {overlap} must satisfy 0 <= overlap < tile/2 ({tile / 2})")
    stride = tile - overlap

    def axis(length: int) -> tuple[int, int, int]:
        n = 1 if length <= tile else math.ceil((length - tile) / stride) + 1
        pad = (n - 1) * stride + tile - length
        return n, pad // 2, pad - pad // 2

    ny, top, bottom = axis(shape[0])
    nx, left, right = axis(shape[1])
    return TileLayout(tile, overlap, ny, nx, top, bottom, left, right)


def feather_weights(tile: int, overlap: int) -> np.ndarray:
    """Separable linear ramp over the overlap band; strictly positive."""
    ramp = np.ones(tile, dtype=np.float64)
    if overlap > 0:
        up = np.arange(1, overlap + 1, dtype=np.float64) / (overlap + 1)
        ramp[:overlap] = up
        ramp[-overlap:] = up[::-1]
    return np.outer(ramp, ramp)


def _check_generator_inputs(gen: Generator, shape: tuple[int, int], masks: ClassMaskStack | None, tile: int) -> None:
    divisor = gen.cfg.size_divisor
    if tile % divisor:
        raise ParameterError(f"tile {tile} not divisible by {divisor}")
    if masks is not None:
        masks.check_aligned(shape)
        if masks.classes != gen.cfg.class_names:
            raise ConfigurationError(
                f"mask classes {masks.classes} differ from generator classes {gen.cfg.class_names}"
            )
    elif gen.cfg.conditional:
        raise InputError("C-GAN generator requires class masks")


def tile_and_stitch(
    img: ImagePlane,
    masks: ClassMaskStack | None,
    gen: Generator,
    tile: int = 256,
    overlap: int = 32,
    workers: int = 1,
) -> ImagePlane:
    """Run ``gen`` over overlapping tiles and blend the results.

    Returns a signed-range plane with the input's dimensions. Accumulation
    happens in tile order whatever the number of workers.
    """
    signed = img.to_signed()
    _check_generator_inputs(gen, signed.shape, masks if gen.cfg.conditional else None, tile)
    layout = plan_tiles(signed.shape, tile, overlap)
    use_masks = masks if gen.cfg.conditional else None

    pad = ((layout.pad_top, layout.pad_bottom), (layout.pad_left, layout.pad_right))
    values = np.pad(signed.values, pad, mode="reflect") if any(sum(p) for p in pad) else signed.values
    planes = None
    if use_masks is not None:
        planes = np.pad(use_masks.planes, ((0, 0), *pad), mode="reflect")

    was_training = gen.training
    gen.eval()

    def run(origin: tuple[int, int]) -> np.ndarray:
        y, x = origin
        lr = torch.from_numpy(values[y : y + tile, x : x + tile].astype(np.float32))[None, None]
        m = None
        if planes is not None:
            m = torch.from_numpy(planes[:, y : y + tile, x : x + tile].astype(np.float32))[None]
        with torch.no_grad():
            return gen(lr, m)[0, 0].double().numpy()

    origins = layout.origins()
    try:
        if workers > 1 and len(origins) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outputs = list(pool.map(run, origins))
        else:
            outputs = [run(o) for o in origins]
    finally:
        gen.train(was_training)

    h, w = signed.shape
    if layout.count == 1:
        out = outputs[0][layout.pad_top : layout.pad_top + h, layout.pad_left : layout.pad_left + w]
        return ImagePlane(out, RangeTag.SIGNED)

    weights = feather_weights(tile, overlap)
    acc = np.zeros(values.shape, dtype=np.float64)
    total = np.zeros(values.shape, dtype=np.float64)
    for (y, x), pred in zip(origins, outputs, strict=True):
        acc[y : y + tile, x : x + tile] += pred * weights
        total[y : y + tile, x : x + tile] += weights
    out = (acc / total)[layout.pad_top : layout.pad_top + h, layout.pad_left : layout.pad_left + w]
    return ImagePlane(out, RangeTag.SIGNED)


class InferenceReport(BaseModel):
    """Sidecar written next to every SR output."""

    band: Path
    masks: Path | None
    output: Path
    checkpoint: Path
    checkpoint_sha256: str
    mode: str
    height: int
    width: int
    percentile: float
    divisor: float
    tile: int
    overlap: int
    tiles_y: int
    tiles_x: int
    workers: int
    elapsed_s: float
    megapixels: float
    s_per_mpx: float
    reference_s_per_mpx: float = REFERENCE_S_PER_MPX


def sidecar_path(out_path: Path) -> Path:
    return out_path.with_name(out_path.stem + ".metrics.json")


def infer(
    band_path: Path,
    mask_path: Path | None,
    checkpoint_path: Path,
    out_path: Path,
    options: InferOptions | None = None,
) -> InferenceReport:
    """Load, normalize, super-resolve and write one absorbance band."""
    options = options or InferOptions()
    state = checkpoint_load(checkpoint_path)
    gen = state.generator
    cfg = gen.cfg

    if options.class_names is not None and tuple(options.class_names) != cfg.class_names:
        raise ConfigurationError(
            f"mask class ordering {tuple(options.class_names)} differs from checkpoint ordering {cfg.class_names}"
        )

    band = read_band(band_path, options.band_index)
    divisor = percentile_divisor(band, options.percentile)
    plane = normalize_band(band, divisor=divisor)

    masks = None
    if cfg.conditional:
        if mask_path is None:
            raise InputError("C-GAN checkpoint needs class masks (--masks)")
        masks = read_masks(mask_path, cfg.class_names)
        masks.check_aligned(plane.shape)
    elif mask_path is not None:
        logger.info("U-GAN checkpoint: class masks ignored")

    layout = plan_tiles(plane.shape, options.tile, options.overlap)
    start = time.perf_counter()
    sr = tile_and_stitch(plane, masks, gen, options.tile, options.overlap, options.workers)
    elapsed = time.perf_counter() - start
    write_plane(out_path, sr.to_unit())

    megapixels = plane.height * plane.width / 1e6
    report = InferenceReport(
        band=band_path,
        masks=mask_path,
        output=out_path,
        checkpoint=checkpoint_path,
        checkpoint_sha256=file_sha256(checkpoint_path),
        mode=cfg.mode.value,
        height=plane.height,
        width=plane.width,
        percentile=options.percentile,
        divisor=divisor,
        tile=options.tile,
        overlap=options.overlap,
        tiles_y=layout.tiles_y,
        tiles_x=layout.tiles_x,
        workers=options.workers,
        elapsed_s=elapsed,
        megapixels=megapixels,
        s_per_mpx=elapsed / megapixels,
    )
    atomic_write(sidecar_path(out_path), report.model_dump_json(indent=2).encode("utf-8"))
    logger.info(
        f"SR {plane.height}x{plane.width} in {elapsed:.2f}s ({report.s_per_mpx:.2f} s/MPx, "
        f"reference {REFERENCE_S_PER_MPX:.0f} s/MPx) -> {out_path}"
    )
    return report
