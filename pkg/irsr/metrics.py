"""Image-quality metrics and comparison panels.

All metrics work on unit-range luminance planes with peak 1.0.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel
from scipy import ndimage

from irsr.errors import DimensionError

SSIM_SIGMA = 1.5
# truncate * sigma = 5 gives the standard 11x11 window.
SSIM_TRUNCATE = 3.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class QualityReport(BaseModel):
    """Metrics of one SR image against its reference."""

    mse: float
    psnr: float
    ssim: float
    laplacian_energy: float
    reference_laplacian_energy: float


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; ``inf`` for identical images."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / err)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Statistics use population covariance; a 5-pixel border is excluded from
    the mean.
    """
    a, b = _check_pair(a, b)
    if a.ndim != 2:
        raise DimensionError(f"ssim expects 2-D planes, got {a.shape}")
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    if min(a.shape) < 2 * pad + 1:
        raise DimensionError(f"ssim needs planes of at least {2 * pad + 1}px, got {a.shape}")

    def blur(x: np.ndarray) -> np.ndarray:
        return ndimage.gaussian_filter(x, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(s[pad:-pad, pad:-pad].mean())


def laplacian_energy(img: np.ndarray) -> float:
    """Mean squared Laplacian response, a high-frequency energy measure."""
    img = np.asarray(img, dtype=np.float64)
    return float(np.mean(ndimage.laplace(img, mode="reflect") ** 2))


def quality_report(sr: np.ndarray, ref: np.ndarray) -> QualityReport:
    return QualityReport(
        mse=mse(sr, ref),
        psnr=psnr(sr, ref),
        ssim=ssim(sr, ref),
        laplacian_energy=laplacian_energy(sr),
        reference_laplacian_energy=laplacian_energy(ref),
    )


def comparison_panel(
    planes: Sequence[np.ndarray],
    labels: Sequence[str],
    path: Path,
    gap: int = 4,
) -> Path:
    """Side-by-side 8-bit panel of unit-range planes with a caption strip."""
    if len(planes) != len(labels):
        raise DimensionError(f"{len(planes)} planes for {len(labels)} labels")
    shapes = {np.asarray(p).shape for p in planes}
    if len(shapes) != 1:
        raise DimensionError(f"panel planes differ in size: {sorted(shapes)}")
    h, w = shapes.pop()
    caption = 14

    canvas = Image.new("L", (len(planes) * w + (len(planes) - 1) * gap, h + caption), color=255)
    draw = ImageDraw.Draw(canvas)
    for i, (plane, label) in enumerate(zip(planes, labels, strict=True)):
        tile = np.round(np.clip(np.asarray(plane, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
        x = i * (w + gap)
        canvas.paste(Image.fromarray(tile), (x, caption))
        draw.text((x + 2, 1), label, fill=0)

    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path, format="PNG")
    return path


def class_overlay(index_map: np.ndarray, num_classes: int) -> np.ndarray:
    """Class indices spread over [0, 1] for display next to images."""
    return np.asarray(index_map, dtype=np.float64) / max(num_classes - 1, 1)
