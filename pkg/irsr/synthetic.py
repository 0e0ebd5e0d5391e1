"""Procedural stained-tissue images with class masks.

Each image is a Voronoi partition whose cells are labelled with a class; every
class gets its own texture (fibres, nuclei-like blobs or fine speckle) which is
rendered to RGB through Beer-Lambert stain absorption.
"""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import numpy as np
from loguru import logger
from PIL import Image
from scipy import ndimage
from scipy.spatial import cKDTree

from irsr.config import DEFAULT_CLASSES, DatasetManifest, ManifestItem
from irsr.errors import ParameterError
from irsr.imaging import ClassMaskStack, write_color

# Optical-density vectors of hematoxylin and eosin (RGB).
HEMATOXYLIN = np.array([0.65, 0.70, 0.29])
EOSIN = np.array([0.07, 0.99, 0.11])


def voronoi_labels(
    shape: tuple[int, int], cells: int, num_classes: int, rng: np.random.Generator
) -> np.ndarray:
    """Class index per pixel from a random Voronoi partition."""
    h, w = shape
    seeds = rng.uniform((0, 0), (h, w), size=(cells, 2))
    cell_class = rng.integers(num_classes, size=cells)
    if cells >= num_classes:
        cell_class[:num_classes] = rng.permutation(num_classes)
    yy, xx = np.mgrid[0:h, 0:w]
    _, nearest = cKDTree(seeds).query(np.column_stack([yy.ravel(), xx.ravel()]))
    return cell_class[nearest].reshape(h, w)


def fibre_texture(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(4.0, 9.0)
    wobble = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=6.0) * 12.0
    phase = (xx * np.cos(theta) + yy * np.sin(theta) + wobble) * 2 * np.pi / period
    return 0.5 + 0.5 * np.sin(phase)


def nuclei_texture(shape: tuple[int, int], rng: np.random.Generator, density: float = 0.004) -> np.ndarray:
    impulses = (rng.uniform(size=shape) < density).astype(np.float64)
    blobs = ndimage.gaussian_filter(impulses, sigma=rng.uniform(1.2, 2.0))
    return np.clip(blobs / max(blobs.max(), 1e-12) * 1.5, 0.0, 1.0)


def speckle_texture(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    speckle = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=1.0)
    return np.clip(0.5 + speckle, 0.0, 1.0)


def synth_tissue(
    size: int,
    rng: np.random.Generator,
    classes: Sequence[str] = DEFAULT_CLASSES,
    cells: int = 12,
) -> tuple[np.ndarray, ClassMaskStack]:
    """One (size, size, 3) unit-range RGB image and its class masks."""
    if size < 8:
        raise ParameterError(f"synthetic image size must be >= 8, got {size}")
    shape = (size, size)
    labels = voronoi_labels(shape, cells, len(classes), rng)

    fibres = fibre_texture(shape, rng)
    nuclei = nuclei_texture(shape, rng)
    speckle = speckle_texture(shape, rng)

    # Per-class (hematoxylin, eosin) densities; classes beyond three reuse the cycle.
    hema = np.zeros(shape)
    eosin = np.zeros(shape)
    for k in range(len(classes)):
        region = labels == k
        kind = k % 3
        if kind == 0:
            hema[region] = 0.1 * speckle[region]
            eosin[region] = 0.3 + 0.9 * fibres[region]
        elif kind == 1:
            hema[region] = 0.25 + 1.6 * nuclei[region]
            eosin[region] = 0.4 + 0.2 * speckle[region]
        else:
            hema[region] = 0.05 + 0.15 * speckle[region]
            eosin[region] = 0.1 + 0.2 * speckle[region]

    density = hema[..., None] * HEMATOXYLIN + eosin[..., None] * EOSIN
    color = np.exp(-density)
    return np.clip(color, 0.0, 1.0), ClassMaskStack.from_index_map(labels, classes)


def write_synthetic_dataset(
    out_dir: Path,
    count: int,
    size: int = 128,
    seed: int = 0,
    val_fraction: float = 0.25,
    classes: Sequence[str] = DEFAULT_CLASSES,
) -> Path:
    """Write ``images/``, indexed ``masks/`` and a ``manifest.json``; returns the manifest path.

    Image ``i`` is drawn from a generator seeded by ``(seed, i)``.
    """
    if count < 1:
        raise ParameterError(f"image count must be >= 1, got {count}")
    if not 0.0 <= val_fraction < 1.0:
        raise ParameterError(f"val_fraction must lie in [0, 1), got {val_fraction}")

    n_val = int(round(count * val_fraction))
    items = []
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(count):
        color, masks = synth_tissue(size, np.random.default_rng([seed, i]), classes)
        name = f"tissue_{i:04d}"
        write_color(out_dir / "images" / f"{name}.png", color)
        Image.fromarray(masks.index_map().astype(np.uint8)).save(out_dir / "masks" / f"{name}.png")
        items.append(
            ManifestItem(
                image=Path("images") / f"{name}.png",
                mask=Path("masks") / f"{name}.png",
                split="val" if i >= count - n_val else "train",
            )
        )

    manifest = DatasetManifest(classes=tuple(classes), items=items)
    path = out_dir / "manifest.json"
    path.write_text(manifest.model_dump_json(indent=2, exclude_none=True))
    logger.info(f"Wrote {count} synthetic images ({n_val} val) to {out_dir}")
    return path
