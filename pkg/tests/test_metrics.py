"""Tests for image-quality metrics and panels."""

import math

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from irsr.errors import DimensionError
from irsr.metrics import (
    class_overlay,
    comparison_panel,
    laplacian_energy,
    mse,
    psnr,
    quality_report,
    ssim,
)


@pytest.fixture
def textured(rng):
    return np.clip(ndimage.gaussian_filter(rng.uniform(size=(48, 40)), 1.0) * 1.5 - 0.25, 0, 1)


class TestPSNR:
    """Peak signal-to-noise ratio with unit peak."""

    def test_identical_is_infinite(self, textured):
        assert psnr(textured, textured) == math.inf

    def test_constant_offset(self, rng):
        a = rng.uniform(size=(16, 16)) * 0.9
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_formula(self, rng):
        a, b = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
        assert psnr(a, b) == pytest.approx(10 * math.log10(1 / np.mean((a - b) ** 2)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mse(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSSIM:
    """Structural similarity."""

    def test_identical_is_one(self, textured):
        assert ssim(textured, textured) == pytest.approx(1.0, abs=1e-12)

    def test_matches_scikit_image(self, textured, rng):
        metrics = pytest.importorskip("skimage.metrics")
        noisy = np.clip(textured + rng.normal(scale=0.05, size=textured.shape), 0, 1)
        expected = metrics.structural_similarity(
            textured,
            noisy,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
        )
        assert ssim(textured, noisy) == pytest.approx(expected, abs=1e-4)

    def test_degrades_with_noise(self, textured, rng):
        light = np.clip(textured + rng.normal(scale=0.02, size=textured.shape), 0, 1)
        heavy = np.clip(textured + rng.normal(scale=0.2, size=textured.shape), 0, 1)
        assert ssim(textured, heavy) < ssim(textured, light) < 1.0

    def test_too_small(self):
        with pytest.raises(DimensionError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestLaplacianEnergy:
    """High-frequency energy."""

    def test_constant_is_zero(self):
        assert laplacian_energy(np.full((8, 8), 0.4)) == 0.0

    def test_sharper_has_more_energy(self, textured):
        assert laplacian_energy(textured) > laplacian_energy(ndimage.gaussian_filter(textured, 2.0))

    def test_report(self, textured):
        report = quality_report(textured, textured)
        assert report.mse == 0.0
        assert report.ssim == pytest.approx(1.0)
        assert report.laplacian_energy == report.reference_laplacian_energy


class TestPanel:
    """Side-by-side comparison images."""

    def test_layout(self, tmp_path, textured):
        path = comparison_panel([textured] * 3, ["input", "SR", "reference"], tmp_path / "p.png", gap=4)
        with Image.open(path) as img:
            h, w = textured.shape
            assert img.size == (3 * w + 2 * 4, h + 14)

    def test_mismatched_planes(self, tmp_path):
        with pytest.raises(DimensionError):
            comparison_panel([np.zeros((4, 4)), np.zeros((4, 5))], ["a", "b"], tmp_path / "p.png")
        with pytest.raises(DimensionError):
            comparison_panel([np.zeros((4, 4))], ["a", "b"], tmp_path / "p.png")

    def test_class_overlay(self):
        overlay = class_overlay(np.array([[0, 1, 2]]), 3)
        np.testing.assert_allclose(overlay, [[0.0, 0.5, 1.0]])
