"""Tests for band normalization, tiled inference and the infer pipeline."""

import json

import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

from irsr.checkpoint import TrainingState, checkpoint_save
from irsr.config import DEFAULT_CLASSES, GeneratorConfig, InferOptions, NetworkMode
from irsr.errors import ConfigurationError, DegenerateInputError, DimensionError, InputError, ParameterError
from irsr.generator import build_generator
from irsr.imaging import ClassMaskStack, ImagePlane, RangeTag, read_plane
from irsr.inference import (
    feather_weights,
    infer,
    normalize_band,
    percentile_divisor,
    plan_tiles,
    sidecar_path,
    tile_and_stitch,
)

from tests.conftest import toy_generator_config


class HalfGain(nn.Module):
    """Pointwise stand-in generator: 0.5 * x."""

    def __init__(self):
        super().__init__()
        self.cfg = toy_generator_config(NetworkMode.UGAN)

    def forward(self, lr, masks=None):
        return 0.5 * lr


def random_masks(shape, seed=0) -> ClassMaskStack:
    index = np.random.default_rng(seed).integers(0, len(DEFAULT_CLASSES), size=shape)
    return ClassMaskStack.from_index_map(index, DEFAULT_CLASSES)


@pytest.fixture
def plane(rng):
    return ImagePlane(rng.uniform(size=(40, 36)))


class TestNormalize:
    """Percentile normalization of raw absorbance."""

    def test_constant_band(self):
        out = normalize_band(np.full((4, 5), 0.7))
        np.testing.assert_allclose(out.values, 1.0)

    def test_linear_interpolation(self):
        band = np.arange(1.0, 11.0).reshape(2, 5)
        assert percentile_divisor(band) == pytest.approx(9.1)
        out = normalize_band(band)
        assert out.values.max() == 1.0
        assert out.values[0, 0] == pytest.approx(1 / 9.1)

    def test_negative_values_clamped(self):
        out = normalize_band(np.array([[-1.0, 2.0], [4.0, 4.0]]), percentile=100)
        assert out.values[0, 0] == 0.0
        assert out.values[0, 1] == pytest.approx(0.5)

    @pytest.mark.parametrize(
        "band, error",
        [
            (np.zeros((3, 3)), DegenerateInputError),
            (np.array([[-2.0, -1.0], [-1.0, 0.0]]), DegenerateInputError),
            (np.array([[1.0, np.nan]]), InputError),
            (np.zeros((0, 3)), DimensionError),
        ],
    )
    def test_rejects(self, band, error):
        with pytest.raises(error):
            normalize_band(band)

    def test_precomputed_divisor(self):
        band = np.arange(1.0, 11.0).reshape(2, 5)
        np.testing.assert_array_equal(
            normalize_band(band, divisor=percentile_divisor(band)).values, normalize_band(band).values
        )
        assert normalize_band(band, divisor=20.0).values.max() == pytest.approx(0.5)
        with pytest.raises(DegenerateInputError):
            normalize_band(band, divisor=0.0)

    @pytest.mark.parametrize("percentile", [0.0, -5.0, 100.5])
    def test_percentile_range(self, percentile):
        with pytest.raises(ParameterError):
            percentile_divisor(np.ones((2, 2)), percentile)


class TestTilePlan:
    """Tile grid and feather weights."""

    def test_single_tile(self):
        layout = plan_tiles((10, 16), tile=16, overlap=4)
        assert layout.count == 1
        assert (layout.pad_top, layout.pad_bottom, layout.pad_left, layout.pad_right) == (3, 3, 0, 0)

    def test_grid_covers_image(self):
        layout = plan_tiles((50, 70), tile=16, overlap=4)
        assert layout.stride == 12
        assert layout.tiles_y == 4
        assert layout.tiles_x == 6
        padded_h = 50 + layout.pad_top + layout.pad_bottom
        padded_w = 70 + layout.pad_left + layout.pad_right
        ys, xs = zip(*layout.origins(), strict=True)
        assert max(ys) + 16 == padded_h
        assert max(xs) + 16 == padded_w

    @pytest.mark.parametrize("overlap", [-1, 8, 12])
    def test_overlap_bounds(self, overlap):
        with pytest.raises(ParameterError):
            plan_tiles((32, 32), tile=16, overlap=overlap)

    def test_feather_positive_and_symmetric(self):
        w = feather_weights(16, 4)
        assert w.min() > 0
        assert w[8, 8] == 1.0
        np.testing.assert_allclose(w, w[::-1, ::-1])
        np.testing.assert_allclose(w[8, :4], [0.2, 0.4, 0.6, 0.8])


class TestTileAndStitch:
    """Blended tiled generator output."""

    def test_single_tile_matches_forward(self, make_generator):
        gen = make_generator(NetworkMode.CGAN, seed=1).eval()
        img = ImagePlane(np.random.default_rng(0).uniform(size=(16, 16)))
        masks = random_masks((16, 16))
        out = tile_and_stitch(img, masks, gen, tile=16, overlap=4)
        x = torch.from_numpy(img.to_signed().values.astype(np.float32))[None, None]
        m = torch.from_numpy(masks.planes.astype(np.float32))[None]
        with torch.no_grad():
            expected = gen(x, m)[0, 0].double().numpy()
        assert out.range_tag is RangeTag.SIGNED
        np.testing.assert_allclose(out.values, np.clip(expected, -1, 1), atol=1e-6)

    def test_pointwise_generator_stitches_exactly(self, rng):
        img = ImagePlane(rng.uniform(size=(50, 70)))
        out = tile_and_stitch(img, None, HalfGain(), tile=16, overlap=4)
        expected = 0.5 * img.to_signed().values.astype(np.float32)
        assert out.shape == (50, 70)
        np.testing.assert_allclose(out.values, expected, atol=1e-6)

    def test_small_image_keeps_shape(self, make_generator):
        gen = make_generator(NetworkMode.UGAN)
        out = tile_and_stitch(ImagePlane(np.full((10, 12), 0.5)), None, gen, tile=16, overlap=4)
        assert out.shape == (10, 12)

    def test_workers_do_not_change_output(self, make_generator, plane):
        gen = make_generator(NetworkMode.CGAN, seed=2)
        masks = random_masks(plane.shape, seed=3)
        serial = tile_and_stitch(plane, masks, gen, tile=16, overlap=4, workers=1)
        threaded = tile_and_stitch(plane, masks, gen, tile=16, overlap=4, workers=3)
        assert np.array_equal(serial.values, threaded.values)

    def test_masks_change_output(self, make_generator, plane):
        gen = make_generator(NetworkMode.CGAN, seed=2)
        a = tile_and_stitch(plane, random_masks(plane.shape, seed=0), gen, tile=16, overlap=4)
        b = tile_and_stitch(plane, random_masks(plane.shape, seed=1), gen, tile=16, overlap=4)
        assert np.abs(a.values - b.values).max() > 1e-4

    def test_ugan_ignores_masks(self, make_generator, plane):
        gen = make_generator(NetworkMode.UGAN)
        a = tile_and_stitch(plane, random_masks(plane.shape, seed=0), gen, tile=16, overlap=4)
        b = tile_and_stitch(plane, None, gen, tile=16, overlap=4)
        assert np.array_equal(a.values, b.values)

    def test_restores_training_mode(self, make_generator, plane):
        gen = make_generator(NetworkMode.CGAN, seed=2)
        masks = random_masks(plane.shape, seed=3)
        gen.train()
        first = tile_and_stitch(plane, masks, gen, tile=16, overlap=4)
        assert gen.training
        gen.eval()
        second = tile_and_stitch(plane, masks, gen, tile=16, overlap=4)
        assert not gen.training
        assert np.array_equal(first.values, second.values)

    def test_input_errors(self, make_generator, plane):
        cgan = make_generator(NetworkMode.CGAN)
        with pytest.raises(InputError):
            tile_and_stitch(plane, None, cgan, tile=16, overlap=4)
        with pytest.raises(DimensionError):
            tile_and_stitch(plane, random_masks((40, 30)), cgan, tile=16, overlap=4)
        with pytest.raises(ParameterError):
            tile_and_stitch(plane, random_masks(plane.shape), cgan, tile=17, overlap=4)
        renamed = ClassMaskStack(("a", "b", "c"), random_masks(plane.shape).planes)
        with pytest.raises(ConfigurationError):
            tile_and_stitch(plane, renamed, cgan, tile=16, overlap=4)


SEAM_SIZE = 256
SEAM_TILE = 96
SEAM_OVERLAP = 16


def three_level_generator(seed: int = 0):
    cfg = GeneratorConfig(mode=NetworkMode.CGAN, channel_schedule=(4, 8, 8, 16), cond_hidden=4)
    return build_generator(cfg, seed=seed).eval()


def forward(gen, values: np.ndarray, masks: ClassMaskStack) -> np.ndarray:
    x = torch.from_numpy(values.astype(np.float32))[None, None]
    m = torch.from_numpy(masks.planes.astype(np.float32))[None]
    with torch.no_grad():
        return gen(x, m)[0, 0].double().numpy()


def max_step(values: np.ndarray) -> float:
    return max(np.abs(np.diff(values, axis=0)).max(), np.abs(np.diff(values, axis=1)).max())


def max_seam_step(values: np.ndarray, starts: list[int], overlap: int) -> float:
    """Largest neighbour difference inside or at the edge of an overlap band."""
    steps = [k for s in starts if s > 0 for k in range(s - 1, s + overlap)]
    dx = np.abs(np.diff(values, axis=1))[:, steps]
    dy = np.abs(np.diff(values, axis=0))[steps, :]
    return max(dx.max(), dy.max())


class TestSeams:
    """Seams of a 256x256 image tiled by 96 with a 16 pixel overlap."""

    @pytest.fixture
    def layout(self):
        layout = plan_tiles((SEAM_SIZE, SEAM_SIZE), SEAM_TILE, SEAM_OVERLAP)
        assert (layout.tiles_y, layout.tiles_x, layout.pad_top, layout.pad_left) == (3, 3, 0, 0)
        return layout

    @pytest.fixture
    def starts(self, layout):
        return sorted({x for _, x in layout.origins()})

    def test_smooth_image_against_full_forward(self, layout, starts):
        gen = three_level_generator(seed=4)
        yy, xx = np.mgrid[0:SEAM_SIZE, 0:SEAM_SIZE]
        img = ImagePlane(0.5 + 0.4 * np.sin(2 * np.pi * xx / 64) * np.cos(2 * np.pi * yy / 90))
        index = (xx >= SEAM_SIZE // 2).astype(np.int64)
        masks = ClassMaskStack.from_index_map(index, DEFAULT_CLASSES)

        out = tile_and_stitch(img, masks, gen, tile=SEAM_TILE, overlap=SEAM_OVERLAP)
        full = forward(gen, img.to_signed().values, masks)
        tiles = [
            forward(
                gen,
                img.to_signed().values[y : y + SEAM_TILE, x : x + SEAM_TILE],
                ClassMaskStack(DEFAULT_CLASSES, masks.planes[:, y : y + SEAM_TILE, x : x + SEAM_TILE]),
            )
            for y, x in layout.origins()
        ]
        spread = max(t.max() for t in tiles) - min(t.min() for t in tiles)
        seam = max_seam_step(out.values, starts, SEAM_OVERLAP)

        # Blending adds at most spread / (overlap + 1) to the steps of the tiles.
        assert seam <= max(max_step(t) for t in tiles) + spread / (SEAM_OVERLAP + 1) + 1e-6
        assert seam <= max_step(full) + 2.0 / (SEAM_OVERLAP + 1)

    def test_constant_input_is_translation_invariant(self, layout, starts):
        gen = three_level_generator(seed=5)
        img = ImagePlane(np.full((SEAM_SIZE, SEAM_SIZE), 0.6))
        masks = ClassMaskStack.from_index_map(np.ones((SEAM_SIZE, SEAM_SIZE), dtype=np.int64), DEFAULT_CLASSES)

        out = tile_and_stitch(img, masks, gen, tile=SEAM_TILE, overlap=SEAM_OVERLAP).values
        tile = forward(
            gen,
            img.to_signed().values[:SEAM_TILE, :SEAM_TILE],
            ClassMaskStack(DEFAULT_CLASSES, masks.planes[:, :SEAM_TILE, :SEAM_TILE]),
        )
        stride = layout.stride

        # Every tile sees the same input, so each seam repeats one stride later.
        np.testing.assert_allclose(out[:, stride : 2 * stride], out[:, 2 * stride : 3 * stride], atol=1e-6)
        np.testing.assert_allclose(out[stride : 2 * stride, :], out[2 * stride : 3 * stride, :], atol=1e-6)
        spread = tile.max() - tile.min()
        assert max_seam_step(out, starts, SEAM_OVERLAP) <= max_step(tile) + spread / (SEAM_OVERLAP + 1) + 1e-6


class TestInfer:
    """File-to-file super-resolution with a metrics sidecar."""

    @pytest.fixture
    def band_path(self, tmp_path, rng):
        path = tmp_path / "band.npy"
        np.save(path, rng.uniform(0.0, 2.0, size=(40, 36)))
        return path

    @pytest.fixture
    def mask_path(self, tmp_path):
        path = tmp_path / "masks.png"
        index = np.random.default_rng(5).integers(0, 3, size=(40, 36)).astype(np.uint8)
        Image.fromarray(index).save(path)
        return path

    def _checkpoint(self, make_generator, tmp_path, mode):
        return checkpoint_save(TrainingState(generator=make_generator(mode)), tmp_path / f"{mode.value}.ckpt")

    def test_ugan_end_to_end(self, make_generator, tmp_path, band_path):
        ckpt = self._checkpoint(make_generator, tmp_path, NetworkMode.UGAN)
        out = tmp_path / "out" / "sr.tif"
        report = infer(band_path, None, ckpt, out, InferOptions(tile=16, overlap=4))
        assert read_plane(out).shape == (40, 36)
        assert (report.tiles_y, report.tiles_x) == (3, 3)
        assert report.mode == NetworkMode.UGAN.value
        sidecar = json.loads(sidecar_path(out).read_text())
        assert sidecar["checkpoint_sha256"] == report.checkpoint_sha256
        assert sidecar["divisor"] == pytest.approx(report.divisor)
        assert report.s_per_mpx > 0

    def test_cgan_end_to_end(self, make_generator, tmp_path, band_path, mask_path):
        ckpt = self._checkpoint(make_generator, tmp_path, NetworkMode.CGAN)
        out = tmp_path / "sr.png"
        infer(band_path, mask_path, ckpt, out, InferOptions(tile=16, overlap=4, workers=2))
        assert read_plane(out).shape == (40, 36)
        assert sidecar_path(out).name == "sr.metrics.json"

    def test_cgan_needs_masks(self, make_generator, tmp_path, band_path):
        ckpt = self._checkpoint(make_generator, tmp_path, NetworkMode.CGAN)
        with pytest.raises(InputError):
            infer(band_path, None, ckpt, tmp_path / "sr.tif", InferOptions(tile=16, overlap=4))
        assert not (tmp_path / "sr.tif").exists()

    def test_class_ordering_mismatch(self, make_generator, tmp_path, band_path, mask_path):
        ckpt = self._checkpoint(make_generator, tmp_path, NetworkMode.CGAN)
        options = InferOptions(tile=16, overlap=4, class_names=tuple(reversed(DEFAULT_CLASSES)))
        with pytest.raises(ConfigurationError):
            infer(band_path, mask_path, ckpt, tmp_path / "sr.tif", options)

    def test_degenerate_band(self, make_generator, tmp_path):
        ckpt = self._checkpoint(make_generator, tmp_path, NetworkMode.UGAN)
        band = tmp_path / "zeros.npy"
        np.save(band, np.zeros((16, 16)))
        with pytest.raises(DegenerateInputError):
            infer(band, None, ckpt, tmp_path / "sr.tif", InferOptions(tile=16, overlap=4))
