"""Pixel, perceptual and adversarial losses.

Phase 1 minimizes the pixel MSE alone. Phase 2 minimizes
``alpha * perceptual + gamma * adversarial`` for the generator, while the
discriminator minimizes ``-log D(real) - log(1 - D(fake))``.
"""

from __future__ import annotations

import math
from pathlib import Path

import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

from irsr.config import ExtractorConfig, LossWeights
from irsr.errors import ConfigurationError, DimensionError, InputError, NumericError

PROB_EPS = 1e-7
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
# features[:35] of VGG-19 ends at its last convolution (conv5_4).
VGG19_LAST_CONV = 35

Scalar = torch.Tensor | float


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(target: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    """Mean over all pixels of the squared difference."""
    _check_same_shape(target, generated)
    return F.mse_loss(generated, target)


class FeatureExtractor(nn.Module):
    """Frozen convolutional feature map used by the perceptual loss.

    Grayscale signed-range input is optionally replicated to three channels,
    shifted to unit range and ImageNet-normalized before ``features``.
    """

    def __init__(
        self,
        features: nn.Module,
        *,
        name: str,
        min_size: int = 1,
        replicate: bool = True,
        to_unit: bool = False,
        imagenet_normalize: bool = False,
    ) -> None:
        super().__init__()
        self.features = features
        self.name = name
        self.min_size = min_size
        self.replicate = replicate
        self.to_unit = to_unit
        self.imagenet_normalize = imagenet_normalize
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> FeatureExtractor:
        # Always evaluated with fixed statistics.
        return super().train(False)

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        if self.to_unit:
            x = (x + 1.0) / 2.0
        if self.replicate:
            x = x.expand(-1, 3, -1, -1) if x.shape[1] == 1 else x
        if self.imagenet_normalize:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if min(x.shape[-2:]) < self.min_size:
            raise DimensionError(
                f"{self.name} extractor needs at least {self.min_size}px, got {tuple(x.shape[-2:])}"
            )
        return self.features(self.preprocess(x))

    @classmethod
    def identity(cls) -> FeatureExtractor:
        return cls(nn.Identity(), name="identity", replicate=False)

    @classmethod
    def random(cls, seed: int = 0, layers: int = 3, width: int = 16) -> FeatureExtractor:
        """Fixed-seed random conv stack; stands in for pretrained weights in tests."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            modules: list[nn.Module] = []
            in_channels = 3
            for _ in range(layers):
                modules += [nn.Conv2d(in_channels, width, kernel_size=3, padding=1), nn.ReLU()]
                in_channels = width
            features = nn.Sequential(*modules[:-1])
        return cls(features, name=f"random{layers}x{width}", replicate=True)

    @classmethod
    def vgg19(cls, weights_path: Path) -> FeatureExtractor:
        """VGG-19 up to its last convolution, loaded from a local weight file."""
        from torchvision.models import vgg19

        if not weights_path.exists():
            raise ConfigurationError(f"feature extractor weights not found: {weights_path}")
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        state = {k.removeprefix("features."): v for k, v in state.items() if not k.startswith("classifier.")}
        features = vgg19(weights=None).features[:VGG19_LAST_CONV]
        keep = {k: v for k, v in state.items() if int(k.split(".")[0]) < VGG19_LAST_CONV}
        missing, _ = features.load_state_dict(keep, strict=False)
        if missing:
            raise ConfigurationError(f"{weights_path} lacks VGG-19 layers: {missing[:4]}")
        logger.info(f"Loaded VGG-19 feature extractor from {weights_path}")
        return cls(features, name="vgg19", min_size=16, replicate=True, to_unit=True, imagenet_normalize=True)


def build_extractor(cfg: ExtractorConfig) -> FeatureExtractor:
    if cfg.kind == "identity":
        return FeatureExtractor.identity()
    if cfg.kind == "random":
        return FeatureExtractor.random(cfg.seed, cfg.layers, cfg.width)
    assert cfg.weights_path is not None
    return FeatureExtractor.vgg19(cfg.weights_path)


def perceptual_loss(
    target: torch.Tensor, generated: torch.Tensor, fx: FeatureExtractor
) -> torch.Tensor:
    """MSE of feature maps, averaged over channels and the feature grid."""
    _check_same_shape(target, generated)
    return F.mse_loss(fx(generated), fx(target))


def _as_probability(p: Scalar, name: str) -> torch.Tensor:
    t = p if isinstance(p, torch.Tensor) else torch.as_tensor(p, dtype=torch.float64)
    if torch.isnan(t).any() or (t < 0).any() or (t > 1).any():
        raise InputError(f"{name} must be a probability in [0, 1]")
    return t.clamp(PROB_EPS, 1.0 - PROB_EPS)


def adv_gen_loss(d_out: Scalar) -> torch.Tensor:
    """``-log D(G(x))`` averaged over the batch."""
    return -torch.log(_as_probability(d_out, "d_out")).mean()


def adv_disc_loss(d_real: Scalar, d_fake: Scalar) -> torch.Tensor:
    """``-log D(real) - log(1 - D(fake))`` averaged over the batch."""
    real = _as_probability(d_real, "d_real")
    fake = _as_probability(d_fake, "d_fake")
    return -torch.log(real).mean() - torch.log1p(-fake).mean()


def _is_finite(v: Scalar) -> bool:
    if isinstance(v, torch.Tensor):
        return bool(torch.isfinite(v).all())
    return math.isfinite(v)


def total_loss(l_vgg: Scalar, l_adv_g: Scalar, w: LossWeights) -> Scalar:
    """Weighted phase-2 generator loss; carries no pixel MSE term."""
    if not (_is_finite(l_vgg) and _is_finite(l_adv_g)):
        raise NumericError(f"non-finite loss terms: perceptual={l_vgg}, adversarial={l_adv_g}")
    return w.alpha * l_vgg + w.gamma * l_adv_g
