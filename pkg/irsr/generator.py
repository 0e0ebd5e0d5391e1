"""U-Net / Res-Net hybrid generator.

Down-sampling blocks (conv, residual block, max-pool) feed a bridge block
(conv, residual block, bilinear up-sampling); up-sampling blocks concatenate
the skip features of the matching level before their residual block. A final
3x3 convolution and tanh produce a signed-range image. In C-GAN mode every
normalization layer is class-conditional; in U-GAN mode it is plain batch
normalization and masks are ignored.

Images cross the network boundary here: storage tensors are unit range,
the network works in signed range.
"""

from __future__ import annotations

from collections.abc import Mapping
from typing import Any

import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

from irsr.cond_norm import ConditionalNorm, MaskPyramid, PlainNorm
from irsr.config import GeneratorConfig, parse_config
from irsr.errors import DimensionError, InputError

Norm = ConditionalNorm | PlainNorm


def conv3x3(in_channels: int, out_channels: int) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=1, padding=1)


def make_norm(cfg: GeneratorConfig, channels: int) -> Norm:
    if cfg.conditional:
        return ConditionalNorm(channels, cfg.num_classes, cfg.cond_hidden)
    return PlainNorm(channels)


class ResidualBlock(nn.Module):
    """conv -> norm -> ReLU -> conv -> norm, identity skip, ReLU after the sum."""

    def __init__(self, cfg: GeneratorConfig, channels: int) -> None:
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.norm1 = make_norm(cfg, channels)
        self.conv2 = conv3x3(channels, channels)
        self.norm2 = make_norm(cfg, channels)

    def forward(self, x: torch.Tensor, masks: MaskPyramid | None) -> torch.Tensor:
        h = F.relu(self.norm1(self.conv1(x), masks))
        h = self.norm2(self.conv2(h), masks)
        return F.relu(x + h)


class DownBlock(nn.Module):
    """Returns the pooled output and the pre-pool features used as skip."""

    def __init__(self, cfg: GeneratorConfig, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.conv = conv3x3(in_channels, out_channels)
        self.res = ResidualBlock(cfg, out_channels)
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)

    def forward(
        self, x: torch.Tensor, masks: MaskPyramid | None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        skip = self.res(F.relu(self.conv(x)), masks)
        return self.pool(skip), skip


class BridgeBlock(nn.Module):
    def __init__(self, cfg: GeneratorConfig, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.conv = conv3x3(in_channels, out_channels)
        self.res = ResidualBlock(cfg, out_channels)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor, masks: MaskPyramid | None) -> torch.Tensor:
        return self.up(self.res(F.relu(self.conv(x)), masks))


class ConcatBlock(nn.Module):
    """Concatenate skip and up-sampled features, then project to the skip width."""

    def __init__(self, cfg: GeneratorConfig, skip_channels: int, up_channels: int) -> None:
        super().__init__()
        self.conv = conv3x3(skip_channels + up_channels, skip_channels)
        self.norm = make_norm(cfg, skip_channels)

    def forward(
        self, up: torch.Tensor, skip: torch.Tensor, masks: MaskPyramid | None
    ) -> torch.Tensor:
        return F.relu(self.norm(self.conv(torch.cat([skip, up], dim=1)), masks))


class UpBlock(nn.Module):
    def __init__(
        self, cfg: GeneratorConfig, skip_channels: int, up_channels: int, upsample: bool
    ) -> None:
        super().__init__()
        self.concat = ConcatBlock(cfg, skip_channels, up_channels)
        self.res = ResidualBlock(cfg, skip_channels)
        self.up = (
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
            if upsample
            else nn.Identity()
        )

    def forward(
        self, x: torch.Tensor, skip: torch.Tensor, masks: MaskPyramid | None
    ) -> torch.Tensor:
        return self.up(self.res(self.concat(x, skip, masks), masks))


class Generator(nn.Module):
    """Maps a signed-range LR image (B, 1, H, W) to a signed-range SR image."""

    def __init__(self, cfg: GeneratorConfig) -> None:
        super().__init__()
        self.cfg = cfg
        widths = cfg.channel_schedule
        levels = cfg.levels

        ins = (cfg.input_channels, *widths[: levels - 1])
        self.downs = nn.ModuleList(
            DownBlock(cfg, i, o) for i, o in zip(ins, widths[:levels], strict=True)
        )
        self.bridge = BridgeBlock(cfg, widths[levels - 1], widths[levels])
        self.ups = nn.ModuleList(
            UpBlock(cfg, widths[level], widths[level + 1], upsample=level > 0)
            for level in reversed(range(levels))
        )
        self.head = conv3x3(widths[0], cfg.output_channels)

    def _check_inputs(self, lr: torch.Tensor, masks: torch.Tensor | None) -> None:
        if lr.ndim != 4 or lr.shape[1] != self.cfg.input_channels:
            raise DimensionError(f"expected (B, 1, H, W) input, got {tuple(lr.shape)}")
        h, w = lr.shape[-2:]
        d = self.cfg.size_divisor
        if h % d or w % d:
            raise DimensionError(f"{h}x{w} input not divisible by {d}")
        if not self.cfg.conditional:
            return
        if masks is None:
            raise InputError("C-GAN generator requires class masks")
        if masks.ndim != 4 or masks.shape[0] != lr.shape[0] or masks.shape[-2:] != lr.shape[-2:]:
            raise DimensionError(
                f"masks {tuple(masks.shape)} not aligned with input {tuple(lr.shape)}"
            )
        if masks.shape[1] != self.cfg.num_classes:
            raise DimensionError(
                f"expected {self.cfg.num_classes} mask planes, got {masks.shape[1]}"
            )

    def forward(self, lr: torch.Tensor, masks: torch.Tensor | None = None) -> torch.Tensor:
        self._check_inputs(lr, masks)
        pyramid = MaskPyramid(masks.to(lr.dtype)) if self.cfg.conditional and masks is not None else None

        h = lr
        skips = []
        for down in self.downs:
            h, skip = down(h, pyramid)
            skips.append(skip)
        h = self.bridge(h, pyramid)
        for up, skip in zip(self.ups, reversed(skips), strict=True):
            h = up(h, skip, pyramid)
        return torch.tanh(self.head(h))

    def norm_layers(self) -> list[Norm]:
        return [m for m in self.modules() if isinstance(m, ConditionalNorm | PlainNorm)]

    def neutralize_conditioning(self) -> None:
        """Make every conditional layer reduce to its batch normalization."""
        for layer in self.norm_layers():
            if isinstance(layer, ConditionalNorm):
                layer.neutralize()


def build_generator(cfg: GeneratorConfig | Mapping[str, Any], seed: int = 0) -> Generator:
    """Build a generator with PyTorch's default initialization under ``seed``.

    The parameter count is a function of ``cfg`` alone.
    """
    cfg = parse_config(GeneratorConfig, cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        gen = Generator(cfg)
    logger.debug(
        f"Built {cfg.mode.value} generator {cfg.channel_schedule} "
        f"with {count_parameters(gen):,} parameters"
    )
    return gen


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def to_signed(t: torch.Tensor) -> torch.Tensor:
    """Unit range [0, 1] -> network range [-1, 1]."""
    return t * 2.0 - 1.0


def to_unit(t: torch.Tensor) -> torch.Tensor:
    """Network range [-1, 1] -> unit range [0, 1]."""
    return (t + 1.0) / 2.0
