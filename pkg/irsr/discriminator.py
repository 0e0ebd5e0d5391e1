"""Unconditioned critic network.

Convolution + batch-norm stack with leaky-ReLU activations, global average
pooling, two fully connected layers and a sigmoid. Each configured width
contributes a stride-1 and a stride-2 convolution; the first convolution has
no batch normalization.
"""

from __future__ import annotations

from collections.abc import Mapping
from typing import Any

import torch
from loguru import logger
from torch import nn

from irsr.config import DiscriminatorConfig, parse_config
from irsr.errors import DimensionError

LEAKY_SLOPE = 0.2


def _conv_stage(in_channels: int, out_channels: int, stride: int, norm: bool) -> list[nn.Module]:
    layers: list[nn.Module] = [
        nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1)
    ]
    if norm:
        layers.append(nn.BatchNorm2d(out_channels))
    layers.append(nn.LeakyReLU(LEAKY_SLOPE))
    return layers


class Discriminator(nn.Module):
    """Probability that a signed-range (B, 1, S, S) image is a real HR patch."""

    def __init__(self, cfg: DiscriminatorConfig) -> None:
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        in_channels = 1
        for index, width in enumerate(cfg.widths):
            layers += _conv_stage(in_channels, width, stride=1, norm=index > 0)
            layers += _conv_stage(width, width, stride=2, norm=True)
            in_channels = width
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Linear(in_channels, cfg.fc_width)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.fc2 = nn.Linear(cfg.fc_width, 1)
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=LEAKY_SLOPE, nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def logits(self, img: torch.Tensor) -> torch.Tensor:
        size = self.cfg.input_size
        if img.ndim != 4 or img.shape[1] != 1 or tuple(img.shape[-2:]) != (size, size):
            raise DimensionError(
                f"discriminator expects (B, 1, {size}, {size}), got {tuple(img.shape)}"
            )
        h = self.pool(self.features(img)).flatten(1)
        return self.fc2(self.act(self.fc1(h))).squeeze(1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(img))


def build_discriminator(cfg: DiscriminatorConfig | Mapping[str, Any], seed: int = 0) -> Discriminator:
    """Kaiming-normal convolutions, N(0, 0.02) linear weights, zero biases."""
    cfg = parse_config(DiscriminatorConfig, cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        disc = Discriminator(cfg)
    logger.debug(f"Built discriminator {cfg.widths} for {cfg.input_size}px input")
    return disc
