"""Class-conditional normalization.

Batch-normalized activations are modulated per pixel by a scale map and a
shift map, each computed from the class masks by a small convolutional
branch: ``y = BN(x) * S(masks) + T(masks)``.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from irsr.errors import DimensionError
from irsr.imaging import ClassMaskStack

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
DEFAULT_HIDDEN = 64


def resize_masks(
    masks: torch.Tensor | ClassMaskStack, target_hw: tuple[int, int]
) -> torch.Tensor | ClassMaskStack:
    """Nearest-neighbour resize of (B, K, H, W) masks (or a stack) to ``target_hw``."""
    if isinstance(masks, ClassMaskStack):
        resized = resize_masks(torch.from_numpy(masks.planes[None].astype(np.float32)), target_hw)
        assert isinstance(resized, torch.Tensor)
        return ClassMaskStack(masks.classes, resized[0].numpy().astype(np.uint8))

    h, w = masks.shape[-2:]
    th, tw = target_hw
    if (th, tw) == (h, w):
        return masks
    if th > h or tw > w or th < 1 or tw < 1:
        raise DimensionError(f"cannot resize {h}x{w} masks to {th}x{tw}")
    if h * tw != w * th:
        raise DimensionError(f"aspect ratio of {h}x{w} masks differs from {th}x{tw}")
    return F.interpolate(masks, size=(th, tw), mode="nearest")


class MaskPyramid:
    """Masks resized once per resolution within a single forward pass."""

    def __init__(self, masks: torch.Tensor) -> None:
        self._levels: dict[tuple[int, int], torch.Tensor] = {tuple(masks.shape[-2:]): masks}
        self.base = masks

    def at(self, hw: tuple[int, int]) -> torch.Tensor:
        key = (int(hw[0]), int(hw[1]))
        if key not in self._levels:
            resized = resize_masks(self.base, key)
            assert isinstance(resized, torch.Tensor)
            self._levels[key] = resized
        return self._levels[key]


def _branch(num_classes: int, hidden: int, num_features: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(num_classes, hidden, kernel_size=3, stride=1, padding=1),
        nn.ReLU(),
        nn.Conv2d(hidden, num_features, kernel_size=3, stride=1, padding=1),
    )


class ConditionalNorm(nn.Module):
    """Batch normalization scaled and shifted by mask-derived maps."""

    def __init__(
        self, num_features: int, num_classes: int, hidden: int = DEFAULT_HIDDEN
    ) -> None:
        super().__init__()
        self.num_features = num_features
        self.num_classes = num_classes
        self.bn = nn.BatchNorm2d(num_features, eps=BN_EPS, momentum=BN_MOMENTUM, affine=True)
        self.scale_branch = _branch(num_classes, hidden, num_features)
        self.shift_branch = _branch(num_classes, hidden, num_features)
        # Start the scale map around 1 so early training sees plain BN.
        nn.init.ones_(self.scale_branch[-1].bias)

    def neutralize(self) -> None:
        """Make both branches constant: scale 1, shift 0."""
        with torch.no_grad():
            for branch, value in ((self.scale_branch, 1.0), (self.shift_branch, 0.0)):
                branch[-1].weight.zero_()
                branch[-1].bias.fill_(value)

    def forward(self, x: torch.Tensor, masks: torch.Tensor | MaskPyramid) -> torch.Tensor:
        if x.shape[1] != self.num_features:
            raise DimensionError(f"expected {self.num_features} channels, got {x.shape[1]}")
        hw = (x.shape[-2], x.shape[-1])
        if isinstance(masks, MaskPyramid):
            m = masks.at(hw)
        else:
            resized = resize_masks(masks, hw)
            assert isinstance(resized, torch.Tensor)
            m = resized
        if m.shape[1] != self.num_classes:
            raise DimensionError(f"expected {self.num_classes} mask planes, got {m.shape[1]}")
        return self.bn(x) * self.scale_branch(m) + self.shift_branch(m)


class PlainNorm(nn.Module):
    """Affine batch normalization with the ConditionalNorm call signature."""

    def __init__(self, num_features: int) -> None:
        super().__init__()
        self.num_features = num_features
        self.bn = nn.BatchNorm2d(num_features, eps=BN_EPS, momentum=BN_MOMENTUM, affine=True)

    def forward(self, x: torch.Tensor, masks: torch.Tensor | MaskPyramid | None = None) -> torch.Tensor:
        if x.shape[1] != self.num_features:
            raise DimensionError(f"expected {self.num_features} channels, got {x.shape[1]}")
        return self.bn(x)
