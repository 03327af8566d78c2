"""Compact ResNet-18 style feature extractor without a classification head."""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetFeatures(nn.Module):
    """ResNet-18 topology (2-2-2-2 basic blocks) with a 3x3 stem for small images.

    The output is the global-average-pooled last stage, of width
    ``8 * base_width`` (512 for the standard ``base_width=64``).
    """

    def __init__(self, base_width: int = 64, in_channels: int = 3, blocks=(2, 2, 2, 2)):
        super().__init__()
        self.base_width = base_width
        self.in_channels = in_channels
        self.blocks = tuple(blocks)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, base_width, 3, 1, 1, bias=False),
            nn.BatchNorm2d(base_width),
            nn.ReLU(inplace=True),
        )
        layers = []
        in_planes = base_width
        for i, n in enumerate(self.blocks):
            planes = base_width * 2 ** i
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(BasicBlock(in_planes, planes, stride))
                in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.feature_dim = in_planes

    def forward(self, x):
        out = self.layers(self.stem(x))
        return torch.flatten(F.adaptive_avg_pool2d(out, 1), 1)

    def descriptor(self) -> dict:
        return {
            "name": "resnet18-compact",
            "base_width": self.base_width,
            "in_channels": self.in_channels,
            "blocks": list(self.blocks),
            "feature_dim": self.feature_dim,
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "ResNetFeatures":
        return cls(base_width=desc["base_width"], in_channels=desc["in_channels"],
                   blocks=tuple(desc["blocks"]))


def to_tensor(pixels) -> torch.Tensor:
    """(N, H, W, C) float array in [0, 1] -> (N, C, H, W) float32 tensor."""
    return torch.as_tensor(pixels, dtype=torch.float32).permute(0, 3, 1, 2).contiguous()
