"""Feature extractors: image batch (B, 3, S, S) -> feature batch (B, dim)."""

from __future__ import annotations

from pathlib import Path

import torch
from torch import nn


class ConvExtractor(nn.Module):
    """Small conv net for desk-scale runs: conv/BN/ReLU/pool blocks, global pooling, linear projection."""

    def __init__(self, dim: int = 32, channels: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 3
        for c_out in channels:
            layers += [
                nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.proj = nn.Linear(c_in, dim)
        self.dim = dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.pool(self.features(x)).flatten(1))


class ResNet50Extractor(nn.Module):
    """Full-scale preset: 2048-d pooled ResNet-50 features; weights must be supplied as a local file."""

    def __init__(self, weights: str | Path | None = None):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if weights is not None:
            net.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
        net.fc = nn.Identity()
        self.net = net
        self.dim = 2048

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def build_extractor(name: str, dim: int, weights: str | Path | None = None) -> nn.Module:
    if name == "conv-small":
        return ConvExtractor(dim)
    if name == "resnet50":
        if dim != 2048:
            raise ValueError("resnet50 extractor produces 2048-d features")
        return ResNet50Extractor(weights)
    raise ValueError(f"unknown backbone {name!r}")
