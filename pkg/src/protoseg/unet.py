"""U-Net backbone exposing both the class probabilities and the decoder
feature map that the prototype computation taps.

Standard 4-down / 4-up layout with batch normalization, 3x3 convolutions and
bilinear upsampling. The feature tap defaults to the last decoder block's
output (pre-head, full resolution, D = base_width channels); the penultimate
block can be tapped instead, with bilinear upsampling back to full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

from .core import class_softmax

POOL_STAGES = 4
DIVISIBILITY = 2**POOL_STAGES

FEATURE_TAPS = ("final", "penultimate")


@dataclass
class ModelOutput:
    """Forward products: raw logits, softmax probabilities and the tapped features."""

    logits: Tensor  # (B, C, H, W) or (C, H, W)
    prob: Tensor  # same layout, per-pixel distribution
    feat: Tensor  # (B, D, H, W) or (D, H, W)


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class UNet(nn.Module):
    """Segmentation backbone; forward returns logits, probabilities and features.

    base_width=16 is the desk-scale configuration; 64 matches the full-scale
    recipe. Input spatial dims must be divisible by 16 (4 pooling stages).
    """

    def __init__(self, class_count: int = 4, base_width: int = 16, feature_tap: str = "final"):
        super().__init__()
        if feature_tap not in FEATURE_TAPS:
            raise ValueError(f"feature_tap must be one of {FEATURE_TAPS}, got {feature_tap!r}")
        self.class_count = class_count
        self.base_width = base_width
        self.feature_tap = feature_tap
        b = base_width
        self.enc0 = ConvBlock(1, b)
        self.enc1 = ConvBlock(b, 2 * b)
        self.enc2 = ConvBlock(2 * b, 4 * b)
        self.enc3 = ConvBlock(4 * b, 8 * b)
        self.bottleneck = ConvBlock(8 * b, 16 * b)
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.dec3 = ConvBlock(16 * b + 8 * b, 8 * b)
        self.dec2 = ConvBlock(8 * b + 4 * b, 4 * b)
        self.dec1 = ConvBlock(4 * b + 2 * b, 2 * b)
        self.dec0 = ConvBlock(2 * b + b, b)
        self.head = nn.Conv2d(b, class_count, 1)

    @property
    def embed_dim(self) -> int:
        return self.base_width if self.feature_tap == "final" else 2 * self.base_width

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, image: Tensor) -> ModelOutput:
        squeeze = image.dim() == 3
        x = image.unsqueeze(0) if squeeze else image
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) or (1, H, W) input, got {tuple(image.shape)}")
        h, w = x.shape[-2:]
        if h % DIVISIBILITY or w % DIVISIBILITY:
            raise ValueError(
                f"spatial dims must be divisible by {DIVISIBILITY} ({POOL_STAGES} pooling stages), got {h}x{w}"
            )
        s0 = self.enc0(x)
        s1 = self.enc1(self.pool(s0))
        s2 = self.enc2(self.pool(s1))
        s3 = self.enc3(self.pool(s2))
        bt = self.bottleneck(self.pool(s3))
        d3 = self.dec3(torch.cat([self.up(bt), s3], dim=1))
        d2 = self.dec2(torch.cat([self.up(d3), s2], dim=1))
        d1 = self.dec1(torch.cat([self.up(d2), s1], dim=1))
        d0 = self.dec0(torch.cat([self.up(d1), s0], dim=1))
        logits = self.head(d0)
        feat = d0 if self.feature_tap == "final" else self.up(d1)
        prob = class_softmax(logits)
        if squeeze:
            return ModelOutput(logits=logits[0], prob=prob[0], feat=feat[0])
        return ModelOutput(logits=logits, prob=prob, feat=feat)

    def config(self) -> dict:
        """Architecture settings needed to rebuild this model."""
        return {
            "class_count": self.class_count,
            "base_width": self.base_width,
            "feature_tap": self.feature_tap,
        }
