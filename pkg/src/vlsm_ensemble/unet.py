"""UNet-D: a plain four-level UNet trained from scratch.

The deepest feature map is exposed so that ensemble variants can fuse
vision-language features into it before decoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigurationError, StructuralError

DEPTH = 4
NORMS = ("batch", "group")


@dataclass
class UnetConfig:
    base_channels: int = 64
    depth: int = DEPTH
    in_channels: int = 3
    out_channels: int = 1
    norm: str = "batch"

    def __post_init__(self):
        if self.depth != DEPTH:
            raise ConfigurationError(f"UNet-D depth is fixed at {DEPTH}, got {self.depth}")
        if self.base_channels < 4:
            raise ConfigurationError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.norm not in NORMS:
            raise ConfigurationError(f"norm must be one of {NORMS}, got {self.norm!r}")

    @property
    def skip_channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(DEPTH)]

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** DEPTH


@dataclass
class BottleneckTensor:
    features: torch.Tensor  # B x C_b x H/16 x W/16
    source: str = "unet_only"


def check_resolution(h: int, w: int) -> None:
    factor = 2 ** DEPTH
    if h % factor or w % factor:
        raise ConfigurationError(f"input {h}x{w} is not divisible by {factor}")


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(ch)
    return nn.GroupNorm(math.gcd(8, ch), ch)


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, norm: str = "batch"):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            _norm(norm, out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            _norm(norm, out_ch),
            nn.ReLU(inplace=True),
        )


class UNetD(nn.Module):
    def __init__(self, config: UnetConfig | None = None, image_size: int | tuple[int, int] | None = None):
        super().__init__()
        self.config = config = config or UnetConfig()
        if image_size is not None:
            h, w = (image_size, image_size) if isinstance(image_size, int) else image_size
            check_resolution(h, w)
        chs = config.skip_channels
        self.encoders = nn.ModuleList()
        prev = config.in_channels
        for ch in chs:
            self.encoders.append(ConvBlock(prev, ch, config.norm))
            prev = ch
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = ConvBlock(chs[-1], config.bottleneck_channels, config.norm)

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        prev = config.bottleneck_channels
        for ch in reversed(chs):
            self.ups.append(nn.ConvTranspose2d(prev, ch, kernel_size=2, stride=2))
            self.decoders.append(ConvBlock(2 * ch, ch, config.norm))
            prev = ch
        self.head = nn.Conv2d(chs[0], config.out_channels, kernel_size=1)

    def encode(self, x: torch.Tensor) -> tuple[BottleneckTensor, list[torch.Tensor]]:
        check_resolution(*x.shape[-2:])
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        return BottleneckTensor(self.bottleneck(x), "unet_only"), skips

    def decode(self, bottleneck: BottleneckTensor | torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        x = bottleneck.features if isinstance(bottleneck, BottleneckTensor) else bottleneck
        if x.shape[1] != self.config.bottleneck_channels:
            raise StructuralError(
                f"bottleneck has {x.shape[1]} channels, decoder expects {self.config.bottleneck_channels}"
            )
        if len(skips) != DEPTH:
            raise StructuralError(f"expected {DEPTH} skip tensors, got {len(skips)}")
        for level, (up, dec, skip) in enumerate(zip(self.ups, self.decoders, reversed(skips))):
            x = up(x)
            if x.shape[1:] != skip.shape[1:]:
                raise StructuralError(
                    f"decoder stage {level} (skip /{2 ** (DEPTH - 1 - level)}): upsampled "
                    f"{tuple(x.shape[1:])} vs skip {tuple(skip.shape[1:])}"
                )
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bottleneck, skips = self.encode(x)
        return self.decode(bottleneck, skips)


def unet_encode(model: UNetD, image: torch.Tensor):
    return model.encode(image)


def unet_decode(model: UNetD, bottleneck, skips) -> torch.Tensor:
    return model.decode(bottleneck, skips)
