"""Data adapters, efficient channel attention and bottleneck fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import EncoderBundle
from .errors import ConfigurationError, StructuralError
from .unet import BottleneckTensor


@dataclass
class AdapterConfig:
    out_channels: int = 512
    source: str = ""
    target_grid: tuple[int, int] | None = None

    def __post_init__(self):
        if self.out_channels < 2 or self.out_channels % 2:
            raise ConfigurationError(f"adapter out_channels must be even and >= 2, got {self.out_channels}")


@dataclass
class EcaConfig:
    channels: int
    gamma: int = 2
    b: int = 1
    kernel: int | None = None

    def __post_init__(self):
        if self.kernel is None:
            self.kernel = eca_kernel_size(self.channels, self.gamma, self.b)
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError(f"ECA kernel must be odd and >= 1, got {self.kernel}")


def eca_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    """Smallest odd integer >= log2(C)/gamma + b/gamma."""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    k = math.ceil(math.log2(channels) / gamma + b / gamma)
    return k if k % 2 else k + 1


class DataAdapter(nn.Module):
    """Projects an encoder bundle onto the UNet bottleneck grid.

    Half of the output channels come from a 1x1 projection of the patch-token
    grid (bilinearly resized when the grids differ), the other half from a
    linear projection of the text embedding broadcast over space.
    """

    def __init__(self, token_dim: int, text_dim: int, config: AdapterConfig | None = None):
        super().__init__()
        self.config = config = config or AdapterConfig()
        half = config.out_channels // 2
        self.visual = nn.Conv2d(token_dim, half, kernel_size=1)
        self.text = nn.Linear(text_dim, half)

    def forward(self, bundle: EncoderBundle, target_grid: tuple[int, int] | None = None) -> torch.Tensor:
        tokens = bundle.patch_tokens
        b, n, d = tokens.shape
        g = math.isqrt(n)
        if g * g != n:
            raise StructuralError(f"{n} patch tokens do not form a square grid")
        target = target_grid or self.config.target_grid or (bundle.image_size[0] // 16, bundle.image_size[1] // 16)
        vis = self.visual(tokens.transpose(1, 2).reshape(b, d, g, g))
        if tuple(vis.shape[-2:]) != tuple(target):
            vis = F.interpolate(vis, size=tuple(target), mode="bilinear", align_corners=False)
        txt = self.text(bundle.text_embed)[:, :, None, None].expand(-1, -1, *vis.shape[-2:])
        return torch.cat([vis, txt], dim=1)


def adapt(adapter: DataAdapter, bundle: EncoderBundle, target_grid=None) -> torch.Tensor:
    return adapter(bundle, target_grid)


class ECA(nn.Module):
    """Channel gate from a 1-D convolution over globally pooled channels."""

    def __init__(self, channels: int, gamma: int = 2, b: int = 1, kernel: int | None = None):
        super().__init__()
        self.config = EcaConfig(channels, gamma, b, kernel)
        k = self.config.kernel
        self.conv = nn.Conv1d(1, 1, kernel_size=k, padding=k // 2, bias=False)

    @property
    def channels(self) -> int:
        return self.config.channels

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise StructuralError(f"ECA configured for {self.channels} channels, got {x.shape[1]}")
        y = x.mean(dim=(2, 3)).unsqueeze(1)  # B x 1 x C
        return torch.sigmoid(self.conv(y)).squeeze(1)  # B x C

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)[:, :, None, None]


def eca(module: ECA, x: torch.Tensor) -> torch.Tensor:
    return module(x)


class BottleneckFusion(nn.Module):
    """Concatenate adapted features onto the bottleneck, gate with ECA, and
    reduce back to the bottleneck width with a 1x1 convolution."""

    def __init__(self, bottleneck_channels: int, adapter_channels: Sequence[int] = ()):
        super().__init__()
        self.bottleneck_channels = bottleneck_channels
        self.adapter_channels = list(adapter_channels)
        total = bottleneck_channels + sum(self.adapter_channels)
        self.eca = ECA(total)
        self.reduce = nn.Conv2d(total, bottleneck_channels, kernel_size=1)

    @property
    def fused_channels(self) -> int:
        return self.eca.channels

    def forward(self, unet_bn: BottleneckTensor, adapted: Sequence[torch.Tensor]) -> BottleneckTensor:
        x = unet_bn.features
        for i, a in enumerate(adapted):
            if a.shape[-2:] != x.shape[-2:]:
                raise StructuralError(
                    f"adapter {i} grid {tuple(a.shape[-2:])} does not match bottleneck {tuple(x.shape[-2:])}"
                )
        fused = torch.cat([x, *adapted], dim=1)
        return BottleneckTensor(self.reduce(self.eca(fused)), "fused")


def fuse_bottleneck(fusion: BottleneckFusion, unet_bn: BottleneckTensor,
                    adapted: Sequence[torch.Tensor]) -> BottleneckTensor:
    return fusion(unet_bn, adapted)
