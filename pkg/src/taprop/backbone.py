"""Conv-64F feature extractor with intermediate taps."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn


def max_pool_2x2(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling, floor mode.

    Maps with a side of 1 would vanish under floor mode; those fall back to
    ceil mode, which keeps the single row/column.
    """
    return F.max_pool2d(x, kernel_size=2, stride=2, ceil_mode=min(x.shape[-2:]) < 2)


def pooled_size(s: int) -> int:
    return 1 if s < 2 else s // 2


def seeded_generator(seed: int, name: str) -> torch.Generator:
    """Independent generator per named submodule, so building a model with
    fewer submodules leaves the others' initial weights unchanged."""
    salt = sum((i + 1) * ord(ch) for i, ch in enumerate(name))
    return torch.Generator().manual_seed((int(seed) * 1_000_003 + salt) % (2 ** 63))


def init_module(module: nn.Module, gen: torch.Generator) -> None:
    # Same distributions as torch's default reset_parameters, but seeded.
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=gen)
            if m.bias is not None:
                fan_in = m.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                nn.init.uniform_(m.bias, -bound, bound, generator=gen)
        elif isinstance(m, nn.BatchNorm2d):
            m.reset_parameters()


class ConvBlock(nn.Module):
    """3x3 conv (padding 1) -> BN -> ReLU -> 2x2 max-pool."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return max_pool_2x2(F.relu(self.bn(self.conv(x))))


@dataclass
class MultiLayerEmbeddings:
    """Per-tap feature maps, rows in episode node order."""

    maps: dict[int, Tensor]

    @property
    def layers(self) -> list[int]:
        return sorted(self.maps)

    def flat(self, layer: int) -> Tensor:
        return self.maps[layer].flatten(1)

    def __getitem__(self, layer: int) -> Tensor:
        return self.flat(layer)


class Conv64F(nn.Module):
    """Four conv blocks of ``width`` filters; returns the maps after ``taps``.

    Block numbering starts at 1, so the default taps (2, 3, 4) are the
    outputs of the last three blocks. With 3x84x84 input the taps are
    64x21x21, 64x10x10 and 64x5x5.
    """

    def __init__(
        self,
        image_shape: Sequence[int] = (3, 84, 84),
        width: int = 64,
        n_blocks: int = 4,
        taps: Sequence[int] = (2, 3, 4),
        seed: int = 0,
    ):
        super().__init__()
        self.image_shape = tuple(int(s) for s in image_shape)
        if len(self.image_shape) != 3:
            raise ValueError(f"image_shape must be (C, H, W), got {image_shape}")
        self.taps = tuple(sorted(int(t) for t in taps))
        if not self.taps or self.taps[0] < 1 or self.taps[-1] > n_blocks:
            raise ValueError(f"taps must lie in 1..{n_blocks}, got {taps}")
        chans = [self.image_shape[0]] + [width] * n_blocks
        self.blocks = nn.ModuleList(ConvBlock(chans[i], chans[i + 1]) for i in range(n_blocks))
        init_module(self, seeded_generator(seed, "backbone"))

    def tap_shapes(self) -> dict[int, tuple[int, int, int]]:
        _, h, w = self.image_shape
        shapes = {}
        for i, block in enumerate(self.blocks, start=1):
            h, w = pooled_size(h), pooled_size(w)
            if i in self.taps:
                shapes[i] = (block.conv.out_channels, h, w)
        return shapes

    def tap_dims(self) -> dict[int, int]:
        return {i: c * h * w for i, (c, h, w) in self.tap_shapes().items()}

    def forward(self, images: Tensor) -> MultiLayerEmbeddings:
        if images.dim() != 4 or tuple(images.shape[1:]) != self.image_shape:
            raise ValueError(
                f"backbone expects images of shape [n, {', '.join(map(str, self.image_shape))}], "
                f"received {list(images.shape)}"
            )
        maps = {}
        x = images
        last = self.taps[-1]
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i in self.taps:
                maps[i] = x
            if i == last:
                break
        return MultiLayerEmbeddings(maps)
