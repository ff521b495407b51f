"""Relation networks producing one positive length scale per node and tap."""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .backbone import ConvBlock, init_module, pooled_size, seeded_generator

SIGMA_EPS = 1e-6


class RelationOverflow(FloatingPointError):
    pass


def positive_scale(raw: Tensor, eps: float = SIGMA_EPS) -> Tensor:
    """softplus(raw) + eps; strictly positive for any finite head output."""
    return F.softplus(raw) + eps


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class RelationNet(nn.Module):
    """Two conv blocks then two fully-connected layers down to a scalar.

    The output bias starts at ``inverse_softplus(sqrt(D))`` where ``D`` is
    the flattened tap dimension, so initial scaled embeddings have O(1)
    pairwise distances instead of similarities that underflow to zero.
    """

    def __init__(
        self,
        in_shape: Sequence[int],
        channels: Sequence[int] = (64, 1),
        hidden: int = 8,
        seed: int = 0,
        name: str = "relation",
        eps: float = SIGMA_EPS,
    ):
        super().__init__()
        c, h, w = (int(s) for s in in_shape)
        self.in_shape = (c, h, w)
        self.eps = eps
        chans = [c] + list(channels)
        self.blocks = nn.ModuleList(ConvBlock(chans[i], chans[i + 1]) for i in range(len(channels)))
        for _ in channels:
            h, w = pooled_size(h), pooled_size(w)
        self.fc1 = nn.Linear(chans[-1] * h * w, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        init_module(self, seeded_generator(seed, name))
        with torch.no_grad():
            self.fc2.bias.fill_(inverse_softplus(math.sqrt(c * self.in_shape[1] * self.in_shape[2])))

    def raw(self, maps: Tensor) -> Tensor:
        x = maps
        for block in self.blocks:
            x = block(x)
        return self.fc2(F.relu(self.fc1(x.flatten(1)))).squeeze(1)

    def forward(self, maps: Tensor) -> Tensor:
        return positive_scale(self.raw(maps), self.eps)


class RelationNets(nn.Module):
    """One independent relation net per tap."""

    def __init__(self, tap_shapes: dict[int, tuple[int, int, int]], channels=(64, 1), hidden=8, seed=0):
        super().__init__()
        self.nets = nn.ModuleDict({
            str(i): RelationNet(shape, channels, hidden, seed=seed, name=f"relation{i}")
            for i, shape in sorted(tap_shapes.items())
        })

    @property
    def layers(self) -> list[int]:
        return sorted(int(k) for k in self.nets)

    def forward(self, maps: dict[int, Tensor]) -> dict[int, Tensor]:
        out = {}
        for key, net in self.nets.items():
            sigma = net(maps[int(key)])
            if not torch.isfinite(sigma).all():
                raise RelationOverflow(f"relation network overflow at layer {key}")
            out[int(key)] = sigma
        return out
