"""Backbone + relation nets + per-tap graph propagation for one episode."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import Conv64F, MultiLayerEmbeddings
from .graph import build_operator
from .propagation import (
    LossBreakdown,
    class_probabilities,
    episode_loss,
    initial_scores,
    predict,
    propagate_closed_form,
)
from .relation import RelationNets

DTYPES = {"single": torch.float32, "double": torch.float64}
# Graphs, propagation and the loss always run in double. Single-precision
# degrees can sink to ~1e-35 on wide taps, where the normalization gradient
# overflows float32.
GRAPH_DTYPE = torch.float64


@dataclass
class ModelConfig:
    image_shape: tuple = (3, 84, 84)
    width: int = 64
    layers: tuple = (2, 3, 4)
    relation_channels: tuple = (64, 1)
    relation_hidden: int = 8
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class EpisodeOutput:
    """Everything computed for one episode, keyed by tap layer."""

    embeddings: MultiLayerEmbeddings
    sigma: dict[int, Tensor]
    similarity: dict[int, Tensor]
    graph: dict[int, Tensor]
    operator: dict[int, Tensor]
    p0: Tensor
    p_star: dict[int, Tensor]
    probs: dict[int, Tensor]
    n_query: int
    loss: LossBreakdown | None = field(default=None)

    def predictions(self, layer: int | None = None) -> Tensor:
        layer = max(self.p_star) if layer is None else layer
        return predict(self.p_star[layer], self.n_query)


class MultiTapNet(nn.Module):
    """Conv-64F with one relation net and one propagation graph per tap.

    Loss may draw on every tap; predictions use the deepest tap only.
    """

    def __init__(self, config: ModelConfig | None = None, **kwargs):
        super().__init__()
        self.config = config or ModelConfig(**kwargs)
        cfg = self.config
        self.backbone = Conv64F(cfg.image_shape, cfg.width, taps=cfg.layers, seed=cfg.seed)
        self.relation = RelationNets(
            self.backbone.tap_shapes(), cfg.relation_channels, cfg.relation_hidden, seed=cfg.seed
        )

    @property
    def layers(self) -> list[int]:
        return list(self.backbone.taps)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def embed(self, images) -> MultiLayerEmbeddings:
        x = torch.as_tensor(np.asarray(images), dtype=self.dtype)
        return self.backbone(x)

    def forward_episode(
        self,
        images,
        support_labels,
        n_way: int,
        n_query: int,
        alpha: float = 0.99,
        m: int = 20,
        labels=None,
        weights: dict[int, float] | None = None,
    ) -> EpisodeOutput:
        """Run all taps for one episode.

        ``images`` are in node order (support then query). When ``labels``
        (all nodes) and ``weights`` are given, the loss is attached.
        """
        emb = self.embed(images)
        sigma = self.relation(emb.maps)
        p0 = initial_scores(support_labels, n_way, n_query, dtype=GRAPH_DTYPE)
        sims, graphs, ops, p_star, probs = {}, {}, {}, {}, {}
        for i in self.layers:
            s, w, lap = build_operator(emb.flat(i).to(GRAPH_DTYPE), sigma[i].to(GRAPH_DTYPE), m)
            sims[i], graphs[i], ops[i] = s, w, lap
            p_star[i] = propagate_closed_form(lap, p0, alpha)
            probs[i] = class_probabilities(p_star[i])
        out = EpisodeOutput(emb, sigma, sims, graphs, ops, p0, p_star, probs, n_query)
        if labels is not None and weights is not None:
            out.loss = episode_loss(probs, labels, {i: weights[i] for i in self.layers})
        return out

    def run_episode(self, episode, alpha=0.99, m=20, weights=None) -> EpisodeOutput:
        return self.forward_episode(
            episode.images,
            episode.support_labels,
            episode.spec.n_way,
            len(episode.query_labels),
            alpha=alpha,
            m=m,
            labels=episode.labels,
            weights=weights or {i: 1.0 for i in self.layers},
        )


def build_model(config: ModelConfig, precision: str = "single") -> MultiTapNet:
    if precision not in DTYPES:
        raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {precision!r}")
    return MultiTapNet(config).to(DTYPES[precision])
