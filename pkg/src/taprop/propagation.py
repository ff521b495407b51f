"""Label propagation, class probabilities, prediction and the multi-layer loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch
from torch import Tensor

PROB_FLOOR = 1e-12


class PropagationSingular(ArithmeticError):
    pass


def initial_scores(support_labels, n_way: int, n_query: int, dtype=torch.float64) -> Tensor:
    """One-hot rows for support nodes, zero rows for query nodes."""
    labels = torch.as_tensor(support_labels, dtype=torch.long)
    p0 = torch.zeros(len(labels) + n_query, n_way, dtype=dtype)
    p0[torch.arange(len(labels)), labels] = 1.0
    return p0


def episode_initial_scores(episode, dtype=torch.float64) -> Tensor:
    return initial_scores(episode.support_labels, episode.spec.n_way, len(episode.query_labels), dtype)


def propagate_closed_form(lap: Tensor, p0: Tensor, alpha: float) -> Tensor:
    """Fixed point ``(I - alpha L)^-1 P0`` via a linear solve."""
    a = torch.eye(len(lap), dtype=lap.dtype, device=lap.device) - alpha * lap
    p_star, info = torch.linalg.solve_ex(a, p0.to(lap.dtype))
    if int(info) != 0 or not torch.isfinite(p_star).all():
        cond = torch.linalg.cond(a.detach()).item()
        raise PropagationSingular(f"propagation singular (condition estimate {cond:.3g})")
    return p_star


def propagate_iterative(lap: Tensor, p0: Tensor, alpha: float, t: int) -> Tensor:
    """Apply ``P <- alpha L P + (1 - alpha) P0`` exactly ``t`` times."""
    p0 = p0.to(lap.dtype)
    p = p0
    for _ in range(int(t)):
        p = alpha * (lap @ p) + (1.0 - alpha) * p0
    return p


def class_probabilities(p_star: Tensor) -> Tensor:
    z = p_star - p_star.max(dim=1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=1, keepdim=True)


def predict(p_star: Tensor, n_query: int | None = None) -> Tensor:
    """Argmax class per query row (the last ``n_query`` rows); ties -> lowest index."""
    rows = p_star if n_query is None else p_star[len(p_star) - n_query:]
    return torch.argmax(rows, dim=1)


@dataclass
class LossBreakdown:
    per_layer: dict[int, Tensor]
    total: Tensor
    weights: dict[int, float]

    def as_floats(self) -> dict[str, float]:
        out = {"loss_total": float(self.total.detach())}
        out.update({f"loss_l{i}": float(v.detach()) for i, v in self.per_layer.items()})
        return out


def cross_entropy_sum(probs: Tensor, labels) -> Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    picked = probs[torch.arange(len(labels)), labels]
    return -torch.log(picked.clamp_min(PROB_FLOOR)).sum()


def episode_loss(probs: Mapping[int, Tensor], labels, weights: Mapping[int, float]) -> LossBreakdown:
    """Weighted sum over layers of the summed (not averaged) node cross-entropy.

    ``labels`` covers every episode node, support first then query.
    """
    per_layer = {i: cross_entropy_sum(p, labels) for i, p in sorted(probs.items())}
    total = None
    for i, loss in per_layer.items():
        term = float(weights[i]) * loss
        total = term if total is None else total + term
    return LossBreakdown(per_layer, total, {i: float(weights[i]) for i in per_layer})
