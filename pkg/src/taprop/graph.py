"""Affinity graphs over episode nodes and their normalized propagation operator.

Dense matrices throughout; episodes have at most a few hundred nodes.
The operator ``D^-1/2 W D^-1/2`` is a normalized adjacency; it is often
called a normalized graph Laplacian in the label-propagation literature
and the code keeps the symbol ``L`` for it.
"""
from __future__ import annotations

import torch
from torch import Tensor


# Degrees below this are floored inside the rsqrt. Its derivative grows like
# d**-1.5, which overflows even float64 for degrees near 1e-205.
DEGREE_FLOOR = 1e-150


class SimilarityOverflow(FloatingPointError):
    pass


class GraphError(ValueError):
    pass


def pairwise_similarity(embedding: Tensor, sigma: Tensor) -> Tensor:
    """Gaussian similarity of length-scaled embeddings.

    ``S[j, k] = exp(-0.5 * ||e_j / sigma_j - e_k / sigma_k||^2)``. The result
    is exactly symmetric with a unit diagonal.
    """
    if embedding.dim() != 2 or sigma.shape != embedding.shape[:1]:
        raise GraphError(f"need embedding [n, D] and sigma [n], got {list(embedding.shape)} and {list(sigma.shape)}")
    z = embedding / sigma[:, None]
    sq = (z * z).sum(1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    d2 = 0.5 * (d2 + d2.T)
    eye = torch.eye(len(z), dtype=torch.bool, device=z.device)
    d2 = d2.clamp_min(0.0).masked_fill(eye, 0.0)
    s = torch.exp(-0.5 * d2)
    if not torch.isfinite(s).all():
        raise SimilarityOverflow("similarity overflow: non-finite entries in S")
    return s


def topm_mask(s: Tensor, m: int) -> Tensor:
    """Boolean mask of the ``m`` largest off-diagonal entries per row.

    Ties go to the lower column index (stable descending sort).
    """
    n = s.shape[0]
    if m >= n:
        raise GraphError(f"m too large for episode: m={m} with {n} nodes")
    if m < 1:
        raise GraphError(f"m must be >= 1, got {m}")
    eye = torch.eye(n, dtype=torch.bool, device=s.device)
    scores = s.detach().masked_fill(eye, float("-inf"))
    order = torch.sort(scores, dim=1, descending=True, stable=True).indices[:, :m]
    mask = torch.zeros_like(eye)
    mask.scatter_(1, order, True)
    return mask


def sparsify(s: Tensor, m: int) -> Tensor:
    """m-nearest-neighbour graph from a dense similarity matrix.

    Diagonal is dropped before selection; rows keep their ``m`` largest
    entries; the result is symmetrized as ``(W + W.T) / 2``.
    """
    mask = topm_mask(s, m)
    w = s * mask
    return 0.5 * (w + w.T)


def normalize(w: Tensor) -> Tensor:
    """``D^-1/2 W D^-1/2`` with degrees from ``w``; isolated nodes get zero rows."""
    d = w.sum(1)
    pos = d > 0
    # rsqrt is evaluated on a safe placeholder for isolated nodes so that the
    # unselected branch cannot inject inf * 0 into the backward pass
    d_safe = torch.where(pos, d.clamp_min(DEGREE_FLOOR), torch.ones_like(d))
    inv_sqrt = torch.where(pos, d_safe.rsqrt(), torch.zeros_like(d))
    lap = inv_sqrt[:, None] * w * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def build_operator(embedding: Tensor, sigma: Tensor, m: int) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(S, W, L)`` for one tap."""
    s = pairwise_similarity(embedding, sigma)
    w = sparsify(s, m)
    return s, w, normalize(w)
