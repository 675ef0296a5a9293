"""Cluster-level InfoNCE over the columns of soft-assignment matrices.

Each column of an N x M assignment matrix is treated as the representation of
one cluster. Column i of one view is pulled towards column i of the other view
and pushed away from the remaining 2M - 2 columns of both views. The entropy of
the per-cluster assignment mass is subtracted to discourage collapse.
"""
from __future__ import annotations

import math

import torch

from .numerics import safe_norm


def column_similarity(qx: torch.Tensor, qy: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between every column of ``qx`` and every column of ``qy`` (M x M)."""
    if qx.shape != qy.shape:
        raise ValueError(f"shape mismatch: {tuple(qx.shape)} vs {tuple(qy.shape)}")
    nx = qx / safe_norm(qx, dim=0)
    ny = qy / safe_norm(qy, dim=0)
    return nx.T @ ny


def _check_tau(tau: float) -> None:
    if not (math.isfinite(tau) and tau > 0):
        raise ValueError(f"temperature must be a finite positive number, got {tau}")


def infonce_terms(qx: torch.Tensor, qy: torch.Tensor, tau: float, include_self_term: bool = False) -> torch.Tensor:
    """Per-column InfoNCE values, shape (2, M): row 0 anchored on ``qx``, row 1 on ``qy``."""
    _check_tau(tau)
    m = qx.shape[1]
    if m < 2:
        raise ValueError("at least two clusters are required")
    s_xy = column_similarity(qx, qy)
    s_xx = column_similarity(qx, qx)
    s_yy = column_similarity(qy, qy)
    self_mask = torch.eye(m, dtype=torch.bool, device=qx.device)

    def side(cross: torch.Tensor, within: torch.Tensor) -> torch.Tensor:
        if not include_self_term:
            within = within.masked_fill(self_mask, float("-inf"))
        logits = torch.cat([cross, within], dim=1) / tau
        return torch.logsumexp(logits, dim=1) - cross.diagonal() / tau

    return torch.stack([side(s_xy, s_xx), side(s_xy.T, s_yy)])


def assignment_entropy(qx: torch.Tensor, qy: torch.Tensor) -> torch.Tensor:
    """Entropy of the normalized column mass, summed over both views."""

    def marginal_entropy(q: torch.Tensor) -> torch.Tensor:
        p = q.sum(dim=0) / q.sum()
        return -torch.special.xlogy(p, p).sum()

    return marginal_entropy(qx) + marginal_entropy(qy)


def cluster_infonce_pair(
    qx: torch.Tensor,
    qy: torch.Tensor,
    tau: float,
    include_self_term: bool = False,
    use_entropy: bool = True,
) -> torch.Tensor:
    terms = infonce_terms(qx, qy, tau, include_self_term)
    loss = terms.sum() / (2 * qx.shape[1])
    if use_entropy:
        loss = loss - assignment_entropy(qx, qy)
    return loss


def cluster_loss(
    q_a: torch.Tensor,
    q_b: torch.Tensor,
    q_c: torch.Tensor,
    tau: float,
    include_self_term: bool = False,
    use_entropy: bool = True,
) -> torch.Tensor:
    """Sum of the (a, b) and (b, c) pair losses, each with its own entropy term."""
    return cluster_infonce_pair(q_a, q_b, tau, include_self_term, use_entropy) + cluster_infonce_pair(
        q_b, q_c, tau, include_self_term, use_entropy
    )
