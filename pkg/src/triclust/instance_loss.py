"""Negative-free instance-level loss between online predictions and target projections."""
from __future__ import annotations

from typing import TYPE_CHECKING

import torch

from .numerics import l2_normalize

if TYPE_CHECKING:
    from .augment import ViewTriple
    from .model import NetworkParams

EXCHANGE_MODES = ("off", "exchange")


def pairwise_mse(y: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Squared distance between the L2-normalized ``y`` and ``z``.

    Equals ``2 - 2 cos(y, z)`` and lies in [0, 4]. Works on single vectors or
    row-wise on matrices (returning one value per row).
    """
    diff = l2_normalize(y) - l2_normalize(z)
    return (diff * diff).sum(dim=-1)


def view_pair_loss(y: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``pairwise_mse`` over matching rows."""
    if y.shape != z.shape:
        raise ValueError(f"shape mismatch between predictions {tuple(y.shape)} and targets {tuple(z.shape)}")
    if y.shape[0] < 1:
        raise ValueError("empty batch")
    return pairwise_mse(y, z).mean()


def instance_loss(y_a: torch.Tensor, y_c: torch.Tensor, z_b: torch.Tensor) -> torch.Tensor:
    """Sum of the (a, b) and (b, c) view-pair losses.

    ``z_b`` is expected to be detached by the caller when the stop-gradient
    is in force; this function does not detach it.
    """
    if not (y_a.shape[0] == y_c.shape[0] == z_b.shape[0]):
        raise ValueError(
            f"batch sizes differ: y_a={y_a.shape[0]}, y_c={y_c.shape[0]}, z_b={z_b.shape[0]}"
        )
    return view_pair_loss(y_a, z_b) + view_pair_loss(y_c, z_b)


def exchanged_terms(y_b: torch.Tensor, z_a_target: torch.Tensor, z_c_target: torch.Tensor) -> torch.Tensor:
    """Mirrored terms: view b through the online path against a and c through the target."""
    return view_pair_loss(y_b, z_a_target) + view_pair_loss(y_b, z_c_target)


def symmetrized_instance_loss(params: "NetworkParams", views: "ViewTriple", mode: str = "exchange") -> torch.Tensor:
    """Instance loss computed straight from the networks and a view triple."""
    from .model import forward_online, forward_target

    if mode not in EXCHANGE_MODES:
        raise ValueError(f"unknown exchange mode {mode!r}; expected one of {EXCHANGE_MODES}")
    _, y_a, _ = forward_online(params.online, views.a)
    _, y_c, _ = forward_online(params.online, views.c)
    z_b, _ = forward_target(params.target, views.b)
    loss = instance_loss(y_a, y_c, z_b)
    if mode == "exchange":
        _, y_b, _ = forward_online(params.online, views.b)
        z_a, _ = forward_target(params.target, views.a)
        z_c, _ = forward_target(params.target, views.c)
        loss = loss + exchanged_terms(y_b, z_a, z_c)
    return loss
