"""Tensor helpers shared by the losses and the model.

Differentiation is delegated to torch autograd. ``grad_check`` compares the
autograd result against central finite differences and is the correctness
criterion for every differentiable path in the package.
"""
from __future__ import annotations

import warnings
from typing import Callable

import torch

EPS = 1e-12


class NumericalWarning(RuntimeWarning):
    """Emitted when a norm is clamped to ``EPS``."""


class DimensionError(ValueError):
    pass


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def safe_norm(v: torch.Tensor, dim: int = -1, eps: float = EPS) -> torch.Tensor:
    """L2 norm along ``dim`` clamped below at ``eps`` (warns when clamping)."""
    norm = torch.linalg.vector_norm(v, dim=dim, keepdim=True)
    if bool((norm < eps).any()):
        warnings.warn(f"norm below {eps:g} clamped", NumericalWarning, stacklevel=3)
    return norm.clamp_min(eps)


def l2_normalize(v: torch.Tensor, dim: int = -1, eps: float = EPS) -> torch.Tensor:
    return v / safe_norm(v, dim=dim, eps=eps)


def softmax_rows(m: torch.Tensor) -> torch.Tensor:
    shifted = m - m.max(dim=-1, keepdim=True).values.detach()
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    p: torch.Tensor,
    h: float = 1e-6,
) -> float:
    """Max relative error between autograd and central differences of ``f`` at ``p``.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``p`` is evaluated in double precision.
    """
    p = p.detach().to(torch.float64).clone().requires_grad_(True)
    out = f(p)
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not torch.isfinite(out):
        raise FloatingPointError(f"f is not finite at p: {out.item()}")
    (analytic,) = torch.autograd.grad(out, p)

    flat = p.detach().clone().reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + h
            fp = f(flat.view_as(p)).item()
            flat[k] = orig - h
            fm = f(flat.view_as(p)).item()
            flat[k] = orig
            if not (torch.isfinite(torch.tensor(fp)) and torch.isfinite(torch.tensor(fm))):
                raise FloatingPointError(f"f is not finite near p (coordinate {k})")
            numeric[k] = (fp - fm) / (2 * h)
    a = analytic.reshape(-1)
    err = (a - numeric).abs() / a.abs().clamp_min(1.0)
    return float(err.max())
