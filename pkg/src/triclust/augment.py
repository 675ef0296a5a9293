"""Stochastic image augmentation producing three views per image.

Images are float tensors in [0, 1] laid out channels-first, (3, H, W) for a
single image and (N, 3, H, W) for a batch. Random parameters are drawn per
image from a numpy ``Generator`` and the transforms are applied batched, so
an augmented batch is fully determined by (generator state, policy, batch).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

_LUMA = (0.299, 0.587, 0.114)


@dataclass
class AugmentPolicy:
    output_size: int = 16
    crop: bool = True
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    gray_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    # odd kernel size; 0 picks the odd size closest to 10% of output_size (at least 3)
    blur_kernel: int = 0

    def __post_init__(self) -> None:
        self.crop_scale = tuple(float(v) for v in self.crop_scale)
        self.crop_ratio = tuple(float(v) for v in self.crop_ratio)
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)
        for name in ("flip_p", "jitter_p", "gray_p", "blur_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"augment.{name} must be a probability in [0, 1], got {p}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"augment.crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        lo, hi = self.crop_ratio
        if not 0.0 < lo <= hi:
            raise ValueError(f"augment.crop_ratio must satisfy 0 < lo <= hi, got {self.crop_ratio}")
        if self.output_size < 1:
            raise ValueError(f"augment.output_size must be positive, got {self.output_size}")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ValueError(f"augment.{name} must be non-negative")
        if not 0.0 <= self.hue <= 0.5:
            raise ValueError(f"augment.hue must lie in [0, 0.5], got {self.hue}")
        lo, hi = self.blur_sigma
        if not 0.0 < lo <= hi:
            raise ValueError(f"augment.blur_sigma must satisfy 0 < lo <= hi, got {self.blur_sigma}")
        if self.blur_kernel < 0 or (self.blur_kernel and self.blur_kernel % 2 == 0):
            raise ValueError(f"augment.blur_kernel must be 0 (auto) or a positive odd integer, got {self.blur_kernel}")

    @classmethod
    def identity(cls, output_size: int = 16) -> "AugmentPolicy":
        return cls(output_size=output_size, crop=False, flip_p=0.0, jitter_p=0.0, gray_p=0.0, blur_p=0.0)

    @property
    def kernel_size(self) -> int:
        if self.blur_kernel:
            return self.blur_kernel
        k = int(round(0.1 * self.output_size))
        k = k if k % 2 == 1 else k + 1
        return max(3, k)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("crop_scale", "crop_ratio", "blur_sigma"):
            d[key] = list(d[key])
        return d


class ViewTriple(NamedTuple):
    a: torch.Tensor
    b: torch.Tensor
    c: torch.Tensor


def _as_batch(batch: torch.Tensor | Sequence[torch.Tensor]) -> torch.Tensor:
    if not isinstance(batch, torch.Tensor):
        if len(batch) == 0:
            raise ValueError("cannot augment an empty batch")
        batch = torch.stack(list(batch))
    if batch.dim() != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected a batch of shape (N, 3, H, W), got {tuple(batch.shape)}")
    if batch.shape[0] == 0:
        raise ValueError("cannot augment an empty batch")
    return batch


def resize(batch: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize to ``size`` x ``size``; a no-op copy when already that size."""
    if batch.shape[-2:] == (size, size):
        return batch.clone()
    return F.interpolate(batch, size=(size, size), mode="bilinear", align_corners=False).clamp_(0.0, 1.0)


def grayscale(batch: torch.Tensor) -> torch.Tensor:
    r, g, b = batch.unbind(dim=1)
    gray = _LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b
    return gray.unsqueeze(1).expand_as(batch).contiguous()


def _crop_boxes(rng: np.random.Generator, n: int, h: int, w: int, policy: AugmentPolicy) -> np.ndarray:
    """Random (top, left, height, width) boxes, 10 attempts per image, center-crop fallback."""
    attempts = 10
    area = h * w
    target = area * rng.uniform(*policy.crop_scale, size=(n, attempts))
    log_r = np.log(policy.crop_ratio)
    ratio = np.exp(rng.uniform(log_r[0], log_r[1], size=(n, attempts)))
    cw = np.rint(np.sqrt(target * ratio)).astype(np.int64)
    ch = np.rint(np.sqrt(target / ratio)).astype(np.int64)
    u_top = rng.random((n, attempts))
    u_left = rng.random((n, attempts))
    ok = (cw > 0) & (cw <= w) & (ch > 0) & (ch <= h)

    boxes = np.empty((n, 4), dtype=np.int64)
    for i in range(n):
        hits = np.flatnonzero(ok[i])
        if hits.size:
            k = hits[0]
            bh, bw = ch[i, k], cw[i, k]
            top = int(u_top[i, k] * (h - bh + 1))
            left = int(u_left[i, k] * (w - bw + 1))
        else:
            in_ratio = w / h
            if in_ratio < policy.crop_ratio[0]:
                bw = w
                bh = int(round(bw / policy.crop_ratio[0]))
            elif in_ratio > policy.crop_ratio[1]:
                bh = h
                bw = int(round(bh * policy.crop_ratio[1]))
            else:
                bw, bh = w, h
            top, left = (h - bh) // 2, (w - bw) // 2
        boxes[i] = (top, left, bh, bw)
    return boxes


def _crop_flip(batch: torch.Tensor, boxes: np.ndarray, flip: np.ndarray, size: int) -> torch.Tensor:
    n, _, h, w = batch.shape
    top, left, bh, bw = (torch.as_tensor(boxes[:, k], dtype=batch.dtype) for k in range(4))
    sx = bw / w
    sx = torch.where(torch.as_tensor(flip), -sx, sx)
    theta = torch.zeros(n, 2, 3, dtype=batch.dtype)
    theta[:, 0, 0] = sx
    theta[:, 0, 2] = (2 * left + bw) / w - 1
    theta[:, 1, 1] = bh / h
    theta[:, 1, 2] = (2 * top + bh) / h - 1
    grid = F.affine_grid(theta, [n, 3, size, size], align_corners=False)
    return F.grid_sample(batch, grid, mode="bilinear", padding_mode="border", align_corners=False)


def _blend(img: torch.Tensor, other: torch.Tensor, factor: torch.Tensor) -> torch.Tensor:
    f = factor.view(-1, 1, 1, 1)
    return (f * img + (1 - f) * other).clamp_(0.0, 1.0)


def _rgb_to_hsv(img: torch.Tensor) -> torch.Tensor:
    r, g, b = img.unbind(dim=1)
    maxc = img.max(dim=1).values
    minc = img.min(dim=1).values
    delta = maxc - minc
    eq = maxc == minc
    s = delta / torch.where(eq, torch.ones_like(maxc), maxc)
    d = torch.where(eq, torch.ones_like(delta), delta)
    rc, gc, bc = (maxc - r) / d, (maxc - g) / d, (maxc - b) / d
    hr = (maxc == r) * (bc - gc)
    hg = ((maxc == g) & (maxc != r)) * (2.0 + rc - bc)
    hb = ((maxc != g) & (maxc != r)) * (4.0 + gc - rc)
    hue = torch.fmod((hr + hg + hb) / 6.0 + 1.0, 1.0)
    return torch.stack([hue, s, maxc], dim=1)


def _hsv_to_rgb(img: torch.Tensor) -> torch.Tensor:
    h, s, v = img.unbind(dim=1)
    i = torch.floor(h * 6.0)
    f = h * 6.0 - i
    i = i.to(torch.int64) % 6
    p = (v * (1.0 - s)).clamp(0.0, 1.0)
    q = (v * (1.0 - s * f)).clamp(0.0, 1.0)
    t = (v * (1.0 - s * (1.0 - f))).clamp(0.0, 1.0)
    mask = i.unsqueeze(1) == torch.arange(6).view(1, -1, 1, 1)
    a1 = torch.stack([v, q, p, p, t, v], dim=1)
    a2 = torch.stack([t, v, v, q, p, p], dim=1)
    a3 = torch.stack([p, p, t, v, v, q], dim=1)
    out = torch.stack([(mask * a).sum(dim=1) for a in (a1, a2, a3)], dim=1)
    return out.to(img.dtype)


def _adjust_hue(img: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    hsv = _rgb_to_hsv(img)
    hsv[:, 0] = torch.remainder(hsv[:, 0] + shift.view(-1, 1, 1), 1.0)
    return _hsv_to_rgb(hsv).clamp_(0.0, 1.0)


def _jitter_op(op: int, img: torch.Tensor, factor: torch.Tensor) -> torch.Tensor:
    if op == 0:
        return (img * factor.view(-1, 1, 1, 1)).clamp_(0.0, 1.0)
    if op == 1:
        mean = grayscale(img)[:, :1].mean(dim=(-2, -1), keepdim=True)
        return _blend(img, mean.expand_as(img), factor)
    if op == 2:
        return _blend(img, grayscale(img), factor)
    return _adjust_hue(img, factor)


def _color_jitter(batch: torch.Tensor, active: np.ndarray, factors: np.ndarray, order: np.ndarray) -> torch.Tensor:
    out = batch.clone()
    f = torch.as_tensor(factors, dtype=batch.dtype)
    for step in range(4):
        for op in range(4):
            idx = np.flatnonzero(active & (order[:, step] == op))
            if idx.size == 0:
                continue
            sel = torch.as_tensor(idx)
            out[sel] = _jitter_op(op, out[sel], f[sel, op])
    return out


def _gaussian_blur(batch: torch.Tensor, sigma: np.ndarray, k: int) -> torch.Tensor:
    n, c, h, w = batch.shape
    half = (k - 1) / 2
    x = torch.linspace(-half, half, k, dtype=batch.dtype)
    sig = torch.as_tensor(sigma, dtype=batch.dtype).view(-1, 1)
    kernel = torch.exp(-0.5 * (x.view(1, -1) / sig) ** 2)
    kernel = kernel / kernel.sum(dim=1, keepdim=True)
    kernel = kernel.repeat_interleave(c, dim=0)  # (n*c, k)
    pad = k // 2
    mode = "reflect" if min(h, w) > pad else "replicate"
    flat = batch.reshape(1, n * c, h, w)
    flat = F.pad(flat, (pad, pad, pad, pad), mode=mode)
    flat = F.conv2d(flat, kernel.view(n * c, 1, 1, k), groups=n * c)
    flat = F.conv2d(flat, kernel.view(n * c, 1, k, 1), groups=n * c)
    return flat.view(n, c, h, w)


def augment_batch(batch: torch.Tensor, policy: AugmentPolicy, rng: np.random.Generator) -> torch.Tensor:
    """One independent stochastic draw of ``policy`` for every image in ``batch``."""
    batch = _as_batch(batch)
    n, _, h, w = batch.shape
    if h * w * policy.crop_scale[0] < 1:
        raise ValueError(f"image of size {h}x{w} is smaller than the minimum crop (scale {policy.crop_scale[0]})")
    size = policy.output_size

    # all parameters are drawn up front, in a fixed order, whether or not a transform fires
    if policy.crop:
        boxes = _crop_boxes(rng, n, h, w, policy)
    else:
        boxes = np.tile(np.array([0, 0, h, w], dtype=np.int64), (n, 1))
    flip = rng.random(n) < policy.flip_p
    jitter = rng.random(n) < policy.jitter_p
    order = np.argsort(rng.random((n, 4)), axis=1)
    lows = [max(0.0, 1 - policy.brightness), max(0.0, 1 - policy.contrast), max(0.0, 1 - policy.saturation), -policy.hue]
    highs = [1 + policy.brightness, 1 + policy.contrast, 1 + policy.saturation, policy.hue]
    factors = rng.uniform(lows, highs, size=(n, 4))
    gray = rng.random(n) < policy.gray_p
    blur = rng.random(n) < policy.blur_p
    sigma = rng.uniform(*policy.blur_sigma, size=n)

    if policy.crop:
        out = _crop_flip(batch, boxes, flip, size)
    else:
        out = resize(batch, size)
        if flip.any():
            idx = torch.as_tensor(np.flatnonzero(flip))
            out[idx] = out[idx].flip(-1)
    out = out.clamp_(0.0, 1.0)
    if jitter.any():
        out = _color_jitter(out, jitter, factors, order)
    if gray.any():
        idx = torch.as_tensor(np.flatnonzero(gray))
        out[idx] = grayscale(out[idx])
    if blur.any():
        idx = torch.as_tensor(np.flatnonzero(blur))
        out[idx] = _gaussian_blur(out[idx], sigma[idx.numpy()], policy.kernel_size)
    return out.clamp_(0.0, 1.0)


def apply_policy(img: torch.Tensor, policy: AugmentPolicy, rng: np.random.Generator) -> torch.Tensor:
    if img.dim() != 3:
        raise ValueError(f"expected a single image of shape (3, H, W), got {tuple(img.shape)}")
    return augment_batch(img.unsqueeze(0), policy, rng)[0]


def make_views(
    batch: torch.Tensor | Sequence[torch.Tensor], policy: AugmentPolicy, rng: np.random.Generator
) -> ViewTriple:
    """Three augmented views of ``batch``, each drawn from its own child generator."""
    batch = _as_batch(batch)
    streams = rng.spawn(3)
    return ViewTriple(*(augment_batch(batch, policy, s) for s in streams))


__all__ = [
    "AugmentPolicy",
    "ViewTriple",
    "apply_policy",
    "augment_batch",
    "grayscale",
    "make_views",
    "resize",
]
