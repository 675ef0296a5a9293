"""Datasets: image folders, CIFAR binary batches and a synthetic desk benchmark.

Every loader returns a ``LabeledImageSet`` whose pixels are float32 in [0, 1],
stored (N, H, W, 3).
"""
from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
CIFAR_PIXELS = 3072


class DatasetError(ValueError):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise DatasetError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError("labels outside [0, n_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Images as an (N, 3, H, W) tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.images.transpose(0, 3, 1, 2))).to(dtype)


def _read_image(path: Path, resolution: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot read image file {path}: {exc}") from exc


def load_image_folder(path: str | Path, resolution: int) -> LabeledImageSet:
    """One subdirectory per class; classes and files are taken in sorted order."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root} contains no class directories")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class directory {d} contains no images")
        for f in files:
            images.append(_read_image(f, resolution))
            labels.append(label)
    return LabeledImageSet(
        np.stack(images), np.asarray(labels, dtype=np.int64), len(class_dirs), class_names=[d.name for d in class_dirs]
    )


def _cifar_layout(variant: str) -> tuple[int, int]:
    """(label bytes per record, index of the label byte used)."""
    if variant == "cifar10":
        return 1, 0
    if variant == "cifar100-coarse":
        return 2, 0
    if variant == "cifar100-fine":
        return 2, 1
    raise DatasetError(f"unknown CIFAR variant {variant!r}")


CIFAR_CLASSES = {"cifar10": 10, "cifar100-coarse": 20, "cifar100-fine": 100}


def load_cifar_binary(path: str | Path | Sequence[str | Path], variant: str = "cifar100-coarse") -> LabeledImageSet:
    """Parse CIFAR binary batch files (label byte(s) followed by 1024 R, G, B bytes each).

    ``variant`` is ``cifar10``, ``cifar100-coarse`` (20 superclasses) or ``cifar100-fine``.
    """
    paths = [Path(path)] if isinstance(path, (str, Path)) else [Path(p) for p in path]
    n_label, which = _cifar_layout(variant)
    n_classes = CIFAR_CLASSES[variant]
    record = n_label + CIFAR_PIXELS
    pixel_chunks, label_chunks = [], []
    for p in paths:
        raw = np.frombuffer(p.read_bytes(), dtype=np.uint8)
        if raw.size == 0 or raw.size % record:
            full = raw.size // record
            raise DatasetError(
                f"{p}: truncated record at byte offset {full * record} "
                f"(file has {raw.size} bytes, records are {record} bytes)"
            )
        recs = raw.reshape(-1, record)
        labels = recs[:, which].astype(np.int64)
        bad = np.flatnonzero(labels >= n_classes)
        if bad.size:
            k = int(bad[0])
            raise DatasetError(
                f"{p}: label {labels[k]} out of range for {variant} at byte offset {k * record + which}"
            )
        pixel_chunks.append(recs[:, n_label:])
        label_chunks.append(labels)
    pixels = np.concatenate(pixel_chunks)
    images = pixels.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return LabeledImageSet(images, np.concatenate(label_chunks), n_classes)


def encode_cifar_binary(pixels: np.ndarray, labels: np.ndarray, variant: str = "cifar10", fine: np.ndarray | None = None) -> bytes:
    """Inverse of ``load_cifar_binary`` for uint8 (N, 32, 32, 3) pixels."""
    n_label, which = _cifar_layout(variant)
    pixels = np.asarray(pixels, dtype=np.uint8)
    recs = np.zeros((len(pixels), n_label + CIFAR_PIXELS), dtype=np.uint8)
    recs[:, which] = labels
    if n_label == 2:
        other = 1 - which
        recs[:, other] = fine if fine is not None else 0
    recs[:, n_label:] = pixels.transpose(0, 3, 1, 2).reshape(len(pixels), -1)
    return recs.tobytes()


# ------------------------------------------------------------------ synthetic

# (hue in degrees, brightness tier, shading direction) per class. Neighbouring
# classes in the same tier shade in opposite directions and the tiers differ by
# more than the brightness jitter range, so classes stay apart even in grayscale.
CLASS_TABLE = (
    (60, "bright", "up"),
    (150, "bright", "down"),
    (240, "dark", "up"),
    (330, "dark", "down"),
    (0, "mid", "up"),
    (195, "mid", "down"),
    (105, "bright", "up"),
    (285, "dark", "down"),
)


@dataclass
class SyntheticSpec:
    n_clusters: int = 4
    per_cluster: int = 150
    resolution: int = 16
    noise: float = 0.1
    seed: int = 0
    saturation: float = 0.6
    bright_value: float = 1.0
    mid_value: float = 0.6
    dark_value: float = 0.3
    # darkest fraction of the shading ramp
    shade_floor: float = 0.25
    color_jitter: float = 0.04

    def __post_init__(self) -> None:
        if self.n_clusters < 2:
            raise ValueError("synthetic.n_clusters must be at least 2")
        if self.n_clusters > len(CLASS_TABLE):
            raise ValueError(f"synthetic.n_clusters must be at most {len(CLASS_TABLE)}")
        if self.per_cluster < 1:
            raise ValueError("synthetic.per_cluster must be positive")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError(f"synthetic.noise must lie in [0, 1), got {self.noise}")
        if self.resolution < 2:
            raise ValueError("synthetic.resolution must be at least 2")
        if not 0.0 <= self.shade_floor <= 1.0:
            raise ValueError("synthetic.shade_floor must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def class_colors(spec: SyntheticSpec) -> np.ndarray:
    tiers = {"bright": spec.bright_value, "mid": spec.mid_value, "dark": spec.dark_value}
    return np.asarray(
        [colorsys.hsv_to_rgb(hue / 360, spec.saturation, tiers[tier]) for hue, tier, _ in CLASS_TABLE[: spec.n_clusters]]
    )


def _shading(direction: str, res: int) -> np.ndarray:
    ramp = np.linspace(0.0, 1.0, res)[:, None].repeat(res, axis=1)
    return ramp if direction == "up" else ramp[::-1]


def make_synthetic(spec: SyntheticSpec) -> LabeledImageSet:
    """Classes differ in hue, brightness tier and vertical shading direction."""
    rng = np.random.default_rng(spec.seed)
    res = spec.resolution
    colors = class_colors(spec)
    labels = np.repeat(np.arange(spec.n_clusters), spec.per_cluster)
    images = np.empty((labels.size, res, res, 3), dtype=np.float32)
    for i, k in enumerate(labels):
        base = np.clip(colors[k] + rng.normal(0, spec.color_jitter, size=3), 0, 1)
        shade = spec.shade_floor + (1 - spec.shade_floor) * _shading(CLASS_TABLE[k][2], res)
        img = base * shade[..., None] + spec.noise * rng.standard_normal((res, res, 3))
        images[i] = np.clip(img, 0.0, 1.0)
    names = [f"{CLASS_TABLE[k][0]}deg-{CLASS_TABLE[k][1]}-{CLASS_TABLE[k][2]}" for k in range(spec.n_clusters)]
    return LabeledImageSet(images, labels.astype(np.int64), spec.n_clusters, split="train", class_names=names)
