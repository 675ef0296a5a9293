"""Online and target networks.

The online network (parameters theta) is backbone -> projector -> {instance
predictor, cluster predictor}. Both online streams call the same module, so
weight sharing is literal. The target network (parameters xi) has the same
backbone, projector and cluster predictor but no instance predictor.
"""
from __future__ import annotations

import copy
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .numerics import softmax_rows

CHECKPOINT_VERSION = "triclust-ckpt/1"
ARCHITECTURES = ("tiny-cnn", "resnet34-shaped")
NORMS = ("layer", "batch", "none")


@dataclass
class BackboneSpec:
    arch: str = "tiny-cnn"
    resolution: int = 16
    feature_dim: int = 128
    channels: tuple[int, ...] = (32, 64, 128)

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"model.arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if self.feature_dim <= 0:
            raise ValueError("model.feature_dim must be positive")
        if self.resolution < 1:
            raise ValueError("model.resolution must be positive")


@dataclass
class HeadSpec:
    hidden: int = 512
    out: int = 256
    cluster_hidden: int = 512
    # "batch" couples the rows of a training batch (not in eval mode); "layer" never does
    norm: str = "batch"

    def __post_init__(self) -> None:
        if self.norm not in NORMS:
            raise ValueError(f"model.norm must be one of {NORMS}, got {self.norm!r}")
        if min(self.hidden, self.out, self.cluster_hidden) <= 0:
            raise ValueError("head widths must be positive")


def _norm(kind: str, width: int) -> nn.Module:
    if kind == "layer":
        return nn.LayerNorm(width)
    if kind == "batch":
        return nn.BatchNorm1d(width)
    return nn.Identity()


def mlp(in_dim: int, hidden: int, out_dim: int, norm: str = "layer") -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), _norm(norm, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))


class TinyCNN(nn.Module):
    """Four 3x3 conv blocks with 2x2 average pooling between them, then global average pooling."""

    def __init__(self, channels: tuple[int, ...] = (32, 64, 128), feature_dim: int = 128):
        super().__init__()
        widths = (*channels, feature_dim)
        layers: list[nn.Module] = []
        c_in = 3
        for k, c_out in enumerate(widths):
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(inplace=True)]
            if k < len(widths) - 1:
                layers.append(nn.AvgPool2d(2, ceil_mode=True))
            c_in = c_out
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def build_backbone(spec: BackboneSpec) -> nn.Module:
    if spec.arch == "tiny-cnn":
        return TinyCNN(spec.channels, spec.feature_dim)
    from torchvision.models import resnet34

    net = resnet34(weights=None, num_classes=spec.feature_dim)
    return net


class OnlineNetwork(nn.Module):
    def __init__(self, spec: BackboneSpec, heads: HeadSpec, n_clusters: int):
        super().__init__()
        self.resolution = spec.resolution
        self.backbone = build_backbone(spec)
        self.projector = mlp(spec.feature_dim, heads.hidden, heads.out, heads.norm)
        self.predictor = mlp(heads.out, heads.hidden, heads.out, heads.norm)
        self.cluster_head = nn.Sequential(
            nn.Linear(heads.out, heads.cluster_hidden), nn.ReLU(inplace=True), nn.Linear(heads.cluster_hidden, n_clusters)
        )


class TargetNetwork(nn.Module):
    def __init__(self, spec: BackboneSpec, heads: HeadSpec, n_clusters: int):
        super().__init__()
        self.resolution = spec.resolution
        self.backbone = build_backbone(spec)
        self.projector = mlp(spec.feature_dim, heads.hidden, heads.out, heads.norm)
        self.cluster_head = nn.Sequential(
            nn.Linear(heads.out, heads.cluster_hidden), nn.ReLU(inplace=True), nn.Linear(heads.cluster_hidden, n_clusters)
        )


# parts of theta mirrored by xi
SHARED_PARTS = ("backbone", "projector", "cluster_head")


@dataclass
class NetworkParams:
    online: OnlineNetwork
    target: TargetNetwork
    spec: BackboneSpec
    heads: HeadSpec = field(default_factory=HeadSpec)
    n_clusters: int = 2

    def paired_tensors(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """(xi tensor, theta tensor) pairs, parameters and buffers, in a fixed order."""
        pairs = []
        for part in SHARED_PARTS:
            src, dst = getattr(self.online, part), getattr(self.target, part)
            pairs += list(zip(dst.parameters(), src.parameters()))
            pairs += [(b_t, b_o) for b_t, b_o in zip(dst.buffers(), src.buffers()) if b_t.is_floating_point()]
        return pairs

    def to(self, dtype: torch.dtype) -> "NetworkParams":
        self.online.to(dtype)
        self.target.to(dtype)
        return self


def _target_from_online(online: OnlineNetwork, spec: BackboneSpec, heads: HeadSpec, n_clusters: int) -> TargetNetwork:
    target = TargetNetwork(spec, heads, n_clusters)
    for part in SHARED_PARTS:
        getattr(target, part).load_state_dict(copy.deepcopy(getattr(online, part).state_dict()))
    target.to(next(online.parameters()).dtype)
    for p in target.parameters():
        p.requires_grad_(False)
    return target


def init_params(
    spec: BackboneSpec,
    n_clusters: int,
    seed: int,
    heads: HeadSpec | None = None,
    dtype: torch.dtype = torch.float32,
) -> NetworkParams:
    """Fan-in scaled random theta (torch defaults) with xi an exact copy of its shared subset."""
    if n_clusters < 2:
        raise ValueError(f"n_clusters must be at least 2, got {n_clusters}")
    heads = heads or HeadSpec()
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        online = OnlineNetwork(spec, heads, n_clusters).to(dtype)
        target = _target_from_online(online, spec, heads, n_clusters)
    finally:
        torch.random.set_rng_state(gen_state)
    return NetworkParams(online, target, spec, heads, n_clusters)


def _check_input(x: torch.Tensor, resolution: int) -> None:
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[-2:] != (resolution, resolution):
        raise ValueError(f"expected input of shape (N, 3, {resolution}, {resolution}), got {tuple(x.shape)}")


def forward_online(
    net: OnlineNetwork, x: torch.Tensor, use_predictor: bool = True
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(z, y, q) for a batch; with ``use_predictor=False`` y is z itself."""
    _check_input(x, net.resolution)
    z = net.projector(net.backbone(x))
    y = net.predictor(z) if use_predictor else z
    q = softmax_rows(net.cluster_head(z))
    return z, y, q


def forward_target(net: TargetNetwork, x: torch.Tensor, detach: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """(z, q) from the target network; detached unless the stop-gradient is lifted."""
    _check_input(x, net.resolution)
    with torch.set_grad_enabled(torch.is_grad_enabled() and not detach):
        z = net.projector(net.backbone(x))
        q = softmax_rows(net.cluster_head(z))
    if detach:
        return z.detach(), q.detach()
    return z, q


def cluster_probabilities(net: nn.Module, x: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    _check_input(x, net.resolution)
    was_training = net.training
    net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            z = net.projector(net.backbone(x[start : start + batch_size]))
            out.append(softmax_rows(net.cluster_head(z)).cpu().numpy())
    net.train(was_training)
    return np.concatenate(out, axis=0)


def labels_from_probabilities(q: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    return np.argmax(np.asarray(q), axis=1).astype(np.int64)


def assign_clusters(net: nn.Module, x: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    return labels_from_probabilities(cluster_probabilities(net, x, batch_size))


# ---------------------------------------------------------------- checkpoints


def _canonical(obj):
    """Rebuild JSON-able metadata from its text so pickled bytes never depend on object sharing."""
    try:
        return json.loads(json.dumps(obj))
    except TypeError:
        return obj


def checkpoint_payload(params: NetworkParams, extra: dict | None = None) -> dict:
    spec = asdict(params.spec)
    spec["channels"] = list(spec["channels"])
    payload = _canonical(
        {
            "version": CHECKPOINT_VERSION,
            "backbone": spec,
            "heads": asdict(params.heads),
            "n_clusters": params.n_clusters,
            "dtype": str(next(params.online.parameters()).dtype).removeprefix("torch."),
        }
    )
    payload["online"] = params.online.state_dict()
    payload["target"] = params.target.state_dict()
    for key, value in (extra or {}).items():
        payload[key] = _canonical(value)
    return payload


def save_checkpoint(path: str | Path, params: NetworkParams, extra: dict | None = None) -> None:
    buf = io.BytesIO()
    torch.save(checkpoint_payload(params, extra), buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[NetworkParams, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a checkpoint of version {CHECKPOINT_VERSION}")
    spec = BackboneSpec(**payload["backbone"])
    heads = HeadSpec(**payload["heads"])
    m = payload["n_clusters"]
    dtype = getattr(torch, payload["dtype"])
    online = OnlineNetwork(spec, heads, m).to(dtype)
    online.load_state_dict(payload["online"])
    target = TargetNetwork(spec, heads, m).to(dtype)
    target.load_state_dict(payload["target"])
    for p in target.parameters():
        p.requires_grad_(False)
    return NetworkParams(online, target, spec, heads, m), payload
