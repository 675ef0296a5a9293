"""Training loop: overall loss, Adam step on the online network, EMA of the target.

``train_step`` mutates the networks and optimizer in place. ``train_run``
drives epochs, evaluates the target network's cluster assignments after every
epoch and writes checkpoints plus a JSONL epoch log to the run directory.
"""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .augment import ViewTriple, make_views, resize
from .cluster_loss import cluster_infonce_pair, cluster_loss
from .config import AblationSwitches, RunConfig, save_config
from .data import LabeledImageSet
from .instance_loss import view_pair_loss
from .metrics import evaluate, largest_cluster_share
from .model import (
    NetworkParams,
    assign_clusters,
    forward_online,
    forward_target,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

EPOCH_LOG = "epochs.jsonl"
TIMINGS = "timings.csv"
SUMMARY = "summary.csv"
CHECKPOINT_DIR = "checkpoints"
LAST_CHECKPOINT = "last.pt"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {json.dumps(diagnostics)}")
        self.diagnostics = diagnostics


@dataclass
class RepresentationBundle:
    """Per-view outputs of one step. ``*_t`` fields come from the target network."""

    z_a: torch.Tensor | None = None
    z_c: torch.Tensor | None = None
    y_a: torch.Tensor | None = None
    y_b: torch.Tensor | None = None
    y_c: torch.Tensor | None = None
    q_a: torch.Tensor | None = None
    q_c: torch.Tensor | None = None
    z_b: torch.Tensor | None = None
    q_b: torch.Tensor | None = None
    z_a_t: torch.Tensor | None = None
    z_c_t: torch.Tensor | None = None


@dataclass
class StepLosses:
    instance: torch.Tensor
    cluster: torch.Tensor
    total: torch.Tensor

    def floats(self) -> tuple[float, float, float]:
        return float(self.instance.detach()), float(self.cluster.detach()), float(self.total.detach())


@dataclass
class EpochRecord:
    epoch: int
    loss_instance: float
    loss_cluster: float
    loss_total: float
    nmi: float
    acc: float
    ari: float
    largest_cluster_share: float
    wall_time: float = field(default=0.0, compare=False)

    def log_dict(self) -> dict:
        """Fields written to the epoch log (wall time is kept out so logs are reproducible)."""
        d = asdict(self)
        d.pop("wall_time")
        return d


# ---------------------------------------------------------------- precision


@contextlib.contextmanager
def precision_mode(mode: str) -> Iterator[None]:
    """``fixed``: deterministic kernels on one thread. ``fast``: torch defaults."""
    prev_det = torch.are_deterministic_algorithms_enabled()
    prev_threads = torch.get_num_threads()
    try:
        if mode == "fixed":
            torch.use_deterministic_algorithms(True)
            torch.set_num_threads(1)
        yield
    finally:
        torch.use_deterministic_algorithms(prev_det)
        torch.set_num_threads(prev_threads)


def _dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


# ---------------------------------------------------------------- one step


def compute_bundle(
    nets: NetworkParams, views: ViewTriple, switches: AblationSwitches, exchange: bool
) -> RepresentationBundle:
    """Forward the views required by ``switches`` through the online and target networks."""
    n = views.a.shape[0]
    mode = switches.stream_mode
    detach = switches.use_stop_gradient
    bundle = RepresentationBundle()

    if mode == "tri":
        online_views = [views.a, views.c] + ([views.b] if exchange else [])
        target_views = [views.b] + ([views.a, views.c] if exchange else [])
    elif mode == "dual_online_target":
        online_views = [views.a] + ([views.b] if exchange else [])
        target_views = [views.b] + ([views.a] if exchange else [])
    else:
        online_views = [views.a, views.c]
        target_views = []

    # rows are processed independently, so one concatenated pass equals separate passes
    z, y, q = forward_online(nets.online, torch.cat(online_views), switches.use_predictor)
    zs, ys, qs = z.split(n), y.split(n), q.split(n)
    if mode == "tri":
        bundle.z_a, bundle.z_c = zs[0], zs[1]
        bundle.y_a, bundle.y_c = ys[0], ys[1]
        bundle.q_a, bundle.q_c = qs[0], qs[1]
        if exchange:
            bundle.y_b = ys[2]
    elif mode == "dual_online_target":
        bundle.z_a, bundle.y_a, bundle.q_a = zs[0], ys[0], qs[0]
        if exchange:
            bundle.y_b = ys[1]
    else:
        bundle.z_a, bundle.z_c = zs
        bundle.y_a, bundle.y_c = ys
        bundle.q_a, bundle.q_c = qs

    if target_views:
        zt, qt = forward_target(nets.target, torch.cat(target_views), detach=detach)
        zts, qts = zt.split(n), qt.split(n)
        bundle.z_b, bundle.q_b = zts[0], qts[0]
        if exchange and mode == "tri":
            bundle.z_a_t, bundle.z_c_t = zts[1], zts[2]
        elif exchange:
            bundle.z_a_t = zts[1]
    return bundle


def total_loss(
    bundle: RepresentationBundle,
    tau: float,
    switches: AblationSwitches,
    exchange: bool = True,
    include_self_term: bool = False,
) -> StepLosses:
    """Instance loss plus cluster loss, each gated by its switch."""
    if not (switches.use_instance_loss or switches.use_cluster_loss):
        raise ValueError("at least one loss must be enabled")
    sg = (lambda t: t.detach()) if switches.use_stop_gradient else (lambda t: t)
    mode = switches.stream_mode
    zero = bundle.y_a.new_zeros(())

    inst = zero
    if switches.use_instance_loss:
        if mode == "tri":
            inst = view_pair_loss(bundle.y_a, sg(bundle.z_b)) + view_pair_loss(bundle.y_c, sg(bundle.z_b))
            if exchange:
                inst = inst + view_pair_loss(bundle.y_b, sg(bundle.z_a_t)) + view_pair_loss(bundle.y_b, sg(bundle.z_c_t))
        elif mode == "dual_online_target":
            inst = view_pair_loss(bundle.y_a, sg(bundle.z_b))
            if exchange:
                inst = inst + view_pair_loss(bundle.y_b, sg(bundle.z_a_t))
        else:
            # two trainable streams predict each other's detached projections
            inst = view_pair_loss(bundle.y_a, bundle.z_c.detach()) + view_pair_loss(bundle.y_c, bundle.z_a.detach())

    clus = zero
    if switches.use_cluster_loss:
        kw = dict(include_self_term=include_self_term, use_entropy=switches.use_entropy)
        if mode == "tri":
            clus = cluster_loss(bundle.q_a, sg(bundle.q_b), bundle.q_c, tau, **kw)
        elif mode == "dual_online_target":
            clus = cluster_infonce_pair(bundle.q_a, sg(bundle.q_b), tau, **kw)
        else:
            clus = cluster_infonce_pair(bundle.q_a, bundle.q_c, tau, **kw)
    return StepLosses(inst, clus, inst + clus)


def trainable_parameters(nets: NetworkParams, switches: AblationSwitches) -> list[torch.nn.Parameter]:
    params = list(nets.online.parameters())
    if switches.uses_target and not switches.use_stop_gradient:
        params += list(nets.target.parameters())
    return params


def configure_target(nets: NetworkParams, switches: AblationSwitches) -> None:
    """Set which of xi the optimizer may touch.

    Under EMA the target's batch-norm running statistics also move only through
    the EMA, so its own forward passes leave them alone (momentum 0).
    """
    trainable = switches.uses_target and not switches.use_stop_gradient
    for p in nets.target.parameters():
        p.requires_grad_(trainable)
    for m in nets.target.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            m.momentum = 0.0 if switches.uses_ema else 0.1


def build_optimizer(nets: NetworkParams, config: RunConfig) -> torch.optim.Adam:
    o = config.optim
    return torch.optim.Adam(
        trainable_parameters(nets, config.ablation),
        lr=o.lr,
        betas=tuple(o.betas),
        eps=o.eps,
        weight_decay=o.weight_decay,
    )


@torch.no_grad()
def ema_update(nets: NetworkParams, alpha: float) -> None:
    """xi <- alpha * xi + (1 - alpha) * theta on every shared tensor."""
    for xi, theta in nets.paired_tensors():
        xi.copy_(alpha * xi + (1.0 - alpha) * theta)


def _grad_norms(params: list[torch.nn.Parameter]) -> dict:
    norms = [float(p.grad.norm()) for p in params if p.grad is not None]
    return {"max": max(norms, default=0.0), "total": float(math.sqrt(sum(n * n for n in norms)))}


def train_step(
    nets: NetworkParams,
    optimizer: torch.optim.Optimizer,
    batch: torch.Tensor,
    config: RunConfig,
    rng: np.random.Generator,
) -> StepLosses:
    switches = config.ablation
    exchange = config.loss.exchange == "exchange"
    views = make_views(batch, config.augment, rng)
    bundle = compute_bundle(nets, views, switches, exchange)
    losses = total_loss(bundle, config.loss.temperature, switches, exchange, config.loss.include_self_term)

    params = [p for g in optimizer.param_groups for p in g["params"]]
    optimizer.zero_grad(set_to_none=True)
    if not torch.isfinite(losses.total):
        inst, clus, tot = losses.floats()
        raise NonFiniteLossError(
            "non-finite loss", {"instance": inst, "cluster": clus, "total": tot, "grad_norm": _grad_norms(params)}
        )
    losses.total.backward()
    gn = _grad_norms(params)
    if not math.isfinite(gn["total"]):
        inst, clus, tot = losses.floats()
        raise NonFiniteLossError("non-finite gradient", {"instance": inst, "cluster": clus, "total": tot, "grad_norm": gn})
    optimizer.step()
    if switches.uses_ema:
        ema_update(nets, config.ema.alpha)
    return StepLosses(losses.instance.detach(), losses.cluster.detach(), losses.total.detach())


# ---------------------------------------------------------------- evaluation


def clustering_network(nets: NetworkParams, switches: AblationSwitches) -> torch.nn.Module:
    """The target network clusters; with two online streams there is no target, so the online one does."""
    return nets.target if switches.uses_target else nets.online


def evaluate_nets(
    nets: NetworkParams, images: torch.Tensor, labels: np.ndarray, switches: AblationSwitches, average: str = "arithmetic"
) -> dict[str, float]:
    pred = assign_clusters(clustering_network(nets, switches), images)
    scores = evaluate(pred, labels, average)
    scores["largest_cluster_share"] = largest_cluster_share(pred)
    return scores


# ---------------------------------------------------------------- full run


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Generator for shuffling and augmentation in ``epoch``; independent of any earlier epoch."""
    return np.random.default_rng([seed, epoch])


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    chunks = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    # the cluster loss needs at least two rows
    return [c for c in chunks if c.size >= 2]


def _latest_checkpoint(out_dir: Path, upto: int) -> Path | None:
    """Newest checkpoint in ``out_dir`` whose epoch does not exceed ``upto``."""
    ckpt_dir = out_dir / CHECKPOINT_DIR
    last = ckpt_dir / LAST_CHECKPOINT
    if not last.exists():
        return None
    if torch.load(last, map_location="cpu", weights_only=False)["epoch"] <= upto:
        return last
    earlier = [p for p in ckpt_dir.glob("epoch_*.pt") if int(p.stem.split("_")[1]) <= upto]
    return max(earlier, key=lambda p: int(p.stem.split("_")[1]), default=None)


def _read_records(path: Path, upto: int) -> list[EpochRecord]:
    if not path.exists():
        return []
    records = []
    for line in path.read_text().splitlines():
        if line.strip():
            rec = EpochRecord(**json.loads(line))
            if rec.epoch <= upto:
                records.append(rec)
    return records


def checkpoint_config(config: RunConfig) -> dict:
    d = config.to_dict()
    d["run"].pop("out_dir")
    return d


def _write_summary(out_dir: Path, config: RunConfig, records: list[EpochRecord]) -> None:
    fields = ["seed", "stream_mode", "epochs", "nmi", "acc", "ari", "loss_total", "largest_cluster_share"]
    with open(out_dir / SUMMARY, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        if records:
            r = records[-1]
            w.writerow(
                [config.run.seed, config.ablation.stream_mode, r.epoch, r.nmi, r.acc, r.ari, r.loss_total, r.largest_cluster_share]
            )


def prepare_images(dataset: LabeledImageSet, resolution: int, dtype: torch.dtype) -> torch.Tensor:
    return resize(dataset.tensor(dtype), resolution)


def train_run(
    config: RunConfig,
    dataset: LabeledImageSet,
    out_dir: str | Path | None = None,
    resume: bool = True,
) -> tuple[NetworkParams, list[EpochRecord]]:
    """Train for ``config.optim.epochs`` epochs; resumes from ``out_dir`` when a checkpoint exists."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.n_classes != config.model.n_clusters:
        log.warning("dataset has %d classes but the model clusters into %d", dataset.n_classes, config.model.n_clusters)
    out = Path(out_dir) if out_dir is not None else None
    dtype = _dtype(config.run.dtype)

    with precision_mode(config.run.precision):
        images = prepare_images(dataset, config.model.resolution, dtype)
        labels = dataset.labels
        switches = config.ablation

        nets = init_params(
            config.model.backbone_spec(), config.model.n_clusters, config.run.seed, config.model.head_spec(), dtype
        )
        configure_target(nets, switches)
        optimizer = build_optimizer(nets, config)
        start = 0
        records: list[EpochRecord] = []

        if out is not None:
            (out / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
            ckpt = _latest_checkpoint(out, config.optim.epochs) if resume else None
            if ckpt is not None:
                nets, payload = load_checkpoint(ckpt)
                configure_target(nets, switches)
                optimizer = build_optimizer(nets, config)
                optimizer.load_state_dict(payload["optimizer"])
                start = payload["epoch"]
                records = _read_records(out / EPOCH_LOG, start)
                log.info("resuming %s from epoch %d", out, start)
            save_config(config, out / "config.yaml")
            # rewrite the log so it holds exactly the epochs covered by the checkpoint
            with open(out / EPOCH_LOG, "w") as fh:
                for r in records:
                    fh.write(json.dumps(r.log_dict()) + "\n")
            if start == 0:
                (out / TIMINGS).write_text("epoch,wall_time\n")

        for epoch in range(start + 1, config.optim.epochs + 1):
            t0 = time.perf_counter()
            rng = epoch_rng(config.run.seed, epoch)
            sums = np.zeros(3)
            batches = _batches(len(images), config.optim.batch_size, rng)
            for idx in batches:
                losses = train_step(nets, optimizer, images[torch.as_tensor(idx)], config, rng)
                sums += losses.floats()
            means = sums / max(len(batches), 1)
            scores = evaluate_nets(nets, images, labels, switches, config.eval.nmi_average)
            rec = EpochRecord(
                epoch=epoch,
                loss_instance=float(means[0]),
                loss_cluster=float(means[1]),
                loss_total=float(means[0] + means[1]),
                nmi=scores["nmi"],
                acc=scores["acc"],
                ari=scores["ari"],
                largest_cluster_share=scores["largest_cluster_share"],
                wall_time=time.perf_counter() - t0,
            )
            records.append(rec)
            log.info(
                "epoch %d loss %.4f (inst %.4f clus %.4f) nmi %.4f acc %.4f ari %.4f",
                epoch, rec.loss_total, rec.loss_instance, rec.loss_cluster, rec.nmi, rec.acc, rec.ari,
            )
            if out is not None:
                with open(out / EPOCH_LOG, "a") as fh:
                    fh.write(json.dumps(rec.log_dict()) + "\n")
                with open(out / TIMINGS, "a") as fh:
                    fh.write(f"{epoch},{rec.wall_time:.4f}\n")
                if epoch % config.run.checkpoint_every == 0 or epoch == config.optim.epochs:
                    extra = {"epoch": epoch, "optimizer": optimizer.state_dict(), "config": checkpoint_config(config)}
                    save_checkpoint(out / CHECKPOINT_DIR / f"epoch_{epoch:04d}.pt", nets, extra)
                    save_checkpoint(out / CHECKPOINT_DIR / LAST_CHECKPOINT, nets, extra)

        if out is not None:
            _write_summary(out, config, records)
    return nets, records


# ---------------------------------------------------------------- ablations

ABLATION_VARIANTS: dict[str, dict] = {
    "tri_stream": {},
    "dual_online_target": {"stream_mode": "dual_online_target"},
    "dual_online_online": {"stream_mode": "dual_online_online"},
    "instance_only": {"use_cluster_loss": False},
    "cluster_only": {"use_instance_loss": False},
    "no_predictor": {"use_predictor": False},
    "no_stop_gradient": {"use_stop_gradient": False},
}


@dataclass
class AblationResult:
    variant: str
    switches: AblationSwitches
    seeds: list[int]
    finals: list[EpochRecord]

    def median(self, key: str) -> float:
        return float(np.median([getattr(r, key) for r in self.finals]))


def variant_switches(base: AblationSwitches, variant: str) -> AblationSwitches:
    """Full-model switches with one ablation applied; ``baseline`` returns ``base`` unchanged."""
    if variant == "baseline":
        return base
    full = asdict(AblationSwitches())
    full["use_entropy"] = base.use_entropy
    full.update(ABLATION_VARIANTS[variant])
    return AblationSwitches(**full)


def run_ablation(
    base: RunConfig,
    dataset: LabeledImageSet,
    seeds: list[int],
    out_dir: str | Path | None = None,
    variants: list[str] | None = None,
) -> list[AblationResult]:
    """Baseline plus every ablation variant, each over ``seeds``; identical configurations run once."""
    names = ["baseline"] + (variants or list(ABLATION_VARIANTS))
    cache: dict[tuple, list[EpochRecord]] = {}
    results = []
    for name in names:
        sw = variant_switches(base.ablation, name)
        key = tuple(asdict(sw).items())
        if key not in cache:
            finals = []
            for seed in seeds:
                cfg = base.replace(ablation=sw, run={"seed": seed})
                run_dir = Path(out_dir) / name / f"seed{seed}" if out_dir is not None else None
                _, records = train_run(cfg, dataset, run_dir, resume=False)
                finals.append(records[-1] if records else None)
            cache[key] = finals
        results.append(AblationResult(name, sw, list(seeds), cache[key]))
    return results


ABLATION_FIELDS = ["variant", "stream_mode", "use_instance_loss", "use_cluster_loss", "use_predictor",
                   "use_stop_gradient", "use_entropy", "n_seeds", "nmi", "acc", "ari"]


def write_ablation_csv(results: list[AblationResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_FIELDS)
        for r in results:
            sw = r.switches
            w.writerow([
                r.variant, sw.stream_mode, sw.use_instance_loss, sw.use_cluster_loss, sw.use_predictor,
                sw.use_stop_gradient, sw.use_entropy, len(r.seeds), r.median("nmi"), r.median("acc"), r.median("ari"),
            ])
