"""Command-line entry point: ``train``, ``eval``, ``ablate`` and ``curves``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, DataConfig, RunConfig, from_dict, load_config
from .data import DatasetError, LabeledImageSet, load_cifar_binary, load_image_folder, make_synthetic
from .metrics import evaluate, largest_cluster_share
from .model import assign_clusters, load_checkpoint
from .trainer import (
    EPOCH_LOG,
    NonFiniteLossError,
    clustering_network,
    precision_mode,
    prepare_images,
    run_ablation,
    train_run,
    write_ablation_csv,
)

log = logging.getLogger("triclust")

CURVE_FIELDS = ["epoch", "nmi", "acc", "ari", "loss_instance", "loss_cluster", "loss_total", "largest_cluster_share"]
DEFAULT_SEEDS = [0, 1, 2, 3, 4]


class CommandError(RuntimeError):
    pass


def load_dataset(data: DataConfig, path_override: str | None = None, resolution: int = 16) -> LabeledImageSet:
    """The dataset named by ``data``; ``path_override`` (a directory or CIFAR file) takes precedence."""
    if path_override is not None:
        p = Path(path_override)
        if p.is_dir():
            return load_image_folder(p, resolution)
        return load_cifar_binary(p, data.cifar_variant)
    if data.source == "synthetic":
        return make_synthetic(data.synthetic)
    if data.source == "folder":
        return load_image_folder(data.path, resolution)
    return load_cifar_binary(data.path, data.cifar_variant)


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    run = {}
    if getattr(args, "seed", None) is not None:
        run["seed"] = args.seed
    if getattr(args, "precision", None) is not None:
        run["precision"] = args.precision
    if getattr(args, "out", None) is not None:
        run["out_dir"] = args.out
    return config.replace(run=run) if run else config


def _format_scores(scores: dict) -> str:
    return " ".join(f"{k.upper()} {v:.4f}" for k, v in scores.items())


def cmd_train(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    dataset = load_dataset(config.data, args.data, config.model.resolution)
    _, records = train_run(config, dataset, config.run.out_dir, resume=not args.no_resume)
    if records:
        r = records[-1]
        print(f"epoch {r.epoch}: NMI {r.nmi:.4f} ACC {r.acc:.4f} ARI {r.ari:.4f}")
    else:
        print("no epochs run")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    nets, payload = load_checkpoint(args.checkpoint)
    if args.config is not None:
        config = load_config(args.config)
    elif "config" in payload:
        config = from_dict(payload["config"])
    else:
        config = RunConfig()
    config = _apply_overrides(config, args)
    dataset = load_dataset(config.data, args.data, nets.spec.resolution)
    if dataset.n_classes != nets.n_clusters:
        raise CommandError(
            f"checkpoint clusters into M={nets.n_clusters} but the dataset has {dataset.n_classes} classes"
        )
    if dataset.resolution != (nets.spec.resolution, nets.spec.resolution):
        log.info("resizing %s images to %d", dataset.resolution, nets.spec.resolution)
    dtype = next(nets.online.parameters()).dtype
    with precision_mode(config.run.precision):
        images = prepare_images(dataset, nets.spec.resolution, dtype)
        pred = assign_clusters(clustering_network(nets, config.ablation), images)
    scores = evaluate(pred, dataset.labels, config.eval.nmi_average)
    other = "geometric" if config.eval.nmi_average == "arithmetic" else "arithmetic"
    report = {
        "checkpoint": str(args.checkpoint),
        "epoch": payload.get("epoch"),
        "n_samples": len(dataset),
        **scores,
        f"nmi_{config.eval.nmi_average}": scores["nmi"],
        f"nmi_{other}": evaluate(pred, dataset.labels, other)["nmi"],
        "largest_cluster_share": largest_cluster_share(pred),
    }
    print(_format_scores(scores))
    if abs(report["nmi_arithmetic"] - report["nmi_geometric"]) > 1e-3:
        print(f"NMI (arithmetic) {report['nmi_arithmetic']:.4f}  NMI (geometric) {report['nmi_geometric']:.4f}")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    dataset = load_dataset(config.data, args.data, config.model.resolution)
    seeds = args.seeds if args.seeds else ([args.seed] if args.seed is not None else DEFAULT_SEEDS)
    out = Path(config.run.out_dir)
    results = run_ablation(config, dataset, seeds, out)
    write_ablation_csv(results, out / "ablation.csv")
    for r in results:
        print(f"{r.variant:20s} NMI {r.median('nmi'):.4f} ACC {r.median('acc'):.4f} ARI {r.median('ari'):.4f}")
    return 0


def cmd_curves(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    src = run_dir / EPOCH_LOG
    if not src.exists():
        raise CommandError(f"no epoch log at {src}")
    rows = []
    for n, line in enumerate(src.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CommandError(f"{src}:{n}: not valid JSON") from exc
    rows.sort(key=lambda r: r["epoch"])
    dest = Path(args.out) if args.out else run_dir / "curves.csv"
    dest.parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        # json.dumps gives the exact text the log holds for each number
        for r in rows:
            w.writerow([json.dumps(r[k]) for k in CURVE_FIELDS])
    print(f"wrote {len(rows)} epochs to {dest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="triclust", description="Tri-stream contrastive image clustering.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool) -> None:
        p.add_argument("--config", required=config_required, help="YAML run configuration")
        p.add_argument("--data", help="image folder or CIFAR binary file overriding the config's data section")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--precision", choices=("fixed", "fast"))

    p = sub.add_parser("train", help="train a model")
    common(p, True)
    p.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints in the output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint's cluster assignments")
    common(p, False)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run every ablation variant over a seed list")
    common(p, True)
    p.add_argument("--seeds", type=int, nargs="+", help=f"seed list (default {DEFAULT_SEEDS})")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("curves", help="export per-epoch scores of a run as CSV")
    p.add_argument("run_dir")
    p.add_argument("--out", help="CSV path (default RUN_DIR/curves.csv)")
    p.set_defaults(func=cmd_curves)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CommandError, NonFiniteLossError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
