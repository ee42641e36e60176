"""Command-line entry point.

Subcommands: train, eval, ablate, bench, synth, overlay, heatmap,
print-config. Exit codes: 0 success, 2 usage error, 1 runtime error. All
commands are deterministic given --seed; --deterministic is accepted for
explicitness (data order and RNG streams are counter-based either way).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import bench as benchmod
from . import metrics, synth, training, viz
from .config import (ConfigError, DataConfig, ModelConfig, TrainConfig, ValidationError,
                     dump_config, load_config)
from .data import DatasetError, load_dataset, split
from .model import CheckpointError, DualSwinUnet, load_model
from .metrics import MetricError


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="config file (defaults apply when omitted)")
    p.add_argument("--data", metavar="ROOT", help="dataset root directory")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--synthetic", action="store_true", help="use generated phantom data")
    p.add_argument("--count", type=int, default=None, help="synthetic sample count")
    p.add_argument("--deterministic", action="store_true",
                   help="deterministic mode (always on; flag kept for scripts)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualswin",
                                 description="dual-decoder windowed-attention segmentation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints + history")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.add_argument("--resume", action="store_true", help="continue from checkpoint_last in --out")

    p = sub.add_parser("eval", help="evaluate a checkpoint, write metric/ROC/per-image CSVs")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")

    p = sub.add_parser("ablate", help="train/evaluate architecture variants under one budget")
    _add_common(p)
    p.add_argument("--suite", choices=["skips", "fusion", "decoder", "all"], default="all")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")

    p = sub.add_parser("bench", help="measure single-sample forward latency")
    _add_common(p)
    p.add_argument("--checkpoint", help="benchmark these weights (else random init from config)")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)

    p = sub.add_parser("synth", help="write a synthetic dataset tree with manifest")
    _add_common(p)

    p = sub.add_parser("overlay", help="render prediction/ground-truth overlays")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--target", choices=["thyroid", "ptmc"], default="ptmc")
    p.add_argument("--limit", type=int, default=8, help="max images to render")

    p = sub.add_parser("heatmap", help="render blurred-probability heatmaps")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--sigma", type=float, default=5.0)
    p.add_argument("--limit", type=int, default=8)

    p = sub.add_parser("print-config", help="emit the fully resolved configuration")
    _add_common(p)
    return ap


def _load_configs(args):
    if args.config:
        mcfg, tcfg, dcfg = load_config(args.config)
    else:
        mcfg, tcfg, dcfg = ModelConfig(), TrainConfig(), DataConfig()
        mcfg.validate()
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    return mcfg, tcfg, dcfg


def _load_samples(args, parser, mcfg: ModelConfig, tcfg: TrainConfig, dcfg: DataConfig):
    if args.synthetic or (dcfg.synthetic and not args.data):
        count = args.count if args.count is not None else dcfg.synthetic_count
        return synth.synth_generate(count, mcfg.img_size, tcfg.seed)
    root = args.data or dcfg.dataset_root
    if not root:
        parser.error("no data source: pass --data ROOT or --synthetic")
    return load_dataset(root, mcfg.img_size)


def _split_samples(samples, dcfg, seed):
    sp = split(samples, dcfg.split_fractions, seed)
    pick = lambda idx: [samples[i] for i in idx]
    return {"train": pick(sp.train), "val": pick(sp.val), "test": pick(sp.test)}


def cmd_train(args, parser) -> int:
    mcfg, tcfg, dcfg = _load_configs(args)
    samples = _load_samples(args, parser, mcfg, tcfg, dcfg)
    parts = _split_samples(samples, dcfg, tcfg.seed)
    model = DualSwinUnet(mcfg, seed=tcfg.seed)
    print(f"training on {len(parts['train'])} samples "
          f"(val {len(parts['val'])}, test {len(parts['test'])}), "
          f"{model.parameter_count()} parameters")
    result = training.fit(model, parts["train"], parts["val"], tcfg, args.out,
                          augment_ops=dcfg.augmentation, resume=args.resume,
                          log=print, epochs_override=args.epochs)
    print(f"best validation tumor dice {result.best_val_dice_ptmc:.4f}; "
          f"wrote {result.best_path}")
    return 0


def cmd_eval(args, parser) -> int:
    mcfg, tcfg, dcfg = _load_configs(args)
    model, _, _ = load_model(args.checkpoint)
    samples = _load_samples(args, parser, model.cfg, tcfg, dcfg)
    parts = _split_samples(samples, dcfg, tcfg.seed)
    subset = parts[args.split]
    if not subset:
        raise MetricError(f"{args.split} split is empty; nothing to evaluate")
    os.makedirs(args.out, exist_ok=True)
    reports = training.evaluate_model(model, subset, tcfg.threshold, tcfg.batch_size)
    ids = [s.id for s in subset]
    for decoder in ("thyroid", "ptmc"):
        report, rows, probs, gts = reports[decoder]
        metrics.write_metrics_csv(os.path.join(args.out, f"metrics_{decoder}.csv"),
                                  [(decoder, report)])
        pooled_scores = np.concatenate([p.ravel() for p in probs])
        pooled_labels = np.concatenate([np.asarray(g).ravel() for g in gts])
        points, _ = metrics.roc_curve(pooled_scores, pooled_labels)
        metrics.write_roc_csv(os.path.join(args.out, f"roc_{decoder}.csv"), points)
        metrics.write_per_image_csv(os.path.join(args.out, f"per_image_{decoder}.csv"),
                                    rows, ids)
        print(f"{decoder}: jaccard {report.jaccard:.4f} dice {report.dice:.4f} "
              f"f1 {report.f1:.4f} auc {report.auc:.4f}")
    return 0


def _ablation_variants(suite: str, mcfg: ModelConfig):
    variants = []
    if suite in ("skips", "all"):
        for n in range(mcfg.max_skips + 1):
            variants.append((f"skips_{n}", replace(mcfg, skip_connection_count=n)))
    if suite in ("fusion", "all"):
        for mode in ("concatenate", "additive"):
            variants.append((f"fusion_{mode}", replace(mcfg, skip_fusion_mode=mode)))
    if suite in ("decoder", "all"):
        variants.append(("decoder_dual", replace(mcfg, dual_decoder=True)))
        variants.append(("decoder_single", replace(mcfg, dual_decoder=False)))
    return variants


def cmd_ablate(args, parser) -> int:
    mcfg, tcfg, dcfg = _load_configs(args)
    samples = _load_samples(args, parser, mcfg, tcfg, dcfg)
    parts = _split_samples(samples, dcfg, tcfg.seed)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for label, vcfg in _ablation_variants(args.suite, mcfg):
        var_dir = os.path.join(args.out, f"variant_{label}")
        t0 = time.perf_counter()
        row = {"variant": label, "jaccard_thyroid": "", "dice_thyroid": "",
               "jaccard_ptmc": "", "dice_ptmc": "", "wall_clock_s": "", "error": ""}
        try:
            model = DualSwinUnet(vcfg, seed=tcfg.seed)
            training.fit(model, parts["train"], parts["val"], tcfg, var_dir,
                         augment_ops=dcfg.augmentation, epochs_override=args.epochs)
            best, _, _ = load_model(os.path.join(var_dir, "checkpoint_best.dswc"))
            eval_set = parts["val"] or parts["train"]
            reports = training.evaluate_model(best, eval_set, tcfg.threshold,
                                              tcfg.batch_size)
            r2 = reports["ptmc"][0]
            row["jaccard_ptmc"] = f"{r2.jaccard:.6f}"
            row["dice_ptmc"] = f"{r2.dice:.6f}"
            if vcfg.dual_decoder:
                r1 = reports["thyroid"][0]
                row["jaccard_thyroid"] = f"{r1.jaccard:.6f}"
                row["dice_thyroid"] = f"{r1.dice:.6f}"
        except Exception as e:  # record and continue with the remaining variants
            row["error"] = f"{type(e).__name__}: {e}"
        row["wall_clock_s"] = f"{time.perf_counter() - t0:.3f}"
        rows.append(row)
        print(f"{label}: dice_ptmc={row['dice_ptmc'] or 'n/a'} "
              f"({row['wall_clock_s']}s){' ERROR: ' + row['error'] if row['error'] else ''}")
    out_csv = os.path.join(args.out, "ablation.csv")
    with open(out_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {out_csv}")
    return 0


def cmd_bench(args, parser) -> int:
    mcfg, tcfg, _ = _load_configs(args)
    if args.checkpoint:
        model, _, _ = load_model(args.checkpoint)
    else:
        model = DualSwinUnet(mcfg, seed=tcfg.seed)
    result = benchmod.run_benchmark(model, iterations=args.iters, warmup=args.warmup,
                                    seed=tcfg.seed)
    report = benchmod.format_report(result)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "bench.txt")
    with open(path, "w") as fh:
        fh.write(report + "\n")
    print(report)
    print(f"wrote {path}")
    return 0


def cmd_synth(args, parser) -> int:
    mcfg, tcfg, dcfg = _load_configs(args)
    count = args.count if args.count is not None else dcfg.synthetic_count
    samples = synth.write_dataset(args.out, count, mcfg.img_size, tcfg.seed)
    print(f"wrote {len(samples)} samples under {args.out} (images/, masks_thyroid/, "
          f"masks_ptmc/, manifest.txt)")
    return 0


def _render_common(args, parser):
    mcfg, tcfg, dcfg = _load_configs(args)
    model, _, _ = load_model(args.checkpoint)
    samples = _load_samples(args, parser, model.cfg, tcfg, dcfg)
    parts = _split_samples(samples, dcfg, tcfg.seed)
    subset = parts[args.split][:args.limit]
    if not subset:
        raise MetricError(f"{args.split} split is empty; nothing to render")
    probs_thy, probs_ptmc = training.predict_probs(model, subset, tcfg.batch_size)
    os.makedirs(args.out, exist_ok=True)
    return tcfg, subset, probs_thy, probs_ptmc


def cmd_overlay(args, parser) -> int:
    tcfg, subset, probs_thy, probs_ptmc = _render_common(args, parser)
    probs = probs_thy if args.target == "thyroid" else probs_ptmc
    for s, p in zip(subset, probs):
        gt = s.thyroid_mask if args.target == "thyroid" else s.ptmc_mask
        pred = metrics.binarize(p, tcfg.threshold)
        rgb = viz.render_overlay(gt, pred, s.image)
        path = os.path.join(args.out, f"overlay_{s.id}_{args.target}.png")
        viz.save_image(path, rgb)
        print(f"wrote {path}")
    return 0


def cmd_heatmap(args, parser) -> int:
    _, subset, _, probs_ptmc = _render_common(args, parser)
    for s, p in zip(subset, probs_ptmc):
        rgb, note = viz.render_heatmap(p, args.sigma, s.image)
        path = os.path.join(args.out, f"heatmap_{s.id}.png")
        viz.save_image(path, rgb)
        print(f"wrote {path}" + (f" ({note})" if note else ""))
    return 0


def cmd_print_config(args, parser) -> int:
    mcfg, tcfg, dcfg = _load_configs(args)
    sys.stdout.write(dump_config(mcfg, tcfg, dcfg))
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "synth": cmd_synth,
    "overlay": cmd_overlay,
    "heatmap": cmd_heatmap,
    "print-config": cmd_print_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args, parser)
    except (ConfigError, ValidationError, DatasetError, CheckpointError, MetricError,
            training.TrainingDiverged, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
