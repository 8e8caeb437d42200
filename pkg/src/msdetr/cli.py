"""Command-line entry point: ``msdetr {gen|train|eval|fuse|bench|ablate}``."""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint
from . import tensor as T
from .bench import bench, bench_table
from .config import dump_config, load_config
from .data import ANNOTATIONS, CLASS_NAMES, generate, write_dataset
from .metrics import map_range, records_from_jsonl
from .model import ConfigError, StateError, build, fuse_model, model_flops
from .train import BEST_CHECKPOINT, TrainingDiverged, evaluate, load_splits, predictions_jsonl, train

log = logging.getLogger("msdetr")

FUSED_CHECKPOINT = "fused.msdk"


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _data_dir(args):
    """Dataset location: ``--data`` if given, else ``<out>/data`` when it exists."""
    if args.data:
        return args.data
    candidate = os.path.join(args.out, "data")
    return candidate if os.path.isdir(candidate) else None


def cmd_gen(args, run):
    out = args.data or os.path.join(args.out, "data")
    pairs = generate(run.n_images, run.model.image_size, run.seed, run.split_ratios,
                     run.min_instances, run.max_instances)
    write_dataset(pairs, out, run.seed)
    n_inst = sum(len(s.labels) for s, _ in pairs)
    print(f"wrote {len(pairs)} images, {n_inst} instances to {out}")
    return 0


def cmd_train(args, run):
    os.makedirs(args.out, exist_ok=True)
    dump_config(run, os.path.join(args.out, "config.yaml"))
    result = train(run, out_dir=args.out, data_dir=_data_dir(args), epochs=args.epochs)
    print(f"best epoch {result.best_epoch}: val mAP@0.5 {result.best_map50:.4f}; checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args, run):
    os.makedirs(args.out, exist_ok=True)
    data_dir = _data_dir(args)
    if args.predictions:
        if data_dir is None:
            raise FileNotFoundError(2, "no dataset directory (use --data)", os.path.join(args.out, "data"))
        records = records_from_jsonl(args.predictions, os.path.join(data_dir, ANNOTATIONS), args.split,
                                     class_names=CLASS_NAMES)
        report = map_range(records, CLASS_NAMES)
    else:
        path = args.checkpoint or os.path.join(args.out, BEST_CHECKPOINT)
        model, _ = checkpoint.load_model(path)
        split = load_splits(run, data_dir)[args.split]
        _, report, dets = evaluate(model, split, run.batch_size, run.top_k)
        if report is None:
            raise ValueError(f"split {args.split!r} has no ground truth")
        _write(os.path.join(args.out, "predictions.jsonl"), predictions_jsonl(dets, split.ids))
    _write(os.path.join(args.out, "metrics.json"), report.to_json())
    _write(os.path.join(args.out, "metrics.txt"), report.table())
    print(report.table(), end="")
    return 0


def _max_divergence(model, fused, x):
    """Largest output difference between two models on ``x``, evaluated in 64-bit."""
    m = copy.deepcopy(model).astype(np.float64).eval()
    f = copy.deepcopy(fused).astype(np.float64).eval()
    with T.no_grad():
        d1, d2 = m(x), f(x)
    return float(max(np.abs(d1.class_logits.data - d2.class_logits.data).max(),
                     np.abs(d1.boxes.data - d2.boxes.data).max()))


def cmd_fuse(args, run):
    path = args.checkpoint or os.path.join(args.out, BEST_CHECKPOINT)
    model, meta = checkpoint.load_model(path)
    fused = fuse_model(model)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, FUSED_CHECKPOINT)
    checkpoint.save_model(out_path, fused, {k: v for k, v in meta.items() if k != "fused"})
    size = model.cfg.image_size
    x = np.random.default_rng(run.seed).normal(size=(4, 3, size, size))
    report = {"source": path, "fused": out_path, "rep_blocks": len(model.rep_blocks()),
              "max_divergence": _max_divergence(model, fused, x),
              "flops_unfused": int(model_flops(model)), "flops_fused": int(model_flops(fused)),
              "params_unfused": model.num_parameters(), "params_fused": fused.num_parameters()}
    _write(os.path.join(args.out, "fuse_report.json"), json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"fused {report['rep_blocks']} blocks -> {out_path}; max divergence {report['max_divergence']:.3e}")
    return 0


def cmd_bench(args, run):
    if args.checkpoint:
        model, _ = checkpoint.load_model(args.checkpoint)
    else:
        model = build(run.model, run.seed).eval()
    result = bench(model, batch=1, warmup=run.bench_warmup, iters=run.bench_iters, seed=run.seed)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "bench.json"), json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(bench_table(result), end="")
    return 0


ABLATION_AXES = ("rep", "da", "csff")


def ablation_rows(run, splits, epochs, log_fn=None):
    """Train every on/off combination of the three components; one summary dict per combination."""
    rows = []
    for flags in itertools.product((False, True), repeat=3):
        toggles = dict(zip(ABLATION_AXES, flags))
        variant = run.replace(model=toggles)
        result = train(variant, splits, epochs=epochs, log_fn=log_fn or (lambda _msg: None))
        last = result.history[-1]
        rows.append({**toggles, "params": result.model.num_parameters(),
                     "flops": int(model_flops(result.model)),
                     "train_loss": last["train_objective"], "val_loss": last["val_objective"],
                     "val_map50": last["val_map50"]})
    return rows


def ablation_table(rows):
    head = ("Rep", "DA", "CSFF", "params", "GFLOPs", "train loss", "val loss", "val mAP50")
    body = [("x" if r["rep"] else "-", "x" if r["da"] else "-", "x" if r["csff"] else "-",
             f"{r['params']:,}", f"{r['flops'] / 1e9:.3f}", f"{r['train_loss']:.4f}",
             f"{r['val_loss']:.4f}", f"{r['val_map50']:.4f}") for r in rows]
    w = [max(len(x[i]) for x in (head, *body)) for i in range(len(head))]
    return "\n".join("  ".join(f"{c:>{w[i]}}" for i, c in enumerate(line)) for line in (head, *body)) + "\n"


def cmd_ablate(args, run):
    splits = load_splits(run, _data_dir(args))
    rows = ablation_rows(run, splits, args.epochs or run.ablate_epochs)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "ablation.json"), json.dumps(rows, indent=2) + "\n")
    table = ablation_table(rows)
    _write(os.path.join(args.out, "ablation.txt"), table)
    print(table, end="")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "fuse": cmd_fuse,
            "bench": cmd_bench, "ablate": cmd_ablate}


def build_parser():
    parser = argparse.ArgumentParser(prog="msdetr", description="Desk-scale deformable detection transformer.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--out", default="runs", help="output directory (default: runs)")
    parser.add_argument("--data", help="dataset directory (default: <out>/data when present)")
    parser.add_argument("--checkpoint", help="checkpoint to read (default: <out>/best.msdk)")
    parser.add_argument("--predictions", help="eval: score this predictions JSON-lines file instead of a model")
    parser.add_argument("--split", default="test", choices=("train", "val", "test"), help="eval split")
    parser.add_argument("--epochs", type=int, help="override the number of epochs (train, ablate)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        run = load_config(args.config)
        if args.seed is not None:
            run = run.replace(seed=args.seed)
        return COMMANDS[args.command](args, run)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"msdetr: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        where = exc.filename or args.config
        print(f"msdetr: error: {where}: {exc.strerror or exc}", file=sys.stderr)
        return 1
    except (StateError, TrainingDiverged, checkpoint.CheckpointError, ValueError) as exc:
        print(f"msdetr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
