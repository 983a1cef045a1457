"""Command-line entry point: train, infer, eval, bench, flops, synth.

Structured output goes to stdout as JSON; diagnostics go to stderr.
Exit codes: 0 success, 2 usage/config, 3 data or I/O, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.special import expit

from . import checkpoint, data, zoo
from .bench import run_bench
from .errors import CheckpointError, ConfigError, DataError, NumericalError, ShapeError
from .metrics import evaluate
from .train import TrainConfig, fit, predict_logits

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _emit(command, payload):
    out = {"schema_version": SCHEMA_VERSION, "command": command}
    out.update(payload)
    json.dump(out, sys.stdout, indent=2, sort_keys=False)
    sys.stdout.write("\n")
    sys.stdout.flush()


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _size(text):
    parts = text.lower().replace("x", ",").split(",")
    try:
        dims = [int(p) for p in parts if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use 256 or 256x256") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return tuple(dims)


def _read_samples(manifest, split):
    records = manifest.split(split).records
    if not records:
        raise UsageError(f"split {split!r} has no samples")
    return data.load_prepared(records)


# ------------------------------------------------------------------ commands

def cmd_train(args):
    manifest = data.Manifest.read(args.data)
    train_samples = _read_samples(manifest, "train")
    val_split = args.val_split
    if not manifest.split(val_split).records:
        _log(f"split {val_split!r} is empty; validating on the training split")
        val_split = "train"
    val_samples = train_samples if val_split == "train" else _read_samples(manifest, val_split)
    model = zoo.build(zoo.config_for(args.model), seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, patience=args.patience,
                      seed=args.seed, lr=args.lr, target_dice=args.target_dice)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = fit(model, train_samples, val_samples, cfg, log=_log if args.verbose else None)
    (out / "best.useg").write_bytes(report.best_state)
    (out / "last.useg").write_bytes(report.last_state)
    (out / "report.txt").write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    payload = {"model": args.model, "val_split": val_split, "train_samples": len(train_samples),
               "best_checkpoint": str(out / "best.useg"), "last_checkpoint": str(out / "last.useg")}
    payload.update(report.to_dict(timing=args.timing))
    _emit("train", payload)
    return EXIT_OK


def cmd_infer(args):
    if args.threshold < 0:
        raise UsageError("threshold must be >= 0")
    model = checkpoint.load_checkpoint(args.checkpoint)
    model.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written, results = [], []
    size = model.config.input_size[0]
    try:
        for path in args.input:
            image, (h, w) = data.prepare_image(path, size)
            prob = expit(predict_logits(model, image)[0, 0].astype(np.float64))
            mask = (prob >= args.threshold).astype(np.uint8) * 255
            mask = data.resize_nearest(mask, h, w)
            stem = Path(path).stem
            mp = out / f"{stem}_mask.png"
            Image.fromarray(mask, "L").save(mp, format="PNG")
            written.append(mp)
            entry = {"input": str(path), "mask": str(mp), "height": h, "width": w,
                     "foreground_fraction": float((mask > 0).mean())}
            if args.save_prob:
                pp = out / f"{stem}_prob.png"
                p8 = np.round(data.resize_nearest(prob, h, w) * 255).astype(np.uint8)
                Image.fromarray(p8, "L").save(pp, format="PNG")
                written.append(pp)
                entry["probability"] = str(pp)
            results.append(entry)
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    _emit("infer", {"checkpoint": str(args.checkpoint), "threshold": args.threshold, "outputs": results})
    return EXIT_OK


def cmd_eval(args):
    model = checkpoint.load_checkpoint(args.checkpoint)
    manifest = data.Manifest.read(args.data)
    records = manifest.split(args.split).records
    if not records:
        raise UsageError(f"split {args.split!r} has no samples")
    samples = data.load_prepared(records)
    logits = predict_logits(model, np.concatenate([s.image for s in samples]))
    preds = {s.id: (logits[i, 0] >= 0).astype(np.uint8) for i, s in enumerate(samples)}
    gts = {s.id: s.pyramid.region[1][0, 0].astype(np.uint8) for s in samples}
    tags = {s.id: s.tags for s in samples}
    report = evaluate(preds, gts, tags)
    payload = {"checkpoint": str(args.checkpoint), "model": model.name, "split": args.split, "threshold": 0.5}
    payload.update(report.to_dict())
    _emit("eval", payload)
    return EXIT_OK


def cmd_bench(args):
    if args.iters < 10:
        raise UsageError("--iters must be >= 10")
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if args.warmup < 0:
        raise UsageError("--warmup must be >= 0")
    if args.checkpoint:
        model = checkpoint.load_checkpoint(args.checkpoint)
    else:
        model = zoo.build(zoo.config_for(args.model, args.input_size), seed=1)
    report = run_bench(model, threads=args.threads, iters=args.iters, warmup=args.warmup,
                       input_hw=args.input_size)
    _emit("bench", report.to_dict())
    return EXIT_OK


def cmd_flops(args):
    model = zoo.build(zoo.config_for(args.model, args.input_size), seed=1)
    macs, flops = zoo.count_flops(model, args.input_size)
    payload = {
        "model": args.model,
        "input_size": list(args.input_size),
        "params_enumerated": zoo.count_params(model),
        "params_analytic": zoo.analytic_param_count(model.config),
        "macs": macs,
        "flops": flops,
        "checkpoint_bytes": len(checkpoint.encode(model)),
        "stages": zoo.flops_breakdown(model, args.input_size),
    }
    _emit("flops", payload)
    return EXIT_OK


def cmd_synth(args):
    if args.n < 2:
        raise UsageError("--n must be >= 2")
    manifest = data.synth_dataset(args.n, args.seed, args.out)
    path = Path(args.out) / "manifest.tsv"
    _emit("synth", {"manifest": str(path), "samples": len(manifest),
                    "train": len(manifest.split("train")), "test": len(manifest.split("test")), "seed": args.seed})
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="ultraseg", description="UltraSeg training, inference and benchmarking engine")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--model", required=True, choices=zoo.VARIANTS)
    t.add_argument("--data", required=True, help="manifest TSV")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--val-split", choices=data.SPLITS, default="test")
    t.add_argument("--target-dice", type=float, default=None)
    t.add_argument("--timing", action="store_true", help="include per-epoch seconds in the report")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write masks for images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, nargs="+")
    i.add_argument("--out", required=True)
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--save-prob", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=data.SPLITS, default="test")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="forward-pass throughput")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", choices=zoo.VARIANTS)
    src.add_argument("--checkpoint")
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--iters", type=int, default=1000)
    b.add_argument("--warmup", type=int, default=20)
    b.add_argument("--input-size", type=_size, default=(256, 256))
    b.set_defaults(func=cmd_bench)

    f = sub.add_parser("flops", help="parameter and MAC accounting")
    f.add_argument("--model", required=True, choices=zoo.VARIANTS)
    f.add_argument("--input-size", type=_size, default=(256, 256))
    f.set_defaults(func=cmd_flops)

    s = sub.add_parser("synth", help="generate a synthetic polyp dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except (DataError, CheckpointError, ShapeError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA
    except NumericalError as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
