"""Command-line entry point: ``mug <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import config_from_dict
from .errors import MugError, NumericError
from .evaluate import ALL_VARIANTS, ExperimentReport, DatasetResult, evaluate_variants, run_experiment
from .fusion import VARIANTS, represent_series
from .train import fit, load_checkpoint, save_checkpoint
from .tsdata import (
    FORMATS,
    CorruptionSpec,
    combine_datasets,
    corrupt_dataset,
    load_dataset,
    make_synthetic,
    save_dataset,
    write_corrupted,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("mug")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def cmd_train(args) -> int:
    ds = load_dataset(args.data, args.format, split="train")
    model_cfg, train_cfg = config_from_dict(_read_json(args.config) if args.config else {})
    model_cfg = dataclasses.replace(model_cfg, fine=dataclasses.replace(model_cfg.fine, input_dim=ds.dims))
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    res = fit(ds, model_cfg, train_cfg, on_epoch=lambda r: log.info(
        "epoch %d  loss %.4f  hard rank %.3f", r.epoch, r.mean_loss, r.mean_hard_rank))
    steps = sum(h.batches for h in res.history)
    save_checkpoint(res.model, train_cfg, args.out, step=steps)
    print(f"saved {args.out} after {train_cfg.epochs} epochs ({steps} steps)")
    return EXIT_OK


def cmd_encode(args) -> int:
    ck = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data, args.format)
    reps = represent_series(ds, ck.model, args.variant)
    if not np.isfinite(reps).all():
        raise NumericError("non-finite representation")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"r{k}" for k in range(reps.shape[1])])
        for s, r in zip(ds.series, reps):
            lab = "" if s.label is None else ds.class_names[s.label]
            w.writerow([s.id, lab] + [repr(float(x)) for x in r])
    print(f"wrote {len(reps)} representations to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    train = load_dataset(args.train, args.format, split="train")
    test = load_dataset(args.test, args.format, split="test")
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seed = args.seed if args.seed is not None else (ck.seed or 0)
    scores = evaluate_variants(ck.model, train, test, variants, seed=seed)
    report = ExperimentReport(
        "eval", [DatasetResult(train.name, seed, Path(args.ckpt).name, scores)]
    )
    report.write(args.report)
    for k, v in scores.items():
        print(f"{k:8s} {v.accuracy:.4f} ({v.correct}/{v.total})")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    ds = load_dataset(args.data, args.format)
    spec = CorruptionSpec(args.noise_sigma, args.splice_fraction, args.splice_count, args.seed)
    out = corrupt_dataset(ds, spec)
    manifest = write_corrupted(out, spec, args.out)
    print(f"wrote {args.out} and {manifest}")
    return EXIT_OK


def cmd_combine(args) -> int:
    a = load_dataset(args.a, args.format)
    b = load_dataset(args.b, args.format)
    out = combine_datasets(a, b, args.length, _read_json(args.map), seed=args.seed)
    save_dataset(out, args.out, "ucr-csv")
    print(f"wrote {len(out)} series of length {args.length} to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    ds = make_synthetic(classes, n=args.n, length=args.length, seed=args.seed, noise=args.noise)
    save_dataset(ds, args.out, args.format)
    print(f"wrote {len(ds)} synthetic series to {args.out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    report = run_experiment(args.spec, out_dir=args.out_dir)
    for r in report.datasets:
        accs = "  ".join(f"{k}={v:.3f}" for k, v in r.accuracy.items())
        print(f"{r.name}: {accs}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mug", description="Multi-granularity time-series representation learning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="unsupervised retrieval training")
    t.add_argument("--data", required=True)
    t.add_argument("--format", choices=FORMATS, default="ucr-csv")
    t.add_argument("--config", help="JSON with fine/sax/fusion/train sections and 'segments'")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="write one representation row per series")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--format", choices=FORMATS, default="ucr-csv")
    e.add_argument("--variant", choices=VARIANTS, default="multi")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    v = sub.add_parser("eval", help="linear-probe accuracy of a trained checkpoint")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--train", required=True)
    v.add_argument("--test", required=True)
    v.add_argument("--format", choices=FORMATS, default="ucr-csv")
    v.add_argument("--variants", default=",".join(ALL_VARIANTS))
    v.add_argument("--seed", type=int)
    v.add_argument("--report", required=True)
    v.set_defaults(func=cmd_eval)

    c = sub.add_parser("corrupt", help="noise + other-class splicing, written as ucr-csv with a manifest")
    c.add_argument("--data", required=True)
    c.add_argument("--format", choices=FORMATS, default="ucr-csv")
    c.add_argument("--noise-sigma", type=float, default=0.2)
    c.add_argument("--splice-fraction", type=float, default=0.25)
    c.add_argument("--splice-count", type=int, default=1)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_corrupt)

    m = sub.add_parser("combine", help="pool two univariate datasets at a common length")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--format", choices=FORMATS, default="ucr-csv")
    m.add_argument("--map", required=True, help='JSON {"a": {label: combined}, "b": {label: combined}}')
    m.add_argument("--length", type=int, required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_combine)

    s = sub.add_parser("synth", help="generate the synthetic waveform dataset")
    s.add_argument("--classes", default="sine,square,sawtooth")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--length", type=int, default=128)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=FORMATS, default="ucr-csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    x = sub.add_parser("experiment", help="run an experiment spec file")
    x.add_argument("--spec", required=True)
    x.add_argument("--out-dir", required=True)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MugError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
