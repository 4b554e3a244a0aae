"""Clean synthetic experiment: multi vs fine vs coarse vs raw 1-NN.

    python scripts/run_synthetic.py --out runs/synthetic
    python scripts/run_synthetic.py --spec configs/synthetic.json --config configs/default.json
"""

import argparse
import json
import logging
from pathlib import Path

from mug.evaluate import run_experiment

ROOT = Path(__file__).resolve().parent.parent


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spec", default=ROOT / "configs" / "synthetic.json", type=Path)
    ap.add_argument("--config", default=ROOT / "configs" / "default.json", type=Path)
    ap.add_argument("--seed", type=int, default=None, help="overrides the seed in the experiment file")
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--out", default="runs/synthetic", type=Path)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    spec = json.loads(args.spec.read_text())
    spec["config"] = json.loads(args.config.read_text())
    if args.seed is not None:
        spec["seed"] = args.seed
    if args.epochs is not None:
        spec["config"].setdefault("train", {})["epochs"] = args.epochs
    report = run_experiment(spec, out_dir=args.out)
    for d in report.datasets:
        accs = "  ".join(f"{k}={v:.3f}" for k, v in d.accuracy.items())
        ranks = d.heldout_ranks
        print(f"{d.name}: {accs}  held-out rank {ranks[0]:.2f} -> {ranks[-1]:.2f}  ({d.wall_clock_s:.0f}s)")
    print(f"report written to {args.out}/report.json")


if __name__ == "__main__":
    main()
