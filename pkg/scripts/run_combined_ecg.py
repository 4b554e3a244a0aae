"""Pool ECG200 and TwoLeadECG into one dataset at a common length and evaluate.

The UCR files are not bundled. Point the script at local copies and supply a
label mapping, e.g. ``{"a": {"-1": "abnormal", "1": "normal"}, "b": {"1": "abnormal", "2": "normal"}}``.

    python scripts/run_combined_ecg.py --ecg200 ECG200/ECG200 --twolead TwoLeadECG/TwoLeadECG \\
        --map ecg_map.json --out runs/combined_ecg
"""

import argparse
import json
import logging
from pathlib import Path

from mug.config import config_from_dict
from mug.evaluate import ExperimentReport, run_dataset
from mug.tsdata import combine_datasets, load_dataset, save_dataset

ROOT = Path(__file__).resolve().parent.parent


def _load(prefix: str, split: str, fmt: str):
    # UCR archive naming: <prefix>_TRAIN.tsv etc; the ucr-csv loader takes tabs too
    for ext in (".tsv", ".txt", ".csv", ""):
        p = Path(f"{prefix}_{split.upper()}{ext}")
        if p.exists():
            return load_dataset(p, fmt, split=split)
    raise FileNotFoundError(f"no {split} file found for prefix {prefix}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ecg200", required=True, help="path prefix, e.g. ECG200/ECG200")
    ap.add_argument("--twolead", required=True, help="path prefix, e.g. TwoLeadECG/TwoLeadECG")
    ap.add_argument("--map", required=True, type=Path, help="JSON label mapping {a: {...}, b: {...}}")
    ap.add_argument("--format", default="ucr-csv")
    ap.add_argument("--length", type=int, default=82)
    ap.add_argument("--config", default=ROOT / "configs" / "default.json", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/combined_ecg", type=Path)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    mapping = json.loads(args.map.read_text())
    splits = {}
    for split in ("train", "test"):
        a = _load(args.ecg200, split, args.format)
        b = _load(args.twolead, split, args.format)
        splits[split] = combine_datasets(a, b, args.length, mapping, seed=args.seed)
    tr, te = splits["train"], splits["test"]
    print(f"combined: {len(tr)} train, {len(te)} test, length {tr.length}, {tr.class_count} classes")
    args.out.mkdir(parents=True, exist_ok=True)
    save_dataset(tr, args.out / "combined_TRAIN.csv")
    save_dataset(te, args.out / "combined_TEST.csv")

    raw = json.loads(args.config.read_text())
    raw.setdefault("train", {})["seed"] = args.seed
    model_cfg, train_cfg = config_from_dict(raw)
    report = ExperimentReport("combined-ecg", [run_dataset("CombinedECG", tr, te, model_cfg, train_cfg)])
    report.write(args.out / "report.json")
    print("  ".join(f"{k}={v:.3f}" for k, v in report.datasets[0].accuracy.items()))


if __name__ == "__main__":
    main()
