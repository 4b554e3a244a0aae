"""Downstream evaluation: linear probe, 1-NN control and the experiment harness."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import MUGConfig, TrainConfig, config_digest, config_from_dict, config_to_dict
from .diffcore import AdamState, Tensor
from .errors import ContractError, NumericError
from .fusion import MUGModel, represent_series
from .train import fit
from .tsdata import CorruptionSpec, Dataset, corrupt_dataset, load_dataset, make_synthetic, znormalize

ALL_VARIANTS = ("multi", "fine", "coarse", "knn")


@dataclass
class ProbeParams:
    weight: np.ndarray  # (d, C)
    bias: np.ndarray  # (C,)

    @property
    def n_classes(self) -> int:
        return self.bias.shape[0]


def fit_linear_probe(
    reps: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    seed: int = 0,
    steps: int = 500,
    lr: float = 0.05,
) -> ProbeParams:
    """Softmax regression on frozen representations, trained full-batch with Adam.

    Features are standardised for the optimisation; the scaling is folded
    back into the returned weights so ``classify`` works on raw inputs.
    """
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if reps.ndim != 2 or reps.shape[1] < 1:
        raise ContractError(f"representations must be (N, d>=1), got shape {reps.shape}")
    if len(reps) != len(labels):
        raise ContractError(f"{len(reps)} representations but {len(labels)} labels")
    if len(reps) < n_classes:
        raise ContractError(f"need at least {n_classes} examples, got {len(reps)}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(f"labels must lie in [0, {n_classes})")
    absent = sorted(set(range(n_classes)) - set(labels.tolist()))
    if absent:
        raise ContractError(f"classes {absent} do not occur in the training labels")
    if not np.isfinite(reps).all():
        raise NumericError("non-finite representation passed to the probe")

    mu = reps.mean(axis=0)
    sd = reps.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    x = (reps - mu) / sd
    rng = np.random.default_rng(seed)
    d = reps.shape[1]
    w = Tensor(rng.normal(scale=0.01, size=(d, n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    state = AdamState.for_params([w, b], lr=lr)
    xt = Tensor(x)
    for _ in range(steps):
        w.grad = b.grad = None
        loss = dc.cross_entropy(xt @ w + b, labels)
        dc.backward(loss)
        dc.adam_step([w, b], [w.grad, b.grad], state)
    weight = w.data / sd[:, None]
    bias = b.data - mu @ weight
    return ProbeParams(weight, bias)


def classify(probe: ProbeParams, reps: np.ndarray) -> np.ndarray:
    """Class distribution(s) ``softmax(r W + b)`` for one ``(d,)`` or many ``(N, d)`` inputs."""
    reps = np.asarray(reps, dtype=np.float64)
    if reps.shape[-1] != probe.weight.shape[0]:
        raise ContractError(f"representation width {reps.shape[-1]} != probe width {probe.weight.shape[0]}")
    with dc.no_grad():
        return dc.softmax(Tensor(reps @ probe.weight + probe.bias), axis=-1).data


def _flat_znorm(ds: Dataset) -> np.ndarray:
    return np.stack([znormalize(s).values.reshape(-1) for s in ds.series])


def knn_predict(train: Dataset, test: Dataset, k: int = 1) -> np.ndarray:
    """Euclidean k-NN on z-normalised raw series; ties go to the lowest train index."""
    if train.length is None or test.length is None or train.length != test.length:
        raise ContractError(f"k-NN needs equal series lengths, got {train.length} and {test.length}")
    if train.dims != test.dims:
        raise ContractError(f"k-NN needs equal dimensionality, got {train.dims} and {test.dims}")
    a, b = _flat_znorm(train), _flat_znorm(test)
    d2 = (b * b).sum(1)[:, None] - 2 * b @ a.T + (a * a).sum(1)[None, :]
    ylab = train.labels
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    if k == 1:
        return ylab[order[:, 0]]
    preds = []
    for row in order:
        votes = np.bincount(ylab[row], minlength=train.class_count)
        best = np.flatnonzero(votes == votes.max())
        # among tied classes pick the one whose member appears first in distance order
        preds.append(next(ylab[i] for i in row if ylab[i] in best))
    return np.array(preds)


def knn_baseline(train: Dataset, test: Dataset, k: int = 1) -> float:
    return float(np.mean(knn_predict(train, test, k) == test.labels))


# ---------------------------------------------------------------- experiments


@dataclass
class VariantResult:
    accuracy: float
    correct: int
    total: int


@dataclass
class DatasetResult:
    name: str
    seed: int
    config_digest: str
    variants: dict[str, VariantResult] = field(default_factory=dict)
    train_history: list[dict] = field(default_factory=list)
    heldout_ranks: list[float] = field(default_factory=list)
    wall_clock_s: float = 0.0

    @property
    def accuracy(self) -> dict[str, float]:
        return {k: v.accuracy for k, v in self.variants.items()}


@dataclass
class ExperimentReport:
    name: str
    datasets: list[DatasetResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "datasets": [
                {
                    "name": r.name,
                    "seed": r.seed,
                    "config_digest": r.config_digest,
                    "accuracy": {k: dataclasses.asdict(v) for k, v in r.variants.items()},
                    "train_history": r.train_history,
                    "heldout_ranks": r.heldout_ranks,
                    "wall_clock_s": r.wall_clock_s,
                }
                for r in self.datasets
            ],
        }

    def csv_rows(self) -> list[dict]:
        return [
            {
                "dataset": r.name,
                "variant": k,
                "accuracy": repr(v.accuracy),
                "correct": v.correct,
                "total": v.total,
                "seed": r.seed,
                "config_digest": r.config_digest,
            }
            for r in self.datasets
            for k, v in r.variants.items()
        ]

    def write(self, json_path, csv_path=None) -> None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        csv_path = Path(csv_path) if csv_path else json_path.with_suffix(".csv")
        rows = self.csv_rows()
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["dataset", "variant", "accuracy", "correct", "total", "seed", "config_digest"]
            )
            writer.writeheader()
            writer.writerows(rows)


def _score(pred: np.ndarray, labels: np.ndarray) -> VariantResult:
    correct = int(np.sum(pred == labels))
    return VariantResult(correct / len(labels), correct, len(labels))


def evaluate_variants(
    model: MUGModel,
    train: Dataset,
    test: Dataset,
    variants=("multi", "fine", "coarse", "knn"),
    seed: int = 0,
) -> dict[str, VariantResult]:
    """Probe accuracy per representation variant (plus the raw 1-NN control)."""
    unknown = sorted(set(variants) - set(ALL_VARIANTS))
    if unknown:
        raise ContractError(f"unknown variants {unknown}; expected a subset of {ALL_VARIANTS}")
    out = {}
    for v in variants:
        if v == "knn":
            out[v] = _score(knn_predict(train, test), test.labels)
            continue
        tr = represent_series(train, model, v)
        te = represent_series(test, model, v)
        if not (np.isfinite(tr).all() and np.isfinite(te).all()):
            raise NumericError(f"non-finite {v} representations")
        probe = fit_linear_probe(tr, train.labels, train.class_count, seed=seed)
        out[v] = _score(classify(probe, te).argmax(axis=1), test.labels)
    return out


def _resolve_dataset(entry: dict, base: Path, seed: int) -> tuple[Dataset, Dataset]:
    if "synthetic" in entry:
        syn = dict(entry["synthetic"])
        s0 = int(syn.pop("seed", seed))
        n_train = int(syn.pop("n_train", 200))
        n_test = int(syn.pop("n_test", 200))
        train = make_synthetic(n=n_train, seed=2 * s0 + 1, split="train", **syn)
        test = make_synthetic(n=n_test, seed=2 * s0 + 2, split="test", **syn)
    else:
        fmt = entry.get("format", "ucr-csv")
        paths = []
        for key in ("train", "test"):
            if key not in entry:
                raise ContractError(f"dataset entry {entry.get('name')!r} lacks a {key!r} path")
            p = Path(entry[key])
            p = p if p.is_absolute() else base / p
            if not p.exists():
                raise FileNotFoundError(f"dataset file not found: {p}")
            paths.append(p)
        train = load_dataset(paths[0], fmt, split="train")
        test = load_dataset(paths[1], fmt, split="test")
    if "corrupt" in entry:
        c = dict(entry["corrupt"])
        cs = int(c.pop("seed", seed))
        train = corrupt_dataset(train, CorruptionSpec(rng_seed=2 * cs + 1, **c))
        test = corrupt_dataset(test, CorruptionSpec(rng_seed=2 * cs + 2, **c))
    return train, test


def run_dataset(
    name: str,
    train: Dataset,
    test: Dataset,
    model_cfg: MUGConfig,
    train_cfg: TrainConfig,
    variants=("multi", "fine", "coarse", "knn"),
) -> DatasetResult:
    t0 = time.perf_counter()
    model_cfg = dataclasses.replace(model_cfg, fine=dataclasses.replace(model_cfg.fine, input_dim=train.dims))
    digest = config_digest(config_to_dict(model_cfg, train_cfg))
    needs_model = any(v != "knn" for v in variants)
    history, ranks = [], []
    model = None
    if needs_model:
        res = fit(train, model_cfg, train_cfg, heldout=test)
        model = res.model
        history = [dataclasses.asdict(h) for h in res.history]
        ranks = res.heldout_ranks
    scores = evaluate_variants(model, train, test, variants, seed=train_cfg.seed)
    return DatasetResult(
        name, train_cfg.seed, digest, scores, history, ranks, round(time.perf_counter() - t0, 3)
    )


def run_experiment(spec, out_dir=None) -> ExperimentReport:
    """Run every dataset in an experiment spec (a dict or a JSON file path).

    Spec layout::

        {"name": str, "seed": int, "variants": [...], "config": {fine, sax, fusion, train, segments},
         "datasets": [{"name": str, "train": path, "test": path, "format": str}
                      | {"name": str, "synthetic": {...}, "corrupt": {...}}]}
    """
    base = Path.cwd()
    if not isinstance(spec, dict):
        base = Path(spec).resolve().parent
        spec = json.loads(Path(spec).read_text())
    seed = int(spec.get("seed", 0))
    raw_cfg = dict(spec.get("config", {}))
    raw_cfg.setdefault("train", {})
    raw_cfg["train"] = dict(raw_cfg["train"], seed=seed)
    model_cfg, train_cfg = config_from_dict(raw_cfg)
    variants = tuple(spec.get("variants", ALL_VARIANTS))
    report = ExperimentReport(spec.get("name", "experiment"))
    for k, entry in enumerate(spec["datasets"]):
        train, test = _resolve_dataset(entry, base, seed)
        name = entry.get("name", f"dataset{k}")
        report.datasets.append(run_dataset(name, train, test, model_cfg, train_cfg, variants))
    if out_dir is not None:
        out_dir = Path(out_dir)
        report.write(out_dir / "report.json", out_dir / "report.csv")
    return report
