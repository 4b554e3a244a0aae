"""Time-series containers, archive-format IO, preprocessing and corruption ops."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ParseError, StructureError

FORMATS = ("ucr-csv", "sktime-ts")
_MISSING = {"", "?", "nan", "NaN", "NAN"}


@dataclass
class TimeSeries:
    values: np.ndarray  # (w, m)
    label: int | None = None
    id: str = ""
    source: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ContractError(f"time series values must be (w>=1, m>=1), got shape {v.shape}")
        self.values = v

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    def replace(self, **changes) -> "TimeSeries":
        return dataclasses.replace(self, **changes)


@dataclass
class Segment:
    parent_id: str
    start: int
    length: int
    values: np.ndarray  # (j, m)


@dataclass
class Dataset:
    series: list[TimeSeries]
    class_names: list[str] = field(default_factory=list)
    split: str = "train"
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.series:
            dims = {s.dims for s in self.series}
            if len(dims) > 1:
                raise StructureError(f"dataset {self.name!r} mixes dimensionalities {sorted(dims)}")
        c = len(self.class_names)
        for s in self.series:
            if s.label is not None and not 0 <= s.label < c:
                raise ContractError(f"label {s.label} of series {s.id!r} outside [0, {c})")

    def __len__(self) -> int:
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def dims(self) -> int:
        return self.series[0].dims if self.series else 0

    @property
    def length(self) -> int | None:
        lengths = {s.length for s in self.series}
        return lengths.pop() if len(lengths) == 1 else None

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if s.label is None else s.label for s in self.series], dtype=int)

    def values_array(self) -> np.ndarray:
        """Stack equal-length series into ``(N, w, m)``."""
        if self.length is None:
            raise ContractError("values_array needs equal-length series")
        return np.stack([s.values for s in self.series])


@dataclass(frozen=True)
class CorruptionSpec:
    noise_sigma: float = 0.2
    splice_fraction: float = 0.25
    splice_count: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ContractError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 <= self.splice_fraction < 1:
            raise ContractError(f"splice_fraction must lie in [0, 1), got {self.splice_fraction}")
        if self.splice_count < 1:
            raise ContractError(f"splice_count must be >= 1, got {self.splice_count}")


# ------------------------------------------------------------------ loading


def _sort_labels(raw: Iterable[str]) -> list[str]:
    uniq = set(raw)
    try:
        return sorted(uniq, key=float)
    except ValueError:
        return sorted(uniq)


def _fill_missing(col: np.ndarray) -> np.ndarray:
    bad = np.isnan(col)
    if not bad.any():
        return col
    if bad.all():
        raise StructureError("channel contains only missing values")
    idx = np.arange(len(col))
    out = col.copy()
    # np.interp clamps outside the observed range, which gives nearest-value fill at the ends.
    out[bad] = np.interp(idx[bad], idx[~bad], col[~bad])
    return out


def _parse_values(tokens: Sequence[str], lineno: int, path) -> np.ndarray:
    out = np.empty(len(tokens))
    for k, tok in enumerate(tokens):
        tok = tok.strip()
        if tok in _MISSING:
            out[k] = np.nan
            continue
        try:
            out[k] = float(tok)
        except ValueError:
            raise ParseError(f"cannot parse value {tok!r}", lineno, path) from None
        if not math.isfinite(out[k]):
            raise ParseError(f"non-finite value {tok!r}", lineno, path)
    return out


def _load_ucr(lines: list[str], path) -> tuple[list[np.ndarray], list[str], dict]:
    rows, raw_labels = [], []
    delim = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        d = "\t" if "\t" in line else ","
        delim = delim or d
        parts = line.strip().split(d)
        if len(parts) < 2:
            raise ParseError("expected a label followed by at least one value", lineno, path)
        label = parts[0].strip()
        if label in _MISSING:
            raise ParseError("missing class label", lineno, path)
        raw_labels.append(label)
        rows.append(_parse_values(parts[1:], lineno, path)[:, None])
    return rows, raw_labels, {"delimiter": delim or ","}


def _load_ts(lines: list[str], path) -> tuple[list[np.ndarray], list[str | None], dict]:
    meta: dict = {"problem_name": "", "univariate": None, "class_labels": None}
    in_data = False
    rows, raw_labels = [], []
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if not in_data:
            if not s.startswith("@"):
                raise ParseError("data line before @data", lineno, path)
            key, _, rest = s.partition(" ")
            key = key.lower()
            rest = rest.strip()
            if key == "@problemname":
                meta["problem_name"] = rest
            elif key == "@univariate":
                if rest.lower() not in ("true", "false"):
                    raise ParseError(f"@univariate expects true/false, got {rest!r}", lineno, path)
                meta["univariate"] = rest.lower() == "true"
            elif key == "@classlabel":
                toks = rest.split()
                if not toks or toks[0].lower() not in ("true", "false"):
                    raise ParseError("@classLabel expects true/false", lineno, path)
                if toks[0].lower() == "true":
                    if len(toks) < 2:
                        raise ParseError("@classLabel true without labels", lineno, path)
                    meta["class_labels"] = toks[1:]
                else:
                    meta["class_labels"] = []
            elif key == "@data":
                if meta["class_labels"] is None:
                    raise ParseError("@data before @classLabel", lineno, path)
                in_data = True
            # other headers are outside the supported subset and ignored
            continue
        fields = s.split(":")
        labelled = bool(meta["class_labels"])
        if labelled:
            if len(fields) < 2:
                raise ParseError("expected dimensions followed by a class label", lineno, path)
            label = fields[-1].strip()
            if label not in meta["class_labels"]:
                raise ParseError(f"class label {label!r} not declared in @classLabel", lineno, path)
            dims = fields[:-1]
        else:
            label, dims = None, fields
        chans = [_parse_values(d.split(","), lineno, path) for d in dims]
        if len({len(c) for c in chans}) != 1:
            raise StructureError(f"line {lineno}: dimensions have unequal lengths")
        if meta["univariate"] and len(chans) != 1:
            raise StructureError(f"line {lineno}: @univariate true but {len(chans)} dimensions")
        if rows and len(chans) != rows[0].shape[1]:
            raise StructureError(f"line {lineno}: {len(chans)} dimensions, expected {rows[0].shape[1]}")
        rows.append(np.stack(chans, axis=1))
        raw_labels.append(label)
    if not in_data:
        raise ParseError("no @data section", None, path)
    return rows, raw_labels, meta


def load_dataset(path, format: str = "ucr-csv", split: str = "train", name: str | None = None) -> Dataset:
    """Read a UCR csv/tsv or sktime ``.ts`` file.

    Class labels are re-indexed to ``0..C-1`` following the sorted order of
    the original labels (numeric order when every label parses as a number).
    Missing values are filled by linear interpolation, with nearest-value fill
    at the ends.
    """
    if format not in FORMATS:
        raise ContractError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"dataset file not found: {path}") from None
    lines = text.splitlines()
    if format == "ucr-csv":
        rows, raw_labels, meta = _load_ucr(lines, path)
        class_names = _sort_labels(raw_labels)
    else:
        rows, raw_labels, meta = _load_ts(lines, path)
        class_names = _sort_labels(meta["class_labels"])
        meta["class_labels_declared"] = list(meta.pop("class_labels"))
    if not rows:
        raise StructureError(f"{path}: no series found")
    if len({r.shape[1] for r in rows}) > 1:
        raise StructureError(f"{path}: inconsistent dimensionality")
    index = {c: k for k, c in enumerate(class_names)}
    stem = name or meta.get("problem_name") or path.stem
    series = []
    for k, (vals, lab) in enumerate(zip(rows, raw_labels)):
        vals = np.stack([_fill_missing(vals[:, c]) for c in range(vals.shape[1])], axis=1)
        series.append(
            TimeSeries(vals, None if lab is None else index[lab], id=f"{stem}:{split}:{k}", source=str(path))
        )
    meta["format"] = format
    return Dataset(series, class_names, split=split, name=stem, metadata=meta)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(ds: Dataset, path, format: str = "ucr-csv") -> None:
    """Write ``ds`` in one of the archive formats (floats use shortest round-trip repr)."""
    if format not in FORMATS:
        raise ContractError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    lines = []
    if format == "ucr-csv":
        if ds.dims != 1:
            raise ContractError("ucr-csv holds univariate series only")
        d = ds.metadata.get("delimiter", ",")
        for s in ds.series:
            if s.label is None:
                raise ContractError("ucr-csv requires a label on every series")
            lines.append(d.join([ds.class_names[s.label]] + [_fmt(v) for v in s.values[:, 0]]))
    else:
        declared = ds.metadata.get("class_labels_declared", ds.class_names)
        labelled = any(s.label is not None for s in ds.series)
        lines.append(f"@problemName {ds.metadata.get('problem_name') or ds.name}")
        lines.append(f"@univariate {'true' if ds.dims == 1 else 'false'}")
        lines.append("@classLabel " + ("true " + " ".join(declared) if labelled else "false"))
        lines.append("@data")
        for s in ds.series:
            dims = [",".join(_fmt(v) for v in s.values[:, c]) for c in range(s.dims)]
            if s.label is not None:
                dims.append(ds.class_names[s.label])
            lines.append(":".join(dims))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------ preprocessing


def znormalize(ts: TimeSeries) -> TimeSeries:
    v = ts.values
    mu = v.mean(axis=0)
    sd = v.std(axis=0)
    safe = np.where(sd > 1e-12, sd, 1.0)
    out = np.where(sd > 1e-12, (v - mu) / safe, 0.0)
    return ts.replace(values=out)


def _split_sizes(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + 1 if k < rem else base for k in range(parts)]


def segment_bounds(w: int, k: int) -> list[tuple[int, int]]:
    """``(start, length)`` for ``k`` near-equal contiguous pieces; leading pieces take the remainder."""
    if k < 1 or k > w:
        raise ContractError(f"cannot split length {w} into {k} segments (need 1 <= K <= w)")
    out, start = [], 0
    for n in _split_sizes(w, k):
        out.append((start, n))
        start += n
    return out


def segment_series(ts: TimeSeries, num_segments: int) -> list[Segment]:
    return [
        Segment(ts.id, start, n, ts.values[start : start + n])
        for start, n in segment_bounds(ts.length, num_segments)
    ]


def resample_length(ts: TimeSeries, target_length: int) -> TimeSeries:
    """Linear interpolation onto ``target_length`` evenly spaced points; endpoints kept exactly."""
    if target_length < 2:
        raise ContractError(f"target_length must be >= 2, got {target_length}")
    w = ts.length
    if target_length == w:
        return ts.replace(values=ts.values.copy())
    if w == 1:
        return ts.replace(values=np.repeat(ts.values, target_length, axis=0))
    grid = np.linspace(0.0, w - 1, target_length)
    src = np.arange(w, dtype=np.float64)
    out = np.stack([np.interp(grid, src, ts.values[:, c]) for c in range(ts.dims)], axis=1)
    out[0], out[-1] = ts.values[0], ts.values[-1]
    return ts.replace(values=out)


# --------------------------------------------------------------- corruption


def inject_gaussian_noise(ts: TimeSeries, spec: CorruptionSpec) -> TimeSeries:
    """Add zero-mean noise whose std is ``noise_sigma`` times each channel's std."""
    if spec.noise_sigma == 0:
        return ts.replace(values=ts.values.copy())
    rng = np.random.default_rng(spec.rng_seed)
    scale = spec.noise_sigma * ts.values.std(axis=0)
    return ts.replace(values=ts.values + rng.standard_normal(ts.values.shape) * scale)


@dataclass(frozen=True)
class SpliceRecord:
    start: int
    length: int
    donor_index: int
    donor_id: str
    donor_offset: int


def splice_window_length(w: int, spec: CorruptionSpec) -> int:
    return int(math.floor(spec.splice_fraction * w / spec.splice_count + 0.5))


def plan_splices(ts: TimeSeries, donors: Dataset, spec: CorruptionSpec) -> list[SpliceRecord]:
    """Draw the replacement windows and their donors; pure function of the inputs and seed."""
    n = splice_window_length(ts.length, spec)
    if n == 0:
        return []
    if n * spec.splice_count > ts.length:
        raise ContractError(f"{spec.splice_count} windows of length {n} do not fit in length {ts.length}")
    pool = [
        k
        for k, d in enumerate(donors.series)
        if d.label is not None and d.label != ts.label and d.dims == ts.dims and d.length >= n
    ]
    if not pool:
        raise ContractError(f"no donor with a label different from {ts.label} for series {ts.id!r}")
    rng = np.random.default_rng(spec.rng_seed)
    free = ts.length - n * spec.splice_count
    offsets = np.sort(rng.integers(0, free + 1, size=spec.splice_count))
    records = []
    for k, off in enumerate(offsets):
        di = pool[int(rng.integers(len(pool)))]
        donor = donors.series[di]
        doff = int(rng.integers(0, donor.length - n + 1))
        records.append(SpliceRecord(int(off) + k * n, n, di, donor.id, doff))
    return records


def splice_confusion(ts: TimeSeries, donors: Dataset, spec: CorruptionSpec) -> TimeSeries:
    """Overwrite windows of ``ts`` with same-length windows cut from other-class donors."""
    records = plan_splices(ts, donors, spec)
    out = ts.values.copy()
    for r in records:
        out[r.start : r.start + r.length] = donors.series[r.donor_index].values[
            r.donor_offset : r.donor_offset + r.length
        ]
    return ts.replace(values=out)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def corrupt_dataset(ds: Dataset, spec: CorruptionSpec, donors: Dataset | None = None) -> Dataset:
    """Splice then add noise to every series; each series gets its own derived seed."""
    donors = ds if donors is None else donors
    out = []
    for k, s in enumerate(ds.series):
        sspec = dataclasses.replace(spec, rng_seed=derive_seed(spec.rng_seed, k, 0))
        s2 = splice_confusion(s, donors, sspec) if spec.splice_fraction > 0 else s
        s2 = inject_gaussian_noise(s2, dataclasses.replace(spec, rng_seed=derive_seed(spec.rng_seed, k, 1)))
        out.append(s2)
    meta = dict(ds.metadata, corruption=dataclasses.asdict(spec))
    return Dataset(out, list(ds.class_names), split=ds.split, name=ds.name, metadata=meta)


def write_corrupted(ds: Dataset, spec: CorruptionSpec, path) -> Path:
    """Save a corrupted dataset as ucr-csv plus a ``<path>.manifest.json`` sidecar."""
    path = Path(path)
    save_dataset(ds, path, "ucr-csv")
    manifest = path.with_name(path.name + ".manifest.json")
    manifest.write_text(
        json.dumps(
            {"corruption": dataclasses.asdict(spec), "seed": spec.rng_seed, "source": ds.name, "n_series": len(ds)},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    return manifest


# -------------------------------------------------------------- combination


def combine_datasets(
    a: Dataset,
    b: Dataset,
    target_length: int,
    label_map: dict[str, dict[str, str]],
    seed: int = 0,
) -> Dataset:
    """Pool two univariate datasets, resample every series and shuffle.

    ``label_map`` maps ``{"a": {original: combined}, "b": {original: combined}}``;
    every class present in either input must be mapped.
    """
    for key, ds in (("a", a), ("b", b)):
        if ds.dims != 1:
            raise ContractError(f"dataset {key} ({ds.name}) is not univariate")
        mapping = label_map.get(key)
        if mapping is None:
            raise ContractError(f"label mapping for dataset {key!r} is missing")
        missing = sorted(set(ds.class_names) - set(mapping))
        if missing:
            raise ContractError(f"label mapping for dataset {key!r} lacks classes {missing}")
    names = _sort_labels(list(label_map["a"].values()) + list(label_map["b"].values()))
    index = {c: k for k, c in enumerate(names)}
    pooled = []
    for key, ds in (("a", a), ("b", b)):
        for s in ds.series:
            lab = None if s.label is None else index[label_map[key][ds.class_names[s.label]]]
            r = resample_length(s, target_length)
            pooled.append(TimeSeries(r.values, lab, id=f"{key}:{s.id}", source=f"{key}:{s.id}"))
    order = np.random.default_rng(seed).permutation(len(pooled))
    meta = {"sources": [a.name, b.name], "target_length": target_length, "seed": seed, "label_map": label_map}
    return Dataset([pooled[k] for k in order], names, split=a.split, name=f"{a.name}+{b.name}", metadata=meta)


# ---------------------------------------------------------------- synthetic

SHAPES = ("sine", "square", "sawtooth")


def _waveform(kind: str, phase: np.ndarray) -> np.ndarray:
    frac = np.mod(phase, 2 * np.pi) / (2 * np.pi)
    if kind == "sine":
        return np.sin(phase)
    if kind == "square":
        return np.where(frac < 0.5, 1.0, -1.0)
    if kind == "sawtooth":
        return 2.0 * frac - 1.0
    raise ContractError(f"unknown waveform {kind!r}; expected one of {SHAPES}")


def make_synthetic(
    classes: Sequence[str] = SHAPES,
    n: int = 200,
    length: int = 128,
    seed: int = 0,
    noise: float = 0.1,
    cycles: float = 4.0,
    split: str = "train",
) -> Dataset:
    """Unit-amplitude periodic waveforms with random phase and Gaussian observation noise.

    Classes are balanced (``n // C`` each, remainder to the leading classes) and shuffled.
    """
    classes = list(classes)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % len(classes))
    t = np.arange(length) * (2 * np.pi * cycles / length)
    series = []
    for k, lab in enumerate(labels):
        phase = t + rng.uniform(0, 2 * np.pi)
        vals = _waveform(classes[lab], phase) + noise * rng.standard_normal(length)
        series.append(TimeSeries(vals, int(lab), id=f"synthetic:{split}:{k}", source=f"synthetic:{seed}"))
    meta = {"generator": "synthetic", "classes": classes, "seed": seed, "noise": noise, "cycles": cycles}
    return Dataset(series, classes, split=split, name="synthetic", metadata=meta)
