"""Retrieval-task training: ranks, rank similarity, the rank-based BCE loss, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .config import MUGConfig, TrainConfig, config_from_dict, config_to_dict
from .diffcore import AdamState, Tensor
from .errors import CheckpointError, CheckpointVersionError, ContractError, NumericError
from .fusion import MUGModel, prepare_segments
from .tsdata import Dataset, TimeSeries, derive_seed

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MUGCKPT\x00"
CHECKPOINT_VERSION = 1
_DIST_EPS = 1e-12  # keeps sqrt differentiable when a query coincides with a candidate


# ------------------------------------------------------------------- ranks


def _dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64), axis=-1)


def hard_rank(y_q, y_t, distractors) -> int:
    """1 + number of distractors at least as close to the query as the target."""
    distractors = np.asarray(distractors, dtype=np.float64).reshape(-1, np.shape(y_q)[-1])
    if len(distractors) == 0:
        return 1
    return 1 + int(np.sum(_dist(y_q, y_t) >= _dist(y_q, distractors)))


def batch_hard_ranks(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Hard rank of target ``i`` for query ``i`` with the other targets as distractors."""
    d = _dist(queries[:, None, :], targets[None, :, :])
    own = np.diag(d)[:, None]
    hits = own >= d
    np.fill_diagonal(hits, False)
    return 1 + hits.sum(axis=1)


def _tdist(q: Tensor, c: Tensor) -> Tensor:
    diff = q - c
    return dc.sqrt(dc.tsum(diff * diff, axis=-1) + _DIST_EPS)


def soft_rank(y_q, y_t, distractors, tau: float) -> Tensor:
    """Sigmoid relaxation of ``hard_rank``; tends to it as ``tau -> 0`` away from ties."""
    if tau <= 0:
        raise ContractError(f"tau must be > 0, got {tau}")
    y_q, y_t = dc.as_tensor(y_q), dc.as_tensor(y_t)
    distractors = dc.as_tensor(distractors)
    if distractors.size == 0:
        return dc.as_tensor(1.0)
    distractors = dc.reshape(distractors, (-1, y_q.shape[-1]))
    gaps = (_tdist(y_q, y_t) - _tdist(y_q, distractors)) * (1.0 / tau)
    return 1.0 + dc.tsum(dc.sigmoid(gaps))


def spearman_similarity(rank, n: int):
    """``(n - rank) / (n - 1)``; works on floats and tensors."""
    if n < 2:
        raise ContractError(f"rank similarity needs n >= 2, got {n}")
    return (n - rank) / (n - 1)


# ------------------------------------------------------------------- batches


class SegmentBank:
    """Z-normalised segments of a dataset, grouped by length, with precomputed SAX words."""

    def __init__(self, series: Sequence[TimeSeries] | Dataset, model: MUGModel):
        vals, owner = prepare_segments(list(series), model.config.segments)
        self.lengths = sorted(vals)
        self.values = [vals[n] for n in self.lengths]
        self.owner = [owner[n] for n in self.lengths]
        self.symbols = [model.symbols(v) for v in self.values]

    def __len__(self) -> int:
        return sum(len(v) for v in self.values)

    def group_sizes(self) -> list[int]:
        return [len(v) for v in self.values]


@dataclass
class RetrievalBatch:
    queries: Tensor  # (B, d)
    targets: Tensor  # (B, d)
    group: int
    indices: np.ndarray
    seed: int | None = None

    @property
    def size(self) -> int:
        return self.queries.shape[0]

    def distractors(self, i: int) -> np.ndarray:
        t = self.targets.data
        return np.delete(t, i, axis=0)


def forward_batch(
    bank: SegmentBank,
    model: MUGModel,
    group: int,
    indices: np.ndarray,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
) -> RetrievalBatch:
    out = model.forward_segments(bank.values[group][indices], bank.symbols[group][indices], rng)
    return RetrievalBatch(dc.avg_pool_rows(out.fine), out.multi, group, np.asarray(indices), seed)


def build_retrieval_batch(
    bank: SegmentBank, model: MUGModel, batch_size: int, seed: int, rng: np.random.Generator | None = None
) -> RetrievalBatch:
    """Sample ``batch_size`` segments without replacement from one length group."""
    sizes = np.array(bank.group_sizes())
    ok = np.flatnonzero(sizes >= batch_size)
    if batch_size < 2 or len(ok) == 0:
        raise ContractError(f"need at least batch_size={batch_size} (>= 2) segments of one length, have {sizes}")
    g_rng = np.random.default_rng(seed)
    group = int(ok[g_rng.choice(len(ok), p=sizes[ok] / sizes[ok].sum())]) if len(ok) > 1 else int(ok[0])
    idx = np.sort(g_rng.choice(sizes[group], size=batch_size, replace=False))
    return forward_batch(bank, model, group, idx, rng, seed)


# ---------------------------------------------------------------------- loss


def soft_rank_matrix(queries: Tensor, targets: Tensor, tau: float) -> Tensor:
    """``R[i, c]``: soft rank of candidate ``c`` for query ``i`` against all other candidates."""
    diff = dc.reshape(queries, (queries.shape[0], 1, -1)) - dc.reshape(targets, (1, targets.shape[0], -1))
    dist = dc.sqrt(dc.tsum(diff * diff, axis=-1) + _DIST_EPS)  # (B, B)
    n = dist.shape[0]
    gaps = (dc.reshape(dist, (n, n, 1)) - dc.reshape(dist, (n, 1, n))) * (1.0 / tau)
    # the k == c term is sigmoid(0) = 0.5 and is removed
    return dc.tsum(dc.sigmoid(gaps), axis=-1) + 0.5


def retrieval_loss(batch: RetrievalBatch, cfg: TrainConfig) -> Tensor:
    """Mean over queries of ``-log(sim_target) + lam * mean_j -log(1 - sim_j)``."""
    n = batch.size
    if n < 2:
        raise ContractError(f"retrieval loss needs at least 2 items per batch, got {n}")
    ranks = soft_rank_matrix(batch.queries, batch.targets, cfg.tau)
    sim = dc.clip(spearman_similarity(ranks, n), cfg.eps, 1.0 - cfg.eps)
    eye = np.eye(n)
    pos = -dc.tsum(dc.log(sim) * eye, axis=1)
    loss = pos
    if cfg.lam > 0:
        neg = -dc.tsum(dc.log(1.0 - sim) * (1.0 - eye), axis=1) * (1.0 / (n - 1))
        loss = loss + neg * cfg.lam
    return dc.mean(loss)


def positive_term(rank: float, n: int, eps: float) -> float:
    sim = min(max(spearman_similarity(rank, n), eps), 1.0 - eps)
    return -float(np.log(sim))


# ------------------------------------------------------------------ training


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    mean_hard_rank: float
    batches: int


def epoch_batches(bank: SegmentBank, batch_size: int, seed: int) -> list[tuple[int, np.ndarray]]:
    """Seeded partition of every length group into batches; a trailing batch smaller than 2 is dropped."""
    rng = np.random.default_rng(seed)
    out = []
    for g, size in enumerate(bank.group_sizes()):
        perm = rng.permutation(size)
        for s in range(0, size, batch_size):
            chunk = perm[s : s + batch_size]
            if len(chunk) >= 2:
                out.append((g, np.sort(chunk)))
    order = rng.permutation(len(out))
    return [out[k] for k in order]


def train_epoch(
    bank: SegmentBank, model: MUGModel, cfg: TrainConfig, state: AdamState, epoch: int
) -> EpochReport:
    params = model.parameters()
    drop_rng = np.random.default_rng(derive_seed(cfg.seed, epoch, 2))
    losses, ranks = [], []
    for g, idx in epoch_batches(bank, cfg.batch_size, derive_seed(cfg.seed, epoch, 1)):
        dc.zero_grad(params)
        batch = forward_batch(bank, model, g, idx, drop_rng)
        loss = retrieval_loss(batch, cfg)
        if not np.isfinite(loss.item()):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        ranks.extend(batch_hard_ranks(batch.queries.data, batch.targets.data))
        dc.backward(loss)
        dc.adam_step(params, [p.grad if p.grad is not None else np.zeros(p.shape) for p in params], state)
        losses.append(loss.item())
    return EpochReport(epoch, float(np.mean(losses)), float(np.mean(ranks)), len(losses))


def evaluate_retrieval(bank: SegmentBank, model: MUGModel, cfg: TrainConfig, seed: int = 12345) -> tuple[float, float]:
    """Mean loss and mean hard rank over seeded batches, no dropout and no updates."""
    losses, ranks = [], []
    with dc.no_grad():
        for g, idx in epoch_batches(bank, cfg.batch_size, seed):
            batch = forward_batch(bank, model, g, idx)
            losses.append(retrieval_loss(batch, cfg).item())
            ranks.extend(batch_hard_ranks(batch.queries.data, batch.targets.data))
    return float(np.mean(losses)), float(np.mean(ranks))


@dataclass
class TrainResult:
    model: MUGModel
    history: list[EpochReport] = field(default_factory=list)
    heldout_ranks: list[float] = field(default_factory=list)
    state: AdamState | None = None


def fit(
    series: Sequence[TimeSeries] | Dataset,
    model_cfg: MUGConfig,
    cfg: TrainConfig,
    heldout: Sequence[TimeSeries] | Dataset | None = None,
    on_epoch: Callable[[EpochReport], None] | None = None,
) -> TrainResult:
    """Unsupervised training from a fresh seeded model.

    When ``heldout`` is given, its mean hard rank is recorded before training
    and after every epoch.
    """
    model = MUGModel(model_cfg, seed=cfg.seed)
    bank = SegmentBank(series, model)
    hbank = SegmentBank(heldout, model) if heldout is not None else None
    state = AdamState.for_params(model.parameters(), lr=cfg.lr)
    result = TrainResult(model, state=state)
    if hbank is not None:
        result.heldout_ranks.append(evaluate_retrieval(hbank, model, cfg)[1])
    for epoch in range(cfg.epochs):
        rep = train_epoch(bank, model, cfg, state, epoch)
        result.history.append(rep)
        if hbank is not None:
            result.heldout_ranks.append(evaluate_retrieval(hbank, model, cfg)[1])
        log.info("epoch %d loss %.4f rank %.3f", epoch, rep.mean_loss, rep.mean_hard_rank)
        if on_epoch is not None:
            on_epoch(rep)
    return result


# --------------------------------------------------------------- checkpoints


def save_checkpoint(
    model: MUGModel,
    cfg: TrainConfig | None,
    path,
    step: int = 0,
    extra_params: dict[str, dict[str, np.ndarray]] | None = None,
) -> None:
    """Write ``magic | u64 header length | JSON header | float64 LE blocks``."""
    groups: dict[str, dict[str, np.ndarray]] = {
        g: {k: t.data for k, t in ps.items()} for g, ps in model.params.items()
    }
    for g, ps in (extra_params or {}).items():
        groups[g] = {k: np.asarray(v, dtype=np.float64) for k, v in ps.items()}
    entries, blobs = [], []
    for g, ps in groups.items():
        for k, arr in ps.items():
            entries.append({"group": g, "name": k, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(model.config, cfg),
        "params": entries,
        "step": int(step),
        "seed": None if cfg is None else cfg.seed,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


@dataclass
class Checkpoint:
    model: MUGModel
    train: TrainConfig | None
    step: int
    seed: int | None
    extra: dict[str, dict[str, np.ndarray]]


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    if "version" not in header:
        raise CheckpointError(f"{path}: header has no version field")
    if header["version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(header["version"], CHECKPOINT_VERSION)
    conf = dict(header["config"])
    has_train = "train" in conf
    model_cfg, train_cfg = config_from_dict(conf)
    groups: dict[str, dict[str, Tensor]] = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        nbytes = 8 * n
        if len(raw) < pos + nbytes:
            raise CheckpointError(f"{path}: truncated parameter block {e['group']}/{e['name']}")
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(e["shape"]).astype(np.float64)
        pos += nbytes
        groups.setdefault(e["group"], {})[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes after parameter blocks")
    core = {g: groups.pop(g) for g in ("fine", "coarse", "fusion") if g in groups}
    if set(core) != {"fine", "coarse", "fusion"}:
        raise CheckpointError(f"{path}: missing parameter groups")
    reference = MUGModel(model_cfg, seed=0)
    for g, ps in reference.params.items():
        if list(ps) != list(core[g]) or any(ps[k].shape != core[g][k].shape for k in ps):
            raise CheckpointError(f"{path}: parameter group {g!r} does not match the stored config")
    extra = {g: {k: t.data for k, t in ps.items()} for g, ps in groups.items()}
    return Checkpoint(
        MUGModel(model_cfg, core), train_cfg if has_train else None, header["step"], header["seed"], extra
    )

