"""Dataclass configs and their JSON round-trip."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ContractError


@dataclass
class FineEncoderConfig:
    input_dim: int = 1
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    dropout: float = 0.1
    max_len: int = 1024
    positional: bool = True

    def __post_init__(self):
        for k in ("input_dim", "d_model", "n_heads", "n_layers", "d_ff", "max_len"):
            if getattr(self, k) < 1:
                raise ContractError(f"{k} must be >= 1, got {getattr(self, k)}")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class SaxConfig:
    alphabet_size: int = 5
    word_length: int = 8
    embed_dim: int = 64

    def __post_init__(self):
        if not 2 <= self.alphabet_size <= 16:
            raise ContractError(f"alphabet_size must lie in [2, 16], got {self.alphabet_size}")
        if self.word_length < 1 or self.embed_dim < 1:
            raise ContractError("word_length and embed_dim must be >= 1")


@dataclass
class FusionConfig:
    d_k: int | None = None  # None -> d_model of the fine encoder
    d_ff: int = 128

    def __post_init__(self):
        if self.d_k is not None and self.d_k < 1:
            raise ContractError(f"d_k must be >= 1, got {self.d_k}")
        if self.d_ff < 1:
            raise ContractError(f"d_ff must be >= 1, got {self.d_ff}")


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 50
    lr: float = 1e-3
    tau: float = 0.5
    eps: float = 1e-7
    lam: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContractError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.tau <= 0:
            raise ContractError(f"tau must be > 0, got {self.tau}")
        if not 0 < self.eps < 0.5:
            raise ContractError(f"eps must lie in (0, 0.5), got {self.eps}")
        if self.lam < 0:
            raise ContractError(f"lam must be >= 0, got {self.lam}")
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class MUGConfig:
    fine: FineEncoderConfig = field(default_factory=FineEncoderConfig)
    sax: SaxConfig = field(default_factory=SaxConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    segments: int = 8

    def __post_init__(self):
        if self.segments < 1:
            raise ContractError(f"segments must be >= 1, got {self.segments}")

    @property
    def d_k(self) -> int:
        return self.fusion.d_k or self.fine.d_model


def _build(cls, raw: dict | None):
    raw = dict(raw or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ContractError(f"unknown {cls.__name__} keys: {unknown}")
    return cls(**raw)


def config_from_dict(raw: dict) -> tuple[MUGConfig, TrainConfig]:
    """Parse the JSON config layout ``{fine, sax, fusion, train, segments}``."""
    unknown = sorted(set(raw) - {"fine", "sax", "fusion", "train", "segments"})
    if unknown:
        raise ContractError(f"unknown config sections: {unknown}")
    model = MUGConfig(
        fine=_build(FineEncoderConfig, raw.get("fine")),
        sax=_build(SaxConfig, raw.get("sax")),
        fusion=_build(FusionConfig, raw.get("fusion")),
        segments=int(raw.get("segments", 8)),
    )
    return model, _build(TrainConfig, raw.get("train"))


def config_to_dict(model: MUGConfig, train: TrainConfig | None = None) -> dict:
    out = dataclasses.asdict(model)
    if train is not None:
        out["train"] = dataclasses.asdict(train)
    return out


def config_digest(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
