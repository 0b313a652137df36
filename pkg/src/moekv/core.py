"""Shared types, errors, seeded randomness and small vector primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MoEKVError(ValueError):
    """Base class for every error raised by the engine."""


class InvalidArgument(MoEKVError):
    pass


class InvalidConfig(MoEKVError):
    pass


class InvalidEntry(MoEKVError):
    pass


class NumericalError(MoEKVError):
    pass


class InsufficientCalibration(MoEKVError):
    pass


class CodecMismatch(MoEKVError):
    pass


class NotFitted(MoEKVError):
    pass


class InvalidComparison(MoEKVError):
    pass


def compressed_width(d: int, rho: float) -> int:
    """Stored width d' = round(d / rho), never below 1."""
    return max(1, int(round(d / rho)))


@dataclass(frozen=True)
class ModelConfig:
    """Model and deployment sizes shared by the store, cost model and harness.

    ``d`` is the KV vector width, ``head_width`` the attention head width used
    by the I/O formulas, ``L`` the global token budget, ``S`` the shard buffer
    capacity and ``K`` the number of pages retained per device.
    """

    d: int = 64
    head_width: int = 16
    E: int = 8
    k: int = 2
    L: int = 1024
    G: int = 4
    S: int = 64
    K: int = 4
    rho: float = 1.0
    elem_bytes: int = 2

    def __post_init__(self):
        if self.d < 1:
            raise InvalidConfig(f"d must be >= 1, got {self.d}")
        if not 1 <= self.head_width <= self.d:
            raise InvalidConfig("head_width must lie in [1, d]")
        if not 1 <= self.k <= self.E:
            raise InvalidConfig(f"need 1 <= k <= E, got k={self.k}, E={self.E}")
        if self.G < 1 or self.S < 1 or self.K < 1 or self.L < 1:
            raise InvalidConfig("G, S, K and L must all be >= 1")
        if not self.rho >= 1.0:
            raise InvalidConfig(f"rho must be >= 1, got {self.rho}")
        if self.elem_bytes < 1:
            raise InvalidConfig("elem_bytes must be >= 1")

    @property
    def d_prime(self) -> int:
        return compressed_width(self.d, self.rho)


@dataclass
class EntryMeta:
    """Access metadata for one cached entry.

    ``last_access`` and ``age`` are step distances measured from the moment
    the snapshot was taken; they are not stored counters.
    """

    attention_score: float = 0.0
    last_access: int = 0
    freq: int = 0
    age: int = 0
    per_layer_scores: list[float] = field(default_factory=list)


@dataclass
class KVEntry:
    token_id: int
    expert_id: int
    key: np.ndarray
    value: np.ndarray
    meta: EntryMeta = field(default_factory=EntryMeta)

    def __post_init__(self):
        self.key = np.asarray(self.key, dtype=np.float64)
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.key.ndim != 1 or self.key.shape != self.value.shape:
            raise InvalidEntry("key and value must be 1-D vectors of equal width")
        if self.token_id < 0 or self.expert_id < 0:
            raise InvalidEntry("token_id and expert_id must be non-negative")

    @property
    def width(self) -> int:
        return self.key.shape[0]

    @property
    def uid(self) -> tuple[int, int]:
        return (self.token_id, self.expert_id)


def make_rng(seed: int, worker: int | None = None) -> np.random.Generator:
    """PCG64 generator; ``worker`` derives an independent stream as seed XOR worker."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    if worker is not None:
        seed ^= int(worker)
    return np.random.Generator(np.random.PCG64(seed))


def softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise InvalidArgument("softmax of an empty vector")
    if np.isnan(x).any():
        raise InvalidArgument("softmax input contains NaN")
    z = np.exp(x - x.max())
    return z / z.sum()


def entropy(p) -> float:
    """Shannon entropy in nats with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if (p < 0).any():
        raise InvalidArgument("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise InvalidArgument(f"probabilities sum to {p.sum()}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    # zero vectors are scored before their first write
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))
