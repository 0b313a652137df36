"""Synthetic query streams with Zipf-skewed embedding reuse, and their binary file format.

File layout (little-endian): magic ``PIKT``, u16 version, u32 T, u32 d,
u32 n_layers, then T records of (u32 step, u32 vocab id, d x f64 embedding,
n_layers x f64 layer weights).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import InvalidArgument, InvalidConfig, make_rng

MAGIC = b"PIKT"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")


@dataclass(frozen=True)
class TraceSpec:
    T: int = 1000
    d: int = 64
    vocab: int = 256
    skew: float = 1.1
    seed: int = 0
    n_layers: int = 4

    def __post_init__(self):
        if self.T < 0 or self.d < 1 or self.vocab < 1 or self.n_layers < 0:
            raise InvalidConfig("trace needs T >= 0, d >= 1, vocab >= 1, n_layers >= 0")
        if self.skew < 0:
            raise InvalidConfig("skew must be non-negative")


@dataclass
class TraceEvent:
    step: int
    token: int
    embedding: np.ndarray
    layer_weights: np.ndarray


def zipf_probs(vocab: int, skew: float) -> np.ndarray:
    w = 1.0 / np.arange(1, vocab + 1, dtype=np.float64) ** skew
    return w / w.sum()


def generate_trace(spec: TraceSpec) -> list[TraceEvent]:
    rng = make_rng(spec.seed)
    table = rng.standard_normal((spec.vocab, spec.d))
    tokens = rng.choice(spec.vocab, size=spec.T, p=zipf_probs(spec.vocab, spec.skew))
    layers = rng.uniform(0.5, 1.5, size=(spec.T, spec.n_layers))
    return [TraceEvent(i, int(tok), table[tok].copy(), layers[i]) for i, tok in enumerate(tokens)]


def write_trace(path, events, d: int, n_layers: int) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(events), d, n_layers))
        rec = struct.Struct(f"<II{d}d{n_layers}d")
        for ev in events:
            fh.write(rec.pack(ev.step, ev.token, *ev.embedding.tolist(), *ev.layer_weights.tolist()))


def read_trace(path) -> list[TraceEvent]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise InvalidArgument("trace file is truncated")
    magic, version, T, d, n_layers = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise InvalidArgument("not a trace file (bad magic)")
    if version != VERSION:
        raise InvalidArgument(f"unsupported trace version {version}")
    rec = struct.Struct(f"<II{d}d{n_layers}d")
    if len(blob) != _HEADER.size + T * rec.size:
        raise InvalidArgument("trace file length does not match its header")
    out = []
    for i in range(T):
        fields = rec.unpack_from(blob, _HEADER.size + i * rec.size)
        out.append(TraceEvent(fields[0], fields[1], np.array(fields[2:2 + d]),
                              np.array(fields[2 + d:])))
    return out
