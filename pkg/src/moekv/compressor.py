"""KV compression codecs: low-rank, multi-resolution, cropping, pruning, distillation.

Every codec maps d-wide vectors to d'-wide payloads and back. Codecs other
than ``Chunk`` are per-vector maps with a linear decoder ``D`` (plus an
optional offset), so a query projected by ``D.T`` scores compressed keys
exactly as it would score the decoded keys, up to a per-query constant.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .core import (
    CodecMismatch,
    InsufficientCalibration,
    InvalidArgument,
    InvalidConfig,
    InvalidEntry,
    make_rng,
)

SCHEMES = ("Identity", "LoRA", "LoRAPlus", "Pyramid", "Chunk", "SVD", "FastV", "Distill", "Prune")
MAGIC = b"PIKC"
VERSION = 1


@dataclass(frozen=True)
class CompressorConfig:
    """Codec hyper-parameters.

    ``pyramid_drop`` is how many of the finest detail levels the pyramid
    discards; 0 keeps every level (lossless) and the default 1 halves width.
    ``scheme = "Composed"`` chains the codecs named in ``stages`` in order,
    every stage sharing the other hyper-parameters.
    """

    scheme: str = "SVD"
    rank: int = 8
    levels: int = 2
    chunk_size: int = 16
    prune_frac: float = 0.5
    calib_size: int = 512
    pyramid_drop: int = 1
    distill_steps: int = 2000
    distill_lr: float = 0.01
    stages: tuple[str, ...] = ()

    def __post_init__(self):
        if self.scheme == "Composed":
            if not self.stages:
                raise InvalidConfig("a Composed codec needs a non-empty stages list")
            for s in self.stages:
                if s not in SCHEMES or s == "Chunk":
                    raise InvalidConfig(f"{s!r} cannot be a composition stage")
        elif self.scheme not in SCHEMES:
            raise InvalidConfig(f"unknown compression scheme {self.scheme!r}; expected one of {SCHEMES}")
        elif self.stages:
            raise InvalidConfig("stages only applies to scheme = 'Composed'")
        if self.rank < 1:
            raise InvalidConfig("rank must be >= 1")
        if self.levels < 1:
            raise InvalidConfig("levels must be >= 1")
        if not 0 <= self.pyramid_drop <= self.levels:
            raise InvalidConfig("pyramid_drop must lie in [0, levels]")
        if not 0.0 <= self.prune_frac < 1.0:
            raise InvalidConfig("prune_frac must lie in [0, 1)")
        if self.chunk_size < 1 or self.calib_size < 1:
            raise InvalidConfig("chunk_size and calib_size must be >= 1")


@dataclass
class CompressedKV:
    scheme: str
    key: np.ndarray
    value: np.ndarray
    original_width: int
    stored_width: int
    basis: np.ndarray | None = None  # Chunk only: per-block basis (d x r)


class Codec:
    """Per-vector codec with linear decoder ``dec`` and offset ``offset``."""

    scheme = "Identity"

    def __init__(self, d: int):
        self.d = d

    @property
    def width(self) -> int:
        return self.d

    # subclasses override the row maps
    def encode_rows(self, X: np.ndarray) -> np.ndarray:
        return np.array(X, dtype=np.float64)

    def decode_rows(self, Z: np.ndarray) -> np.ndarray:
        return np.array(Z, dtype=np.float64)

    def project_query(self, q: np.ndarray) -> np.ndarray:
        """Map a full-width query into payload space (``D.T @ q``)."""
        return q

    def bound_rows(self, X: np.ndarray) -> np.ndarray | None:
        """Per-row squared-error bound, or None when the bound is aggregate."""
        return np.zeros(len(X))

    def bound_total(self, X: np.ndarray) -> float:
        return float(self.bound_rows(X).sum())

    # serialization hooks
    def _params(self) -> tuple[list[int], list[np.ndarray]]:
        return [self.d], []

    @classmethod
    def _from_params(cls, ints, arrays):
        return cls(ints[0])


class IdentityCodec(Codec):
    scheme = "Identity"


class ProjectionCodec(Codec):
    """x -> enc (x - b), z -> dec z + b.  Shared by SVD, LoRA, LoRAPlus, Pyramid, Distill."""

    def __init__(self, d: int, enc: np.ndarray, dec: np.ndarray, offset: np.ndarray | None = None):
        super().__init__(d)
        self.enc = np.asarray(enc, dtype=np.float64)
        self.dec = np.asarray(dec, dtype=np.float64)
        self.offset = None if offset is None else np.asarray(offset, dtype=np.float64)

    @property
    def width(self) -> int:
        return self.enc.shape[0]

    def encode_rows(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.offset is not None:
            X = X - self.offset
        return X @ self.enc.T

    def decode_rows(self, Z):
        Y = np.asarray(Z, dtype=np.float64) @ self.dec.T
        if self.offset is not None:
            Y = Y + self.offset
        return Y

    def project_query(self, q):
        return self.dec.T @ q

    def _params(self):
        arrays = [self.enc, self.dec]
        if self.offset is not None:
            arrays.append(self.offset)
        return [self.d], arrays

    @classmethod
    def _from_params(cls, ints, arrays):
        return cls(ints[0], *arrays)


def _singular_values(X: np.ndarray) -> np.ndarray:
    return np.linalg.svd(np.asarray(X, dtype=np.float64), compute_uv=False)


class SVDCodec(ProjectionCodec):
    """Top-r right singular vectors of the calibration matrix."""

    scheme = "SVD"

    def bound_rows(self, X):
        return None

    def bound_total(self, X):
        s = _singular_values(X)
        return float((s[self.width:] ** 2).sum())


class LoRACodec(SVDCodec):
    """Closed-form least-squares rank-r pair: W_u = basis, W_d = W_u^T."""

    scheme = "LoRA"


class LoRAPlusCodec(ProjectionCodec):
    """Rank-r pair around the calibration mean; the bound is ||K - W_u W_d (K - b) - b||^2."""

    scheme = "LoRAPlus"

    def project_query(self, q):
        # the offset adds q.b to every score, which softmax ignores
        return self.dec.T @ q

    def bound_rows(self, X):
        X = np.asarray(X, dtype=np.float64)
        W_u, W_d, b = self.dec, self.enc, self.offset
        R = X - (X - b) @ (W_u @ W_d).T - b
        return (R ** 2).sum(axis=1)


def _haar_matrix(d: int, levels: int, drop: int) -> np.ndarray:
    """Rows of the orthonormal Haar analysis kept after dropping ``drop`` finest detail levels."""
    if d % (1 << levels):
        raise InvalidConfig(f"pyramid needs d divisible by 2**levels, got d={d}, levels={levels}")
    coarse = np.eye(d)
    details = []
    for _ in range(levels):
        even, odd = coarse[0::2], coarse[1::2]
        details.append((even - odd) / math.sqrt(2.0))
        coarse = (even + odd) / math.sqrt(2.0)
    kept = [coarse] + [details[j] for j in range(levels - 1, drop - 1, -1)]
    return np.vstack(kept)


def pool_project(K: np.ndarray, block: int) -> np.ndarray:
    """Average-pool ``K`` over consecutive blocks of ``block`` and upsample back."""
    K = np.asarray(K, dtype=np.float64)
    shape = K.shape
    m = K.reshape(*shape[:-1], shape[-1] // block, block).mean(axis=-1, keepdims=True)
    return np.broadcast_to(m, (*shape[:-1], shape[-1] // block, block)).reshape(shape)


class PyramidCodec(ProjectionCodec):
    """Multi-resolution pyramid with factor-2 average pooling per level.

    The payload is the coarsest orthonormal average coefficients followed by
    the detail coefficients of every level except the ``drop`` finest ones.
    Decoding from it yields the average-pooled vector at block size 2**drop.
    """

    scheme = "Pyramid"

    def __init__(self, d: int, levels: int, drop: int):
        M = _haar_matrix(d, levels, drop)
        super().__init__(d, M, M.T)
        self.levels, self.drop = levels, drop

    def bound_rows(self, X):
        X = np.asarray(X, dtype=np.float64)
        total = np.zeros(len(X))
        for ell in range(self.levels):
            # level ell pools over blocks of 2**(ell + 1)
            P = pool_project(X, 1 << (ell + 1))
            total += ((P - X) ** 2).sum(axis=1) / 4.0 ** ell
        return total

    def _params(self):
        return [self.d, self.levels, self.drop], []

    @classmethod
    def _from_params(cls, ints, arrays):
        return cls(*ints)


class SelectCodec(Codec):
    """Keeps a fixed coordinate subset; the rest decode to zero."""

    def __init__(self, d: int, kept: np.ndarray):
        super().__init__(d)
        self.kept = np.asarray(kept, dtype=np.int64)
        dropped = np.ones(d, dtype=bool)
        dropped[self.kept] = False
        self.dropped = np.nonzero(dropped)[0]

    @property
    def width(self):
        return len(self.kept)

    def encode_rows(self, X):
        return np.asarray(X, dtype=np.float64)[..., self.kept]

    def decode_rows(self, Z):
        Z = np.asarray(Z, dtype=np.float64)
        out = np.zeros((*Z.shape[:-1], self.d))
        out[..., self.kept] = Z
        return out

    def project_query(self, q):
        return q[self.kept]

    def bound_rows(self, X):
        X = np.asarray(X, dtype=np.float64)
        return (X[:, self.dropped] ** 2).sum(axis=1)

    def _params(self):
        return [self.d], [self.kept.astype(np.float64)]

    @classmethod
    def _from_params(cls, ints, arrays):
        return cls(ints[0], arrays[0].astype(np.int64))


class FastVCodec(SelectCodec):
    scheme = "FastV"

    def __init__(self, d: int, r: int):
        super().__init__(d, np.arange(r))

    def bound_rows(self, X):
        X = np.asarray(X, dtype=np.float64)
        return (X[:, self.width:] ** 2).sum(axis=1)

    def _params(self):
        return [self.d, self.width], []

    @classmethod
    def _from_params(cls, ints, arrays):
        return cls(*ints)


class PruneCodec(SelectCodec):
    """Structured pruning: the zero set is the lowest-variance coordinates."""

    scheme = "Prune"


class DistillCodec(ProjectionCodec):
    """Linear autoencoder trained by gradient descent (encoder r x d, decoder d x r)."""

    scheme = "Distill"

    def bound_rows(self, X):
        return None

    def bound_total(self, X):
        # no closed-form bound; report the rank-r optimum the student approaches
        s = _singular_values(X)
        return float((s[self.width:] ** 2).sum())


class ChunkCodec(Codec):
    """Block PCA over consecutive chunks of entries.

    Each chunk of ``chunk_size`` rows gets its own rank-r basis from the SVD of
    the chunk, so encoding works on blocks rather than single vectors.
    """

    scheme = "Chunk"

    def __init__(self, d: int, r: int, chunk_size: int):
        super().__init__(d)
        self.r, self.chunk_size = r, chunk_size

    @property
    def width(self):
        return self.r

    def encode_block(self, X):
        """Return (basis d x r', coefficients n x r') for one chunk."""
        X = np.asarray(X, dtype=np.float64)
        _, _, Vt = np.linalg.svd(X, full_matrices=False)
        basis = Vt[: self.r].T
        if basis.shape[1] < self.r:
            basis = np.hstack([basis, np.zeros((self.d, self.r - basis.shape[1]))])
        return basis, X @ basis

    def decode_block(self, basis, Z):
        return np.asarray(Z) @ basis.T

    def encode_rows(self, X):
        raise InvalidArgument("Chunk codec encodes whole blocks; use encode_block")

    def decode_rows(self, Z):
        raise InvalidArgument("Chunk codec decodes whole blocks; use decode_block")

    def project_query(self, q):
        raise InvalidArgument("Chunk payloads use per-block bases; attend on decoded vectors")

    def blocks(self, X):
        X = np.asarray(X, dtype=np.float64)
        return [X[i:i + self.chunk_size] for i in range(0, len(X), self.chunk_size)]

    def roundtrip(self, X):
        return np.vstack([self.decode_block(*self.encode_block(b)) for b in self.blocks(X)])

    def bound_rows(self, X):
        return None

    def bound_total(self, X):
        total = 0.0
        for b in self.blocks(X):
            s = _singular_values(b)
            total += float((s[self.r:] ** 2).sum())
        return total

    def _params(self):
        return [self.d, self.r, self.chunk_size], []

    @classmethod
    def _from_params(cls, ints, arrays):
        return cls(*ints)


class ComposedCodec(Codec):
    """Sequential composition of per-vector codecs (first stage applied first)."""

    scheme = "Composed"

    def __init__(self, stages: list[Codec]):
        super().__init__(stages[0].d)
        for a, b in zip(stages, stages[1:]):
            if a.width != b.d:
                raise InvalidConfig(f"stage width {a.width} does not feed stage input {b.d}")
        self.stages = stages

    @property
    def width(self):
        return self.stages[-1].width

    def encode_rows(self, X):
        for s in self.stages:
            X = s.encode_rows(X)
        return X

    def decode_rows(self, Z):
        for s in reversed(self.stages):
            Z = s.decode_rows(Z)
        return Z

    def project_query(self, q):
        for s in self.stages:
            q = s.project_query(q)
        return q

    def bound_rows(self, X):
        return None

    def bound_total(self, X):
        return float("nan")


_CLASSES = {c.scheme: c for c in (IdentityCodec, SVDCodec, LoRACodec, LoRAPlusCodec, PyramidCodec,
                                  FastVCodec, PruneCodec, DistillCodec, ChunkCodec, ComposedCodec)}
_TAGS = {name: i for i, name in enumerate(SCHEMES + ("Composed",))}


# ---------------------------------------------------------------------------
# fitting


def _top_right_basis(X: np.ndarray, r: int) -> np.ndarray:
    _, _, Vt = np.linalg.svd(X, full_matrices=False)
    V = Vt[:r].T
    if V.shape[1] < r:
        raise InsufficientCalibration(f"calibration rank supports at most {V.shape[1]} components")
    return V


def _adam_autoencoder(X, r, steps, lr, seed):
    n, d = X.shape
    rng = make_rng(seed)
    A = rng.standard_normal((r, d)) / math.sqrt(d)
    B = rng.standard_normal((d, r)) / math.sqrt(r)
    params = [A, B]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-12
    scale = 2.0 / n
    for it in range(1, steps + 1):
        Z = X @ A.T
        R = Z @ B.T - X
        gB = scale * R.T @ Z
        gA = scale * (R @ B).T @ X
        for p, g, mi, vi in zip(params, (gA, gB), m, v):
            mi *= b1
            mi += (1 - b1) * g
            vi *= b2
            vi += (1 - b2) * g * g
            p -= lr * (mi / (1 - b1 ** it)) / (np.sqrt(vi / (1 - b2 ** it)) + eps)
    return A, B


def fit(scheme: str, calibration, cfg: CompressorConfig | None = None, seed: int = 0) -> Codec:
    """Fit a codec of ``scheme`` on an n x d calibration matrix."""
    cfg = cfg or CompressorConfig(scheme=scheme)
    X = np.atleast_2d(np.asarray(calibration, dtype=np.float64))
    n, d = X.shape
    if not np.isfinite(X).all():
        raise InvalidArgument("calibration data must be finite")
    r = cfg.rank
    if scheme in ("SVD", "LoRA", "LoRAPlus", "Distill", "FastV", "Chunk") and r > d:
        raise InvalidConfig(f"rank {r} exceeds width {d}")
    if scheme in ("SVD", "LoRA", "LoRAPlus", "Distill") and n < r:
        raise InsufficientCalibration(f"{n} calibration rows cannot fit rank {r}")
    if scheme == "Identity":
        return IdentityCodec(d)
    if scheme in ("SVD", "LoRA"):
        V = _top_right_basis(X, r)
        cls = SVDCodec if scheme == "SVD" else LoRACodec
        return cls(d, V.T, V)
    if scheme == "LoRAPlus":
        b = X.mean(axis=0)
        V = _top_right_basis(X - b, r)
        return LoRAPlusCodec(d, V.T, V, b)
    if scheme == "Pyramid":
        return PyramidCodec(d, cfg.levels, cfg.pyramid_drop)
    if scheme == "FastV":
        return FastVCodec(d, r)
    if scheme == "Prune":
        n_zero = math.ceil(cfg.prune_frac * d)
        var = X.var(axis=0)
        order = np.argsort(-var, kind="stable")
        return PruneCodec(d, np.sort(order[: d - n_zero]))
    if scheme == "Chunk":
        return ChunkCodec(d, r, cfg.chunk_size)
    if scheme == "Distill":
        A, B = _adam_autoencoder(X, r, cfg.distill_steps, cfg.distill_lr, seed)
        return DistillCodec(d, A, B)
    raise InvalidConfig(f"unknown scheme {scheme!r}")


def fit_composed(schemes, calibration, cfgs, seed: int = 0) -> ComposedCodec:
    """Fit stages in order, each on the previous stage's encoded calibration."""
    X = np.asarray(calibration, dtype=np.float64)
    stages = []
    for scheme, cfg in zip(schemes, cfgs):
        if scheme == "Chunk":
            raise InvalidConfig("Chunk works on blocks and cannot be a composition stage")
        c = fit(scheme, X, cfg, seed)
        stages.append(c)
        X = c.encode_rows(X)
    return ComposedCodec(stages)


# ---------------------------------------------------------------------------
# per-entry API


def encode(codec: Codec, K, V) -> CompressedKV:
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if K.shape != (codec.d,) or V.shape != (codec.d,):
        raise InvalidEntry(f"expected width {codec.d}, got {K.shape} and {V.shape}")
    if isinstance(codec, ChunkCodec):
        basis, Z = codec.encode_block(np.vstack([K, V]))
        return CompressedKV(codec.scheme, Z[0], Z[1], codec.d, codec.width, basis)
    Z = codec.encode_rows(np.vstack([K, V]))
    return CompressedKV(codec.scheme, Z[0], Z[1], codec.d, codec.width)


def decode(codec: Codec, c: CompressedKV) -> tuple[np.ndarray, np.ndarray]:
    if c.scheme != codec.scheme or c.original_width != codec.d:
        raise CodecMismatch(f"payload {c.scheme}/{c.original_width} vs codec {codec.scheme}/{codec.d}")
    if isinstance(codec, ChunkCodec):
        Y = codec.decode_block(c.basis, np.vstack([c.key, c.value]))
    else:
        Y = codec.decode_rows(np.vstack([c.key, c.value]))
    return Y[0], Y[1]


def roundtrip(codec: Codec, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if isinstance(codec, ChunkCodec):
        return codec.roundtrip(X)
    return codec.decode_rows(codec.encode_rows(X))


def squared_errors(codec: Codec, X) -> np.ndarray:
    """Absolute squared reconstruction error of each row."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return ((X - roundtrip(codec, X)) ** 2).sum(axis=1)


def reconstruction_error(codec: Codec, K) -> float:
    """Relative error ||K - D(C(K))|| / ||K||."""
    K = np.asarray(K, dtype=np.float64)
    norm = float(np.linalg.norm(K))
    if norm == 0.0:
        raise InvalidArgument("reconstruction error of a zero vector is undefined")
    return math.sqrt(float(squared_errors(codec, K[None])[0])) / norm


def payload_elements(codec: Codec) -> int:
    """Stored scalars per (key, value) entry, excluding shared codec parameters."""
    return 2 * codec.width


# ---------------------------------------------------------------------------
# serialization


def to_bytes(codec: Codec) -> bytes:
    out = [MAGIC, struct.pack("<HB", VERSION, _TAGS[codec.scheme])]
    if isinstance(codec, ComposedCodec):
        out.append(struct.pack("<I", len(codec.stages)))
        for s in codec.stages:
            blob = to_bytes(s)
            out.append(struct.pack("<I", len(blob)))
            out.append(blob)
        return b"".join(out)
    ints, arrays = codec._params()
    out.append(struct.pack("<I", len(ints)))
    out.append(struct.pack(f"<{len(ints)}q", *ints))
    out.append(struct.pack("<I", len(arrays)))
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def from_bytes(blob: bytes) -> Codec:
    codec, _ = _read(memoryview(blob), 0)
    return codec


def _read(buf, pos):
    if bytes(buf[pos:pos + 4]) != MAGIC:
        raise CodecMismatch("not a codec blob (bad magic)")
    version, tag = struct.unpack_from("<HB", buf, pos + 4)
    if version != VERSION:
        raise CodecMismatch(f"unsupported codec blob version {version}")
    pos += 7
    names = SCHEMES + ("Composed",)
    if tag >= len(names):
        raise CodecMismatch(f"unknown scheme tag {tag}")
    cls = _CLASSES[names[tag]]
    if cls is ComposedCodec:
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        stages = []
        for _ in range(n):
            (size,) = struct.unpack_from("<I", buf, pos)
            stage, _ = _read(buf, pos + 4)
            stages.append(stage)
            pos += 4 + size
        return ComposedCodec(stages), pos
    (n_ints,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    ints = list(struct.unpack_from(f"<{n_ints}q", buf, pos))
    pos += 8 * n_ints
    (n_arr,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = []
    for _ in range(n_arr):
        (ndim,) = struct.unpack_from("<B", buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
        pos += 1 + 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays.append(np.frombuffer(bytes(buf[pos:pos + 8 * count]), dtype="<f8").reshape(shape).copy())
        pos += 8 * count
    return cls._from_params(ints, arrays), pos
