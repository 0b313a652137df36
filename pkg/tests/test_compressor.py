import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moekv import compressor as cmp
from moekv.compressor import CompressorConfig
from moekv.core import CodecMismatch, InsufficientCalibration, InvalidArgument, InvalidConfig, InvalidEntry
from moekv.kvstore import KVStore, ShardId
from moekv.core import KVEntry

PER_VECTOR = ("Identity", "LoRA", "LoRAPlus", "Pyramid", "SVD", "FastV", "Distill", "Prune")


def gaussian(n, d, seed=0):
    return np.random.default_rng(seed).standard_normal((n, d))


def low_rank(n, d, r, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, r)) @ rng.standard_normal((r, d))
    return X + noise * rng.standard_normal((n, d))


def fit(scheme, X, **kw):
    return cmp.fit(scheme, X, CompressorConfig(scheme, **kw), seed=0)


# -- worked examples -----------------------------------------------------------


def test_fastv_crop_examples():
    codec = fit("FastV", gaussian(8, 2), rank=1)
    c = cmp.encode(codec, [3.0, 4.0], [1.0, 1.0])
    assert np.array_equal(c.key, [3.0])
    k, _ = cmp.decode(codec, c)
    assert np.array_equal(k, [3.0, 0.0])
    assert cmp.reconstruction_error(codec, np.array([3.0, 4.0])) == pytest.approx(0.8)
    assert cmp.squared_errors(codec, [[3.0, 4.0]])[0] == pytest.approx(16.0)


def test_prune_examples():
    # coordinate 1 has the smaller variance, so it forms the zero set
    calib = np.array([[10.0, 0.1], [-10.0, -0.1], [5.0, 0.0]])
    codec = fit("Prune", calib, prune_frac=0.5)
    assert list(codec.kept) == [0] and list(codec.dropped) == [1]
    c = cmp.encode(codec, [3.0, 4.0], [0.0, 0.0])
    assert np.array_equal(c.key, [3.0])
    assert np.array_equal(cmp.decode(codec, c)[0], [3.0, 0.0])
    assert cmp.squared_errors(codec, [[3.0, 4.0]])[0] == pytest.approx(16.0)


def test_svd_rank_one_is_exact():
    M = np.array([[1.0, 2.0], [2.0, 4.0]])
    codec = fit("SVD", M, rank=1)
    assert cmp.reconstruction_error(codec, M[0]) == pytest.approx(0.0, abs=1e-12)
    X = low_rank(50, 6, 1, seed=2)
    codec = fit("SVD", X, rank=1)
    assert np.allclose(cmp.roundtrip(codec, X), X, atol=1e-9)


def test_svd_full_rank_is_a_rotation():
    X = gaussian(40, 5)
    codec = fit("SVD", X, rank=5)
    k = X[0]
    c = cmp.encode(codec, k, k)
    assert np.linalg.norm(c.key) == pytest.approx(np.linalg.norm(k))
    assert np.allclose(cmp.decode(codec, c)[0], k, atol=1e-9)


def test_pyramid_is_data_independent():
    a = fit("Pyramid", gaussian(30, 8, seed=1), levels=2)
    b = fit("Pyramid", gaussian(30, 8, seed=2) * 100, levels=2)
    assert np.array_equal(a.enc, b.enc)
    assert a.width == 4  # drop=1 removes the finest detail level


def test_pyramid_decode_is_pooling():
    codec = fit("Pyramid", gaussian(4, 8), levels=3, pyramid_drop=2)
    x = np.arange(8.0)
    assert np.allclose(cmp.roundtrip(codec, x)[0], cmp.pool_project(x, 4))


# -- errors --------------------------------------------------------------------


def test_errors():
    X = gaussian(10, 4)
    with pytest.raises(InsufficientCalibration):
        fit("SVD", X[:2], rank=3)
    with pytest.raises(InvalidConfig):
        fit("SVD", X, rank=5)
    with pytest.raises(InvalidConfig):
        CompressorConfig("Zip")
    with pytest.raises(InvalidConfig):
        fit("Pyramid", gaussian(4, 6), levels=2)
    codec = fit("SVD", X, rank=2)
    with pytest.raises(InvalidEntry):
        cmp.encode(codec, np.ones(3), np.ones(3))
    other = fit("FastV", X, rank=2)
    with pytest.raises(CodecMismatch):
        cmp.decode(other, cmp.encode(codec, X[0], X[1]))
    with pytest.raises(InvalidArgument):
        cmp.reconstruction_error(codec, np.zeros(4))
    with pytest.raises(InvalidArgument):
        fit("SVD", np.full((5, 4), np.nan), rank=1)


# -- bounds and optimality -----------------------------------------------------


def tail_energy(X, r):
    """Independent route: eigenvalues of X^T X beyond the r largest."""
    w = np.sort(np.linalg.eigvalsh(X.T @ X))[::-1]
    return float(np.clip(w[r:], 0, None).sum())


@pytest.mark.parametrize("scheme", ["SVD", "LoRA"])
@given(seed=st.integers(0, 10_000), r=st.integers(1, 7))
def test_eckart_young_equality(scheme, seed, r):
    X = gaussian(60, 8, seed)
    codec = fit(scheme, X, rank=r)
    err = cmp.squared_errors(codec, X).sum()
    assert err == pytest.approx(tail_energy(X, r), rel=1e-6, abs=1e-9)


@given(seed=st.integers(0, 10_000))
def test_per_row_bounds(seed):
    X = gaussian(100, 16, seed)
    calib = gaussian(200, 16, seed + 1)
    for scheme, kw in [("LoRAPlus", dict(rank=5)), ("Pyramid", dict(levels=3)),
                       ("FastV", dict(rank=6)), ("Prune", dict(prune_frac=0.4))]:
        codec = fit(scheme, calib, **kw)
        err = cmp.squared_errors(codec, X)
        assert np.all(err <= codec.bound_rows(X) * (1 + 1e-6) + 1e-12), scheme


def test_chunk_bound_is_equality():
    X = gaussian(70, 8, 3)
    codec = fit("Chunk", X, rank=3, chunk_size=16)
    err = cmp.squared_errors(codec, X).sum()
    oracle = sum(tail_energy(X[i:i + 16], 3) for i in range(0, 70, 16))
    assert err == pytest.approx(oracle, rel=1e-6)
    assert err == pytest.approx(codec.bound_total(X), rel=1e-9)


def test_dominance_svd_lora_fastv():
    X = gaussian(200, 12, 5) * np.linspace(0.2, 3.0, 12)
    errs = {s: cmp.squared_errors(fit(s, X, rank=4), X).sum() for s in ("SVD", "LoRA", "FastV")}
    assert errs["SVD"] <= errs["LoRA"] * (1 + 1e-12) <= errs["FastV"] * (1 + 1e-12)


def test_distill_tracks_svd_on_held_out_low_rank_data():
    r, d = 4, 16
    # one draw split in two: same subspace, disjoint rows
    data = low_rank(768, d, r, seed=1, noise=0.05)
    train, held = data[:512], data[512:]
    svd = fit("SVD", train, rank=r)
    dis = fit("Distill", train, rank=r)
    eps = lambda c: math.sqrt(cmp.squared_errors(c, held).sum() / (held ** 2).sum())
    assert eps(dis) <= 2 * eps(svd)


@pytest.mark.parametrize("scheme,kw", [("Identity", {}), ("SVD", dict(rank=8)), ("LoRA", dict(rank=8)),
                                       ("LoRAPlus", dict(rank=8)), ("Pyramid", dict(pyramid_drop=0)),
                                       ("FastV", dict(rank=8)), ("Prune", dict(prune_frac=0.0)),
                                       ("Distill", dict(rank=8)), ("Chunk", dict(rank=8))])
def test_lossless_limit(scheme, kw):
    X = gaussian(64, 8, 9)
    codec = fit(scheme, X, **kw)
    assert codec.width == 8
    assert np.allclose(cmp.roundtrip(codec, X), X, atol=1e-9)


# -- accounting and serialization ---------------------------------------------


@pytest.mark.parametrize("scheme", PER_VECTOR + ("Chunk",))
def test_payload_accounting(scheme):
    codec = fit(scheme, gaussian(64, 16), rank=4)
    c = cmp.encode(codec, np.ones(16), np.ones(16))
    assert c.stored_width == codec.width
    assert cmp.payload_elements(codec) == 2 * codec.width
    assert c.key.size + c.value.size <= 2 * codec.width


def test_store_memory_scales_with_width():
    def filled(width):
        store = KVStore(1, 1, 1, 8, width)
        for t in range(5):
            store.insert(ShardId(0, 0), KVEntry(t, 0, np.zeros(width), np.zeros(width)))
        return store.memory_bytes()

    codec = fit("SVD", gaussian(64, 16), rank=4)
    assert filled(codec.width) * 16 == filled(16) * codec.width


@pytest.mark.parametrize("scheme", PER_VECTOR + ("Chunk",))
def test_serialization_roundtrip(scheme):
    X = gaussian(64, 16)
    codec = fit(scheme, X, rank=4)
    blob = cmp.to_bytes(codec)
    assert blob[:4] == b"PIKC"
    back = cmp.from_bytes(blob)
    assert type(back) is type(codec) and back.width == codec.width
    assert np.array_equal(cmp.roundtrip(back, X), cmp.roundtrip(codec, X))


def test_deserialization_rejects_garbage():
    with pytest.raises(CodecMismatch):
        cmp.from_bytes(b"XXXX\x01\x00\x00")
    blob = bytearray(cmp.to_bytes(fit("FastV", gaussian(4, 4), rank=2)))
    blob[4] = 9
    with pytest.raises(CodecMismatch):
        cmp.from_bytes(bytes(blob))


def test_composition():
    X = gaussian(128, 16)
    cfgs = [CompressorConfig("Pyramid", levels=1, pyramid_drop=1), CompressorConfig("SVD", rank=4)]
    codec = cmp.fit_composed(["Pyramid", "SVD"], X, cfgs)
    assert codec.width == 4
    Y = cmp.roundtrip(codec, X)
    assert Y.shape == X.shape
    # the composed map never beats the best rank-4 approximation
    assert ((X - Y) ** 2).sum() >= tail_energy(X, 4) * (1 - 1e-9)
    back = cmp.from_bytes(cmp.to_bytes(codec))
    assert np.allclose(cmp.roundtrip(back, X), Y)
    with pytest.raises(InvalidConfig):
        cmp.fit_composed(["Chunk"], X, [CompressorConfig("Chunk", rank=2)])


def test_projected_query_scores_match_decoded_keys():
    X = gaussian(100, 12)
    q = gaussian(1, 12, 4)[0]
    for scheme in ("SVD", "LoRA", "Pyramid", "FastV", "Prune", "Distill"):
        codec = fit(scheme, X, rank=5)
        Z = codec.encode_rows(X)
        assert np.allclose(Z @ codec.project_query(q), codec.decode_rows(Z) @ q, atol=1e-9), scheme
    codec = fit("LoRAPlus", X, rank=5)
    Z = codec.encode_rows(X)
    diff = codec.decode_rows(Z) @ q - Z @ codec.project_query(q)
    assert np.allclose(diff, diff[0])  # constant offset, invisible to softmax


def test_fit_is_deterministic():
    X = gaussian(64, 8)
    for scheme in PER_VECTOR:
        a, b = fit(scheme, X, rank=3), fit(scheme, X, rank=3)
        assert cmp.to_bytes(a) == cmp.to_bytes(b)
