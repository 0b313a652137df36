import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moekv import costmodel as cm
from moekv.core import InvalidArgument, InvalidConfig, ModelConfig

pos = st.floats(1e-3, 1e6, allow_nan=False, allow_infinity=False)


def test_mem_total_example():
    m = ModelConfig(d=64, rho=2, L=1024, G=4, S=8, K=2)
    assert cm.mem_total(m) == (2048.0, 1024.0, 3072.0)
    assert cm.mem_total(m, units="bytes")[2] == 3072.0 * m.elem_bytes
    with pytest.raises(InvalidArgument):
        cm.mem_total(m, units="bits")


def test_mem_page_single_slot():
    assert cm.memory_terms(d=64, rho=2, L=1024, G=4, S=1, K=1)[1] == 2 * 32


def test_mem_at_optimum():
    m = ModelConfig(d=64, rho=2, L=1024, K=4, G=16, S=4)
    assert cm.mem_total(m)[2] == 2048.0
    assert cm.mem_optimum(64, 2, 1024, 16, 4) == 2048.0


def test_zero_denominators():
    with pytest.raises(InvalidConfig):
        cm.memory_terms(64, 2, 1024, 4, 0, 2)
    with pytest.raises(InvalidConfig):
        ModelConfig(K=0)


@given(pos, st.floats(1, 16), pos, st.integers(1, 64), pos, st.integers(1, 64))
def test_additivity(d, rho, L, G, S, K):
    mt, mp, tot = cm.memory_terms(d, rho, L, G, S, K)
    assert tot == mt + mp


def test_optimal_shard_size_examples():
    s = cm.optimal_shard_size(1024, 4, 16)
    assert s.s_star == 4.0 and s.floor == s.ceil == s.best == 4
    assert cm.optimal_shard_size(12, 3, 4).s_star == 1.0
    s = cm.optimal_shard_size(1024, 2, 4, d=64, rho=2)
    assert s.floor == 11 and s.ceil == 12
    # 64*(1024/(4*11) + 2*11) vs 64*(1024/(4*12) + 2*12)
    assert s.mem_floor == pytest.approx(64 * (1024 / 44 + 22))
    assert s.mem_ceil == pytest.approx(64 * (1024 / 48 + 24))
    assert s.best == 11


@given(st.integers(1, 10**6), st.integers(1, 64), st.integers(1, 64))
def test_optimum_is_a_minimum(L, K, G):
    s = cm.optimal_shard_size(L, K, G)
    m_star = cm.memory_terms(64, 1, L, G, s.s_star, K)[2]
    assert m_star == pytest.approx(cm.mem_optimum(64, 1, L, G, K), rel=1e-9)
    for S in (s.s_star * 0.9, s.s_star * 1.1):
        assert cm.memory_terms(64, 1, L, G, S, K)[2] >= m_star * (1 - 1e-12)


def test_latency_example():
    m = ModelConfig(d=64, k=4, E=8, rho=2)
    hw = cm.HardwareProfile(beta=1e9, gamma_core=1e9, eta_decode=2, peak_compute=1, peak_mem_bw=1)
    tr, td, ts = cm.latency_step(m, hw, B=1)
    assert ts == pytest.approx(5.12e-7, rel=1e-12)
    assert ts == tr + td
    assert cm.speedup(m, hw, 2, 4) == pytest.approx(2.0)
    assert cm.speedup(m, hw, 3, 3) == 1.0


@given(pos, st.integers(1, 64), st.integers(1, 64), st.floats(1, 64), st.floats(1, 64), pos, pos,
       st.floats(0.01, 2))
def test_speedup_law(d, k, B, r1, r2, beta, gamma, eta):
    t1 = cm.latency_terms(d, k, B, r1, beta, gamma, eta)[2]
    t2 = cm.latency_terms(d, k, B, r2, beta, gamma, eta)[2]
    assert t1 / t2 == pytest.approx(r2 / r1, rel=1e-12)


def test_hardware_validation():
    with pytest.raises(InvalidConfig):
        cm.HardwareProfile(eta_decode=2.5)
    with pytest.raises(InvalidConfig):
        cm.HardwareProfile(beta=0)


def test_roofline_examples():
    r = cm.io_and_roofline(ModelConfig(d=64, head_width=16, E=64, k=4))
    assert r.throughput_scaling == 16
    assert r.io_dense / r.io_sparse == 16
    r = cm.io_and_roofline(ModelConfig(d=64, head_width=16, E=16, k=4))
    assert r.hit_rate == 0.25
    r = cm.io_and_roofline(ModelConfig(d=512, head_width=64, E=8, k=2), hw=cm.HardwareProfile())
    assert r.arith_intensity == pytest.approx(0.1)
    assert r.bound == "memory"
    fast_mem = cm.HardwareProfile(peak_compute=1.0, peak_mem_bw=1e12)
    assert cm.io_and_roofline(ModelConfig(d=512, head_width=64), hw=fast_mem).bound == "compute"


@given(st.integers(1, 128), st.integers(1, 64), st.integers(1, 10**5), st.integers(1, 64), st.data())
def test_scale_laws(E, h, L, B, data):
    k = data.draw(st.integers(1, E))
    d = data.draw(st.integers(h, 4 * h))
    r = cm.io_and_roofline(ModelConfig(d=d, head_width=h, E=E, k=k, L=L), B)
    assert r.io_dense * k == r.io_sparse * E
    assert r.rd_sparse * k == pytest.approx(r.rd_dense * E)
    assert r.hit_rate == k / E and r.throughput_scaling == E / k


def test_utilization_examples():
    m = ModelConfig(E=16, k=4)
    assert cm.utilization_check(m, 16, 0.2) == (True, 0.25)
    assert cm.utilization_check(m, 8, 0.2) == (False, 0.125)
    with pytest.raises(InvalidArgument):
        cm.utilization_check(m, 17, 0.2)


def test_cost_report_invariants():
    rep = cm.cost_report(ModelConfig(d=64, E=64, k=4, rho=2), active_experts=32)
    assert rep.mem_total == rep.mem_token + rep.mem_page
    assert rep.t_step == rep.t_read + rep.t_decode
    assert rep.throughput_scaling == 16
    assert rep.util_eta == pytest.approx(4 / 64 * 0.5)
    assert set(rep.as_record()) >= {"mem_total", "t_step", "io_dense", "bound"}
