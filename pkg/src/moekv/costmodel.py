"""Closed-form cost models: per-device memory, optimal shard size, decode
latency under compression, dense vs sparse I/O, reuse distance and a
roofline-style throughput ratio.

Everything here is a pure function of its arguments. Memory is counted in
vector elements unless ``units="bytes"`` is asked for, and the stored width
is the continuous d / rho so the closed forms hold exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .core import InvalidArgument, InvalidConfig, ModelConfig


@dataclass(frozen=True)
class HardwareProfile:
    beta: float = 1.6e12  # memory bandwidth, bytes/s
    gamma_core: float = 1.0e12  # decode throughput, bytes/s
    eta_decode: float = 1.0  # decode factor, at most 2
    peak_compute: float = 3.12e14  # FLOP/s
    peak_mem_bw: float = 1.6e12  # bytes/s

    def __post_init__(self):
        for name in ("beta", "gamma_core", "eta_decode", "peak_compute", "peak_mem_bw"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise InvalidConfig(f"{name} must be positive and finite, got {v}")
        if self.eta_decode > 2:
            raise InvalidConfig(f"eta_decode must be <= 2, got {self.eta_decode}")


# ---------------------------------------------------------------------------
# memory


def memory_terms(d, rho, L, G, S, K):
    """(M_token, M_page, M_total) in elements for raw parameters."""
    if min(d, rho, L, G, S, K) <= 0:
        raise InvalidConfig("d, rho, L, G, S and K must all be positive")
    dp = d / rho
    m_token = 2 * dp / G * (L / S)
    m_page = 2 * dp * K * S
    return m_token, m_page, m_token + m_page


def mem_total(cfg: ModelConfig, units: str = "elements"):
    """Per-device memory (M_token, M_page, M_total); ``units`` is "elements" or "bytes"."""
    m = memory_terms(cfg.d, cfg.rho, cfg.L, cfg.G, cfg.S, cfg.K)
    if units == "elements":
        return m
    if units == "bytes":
        return tuple(x * cfg.elem_bytes for x in m)
    raise InvalidArgument(f"units must be 'elements' or 'bytes', got {units!r}")


def mem_optimum(d, rho, L, G, K) -> float:
    """Closed-form minimum of M_total over S: (4d/rho) sqrt(K L / G)."""
    return 4 * d / rho * math.sqrt(K * L / G)


@dataclass(frozen=True)
class ShardSize:
    s_star: float
    floor: int
    ceil: int
    mem_floor: float
    mem_ceil: float

    @property
    def best(self) -> int:
        """The cheaper integer candidate (the smaller one on a tie)."""
        return self.floor if self.mem_floor <= self.mem_ceil else self.ceil


def optimal_shard_size(L, K, G, d: float = 1.0, rho: float = 1.0) -> ShardSize:
    """S* = sqrt(L / (K G)) plus its integer neighbours, each priced by M_total."""
    if min(L, K, G) <= 0:
        raise InvalidConfig("L, K and G must be positive")
    s = math.sqrt(L / (K * G))
    lo = max(1, math.floor(s))
    hi = max(1, math.ceil(s))
    return ShardSize(s, lo, hi, memory_terms(d, rho, L, G, lo, K)[2],
                     memory_terms(d, rho, L, G, hi, K)[2])


# ---------------------------------------------------------------------------
# latency


def latency_terms(d, k, B, rho, beta, gamma, eta):
    """(T_read, T_decode, T_step) in seconds for raw parameters."""
    dp = d / rho
    t_read = 2 * dp * k * B / beta
    t_decode = eta * dp * k * B / gamma
    return t_read, t_decode, t_read + t_decode


def latency_step(cfg: ModelConfig, hw: HardwareProfile, B: int = 1):
    if B <= 0:
        raise InvalidArgument("batch size must be positive")
    return latency_terms(cfg.d, cfg.k, B, cfg.rho, hw.beta, hw.gamma_core, hw.eta_decode)


def speedup(cfg: ModelConfig, hw: HardwareProfile, rho1: float, rho2: float, B: int = 1) -> float:
    """T_step at compression rho1 divided by T_step at rho2."""
    t1 = latency_terms(cfg.d, cfg.k, B, rho1, hw.beta, hw.gamma_core, hw.eta_decode)[2]
    t2 = latency_terms(cfg.d, cfg.k, B, rho2, hw.beta, hw.gamma_core, hw.eta_decode)[2]
    return t1 / t2


# ---------------------------------------------------------------------------
# I/O and roofline
#
# L is read as the attended prefix length per decoded token, so B * L counts
# (query, cached entry) pairs touched in one step.


@dataclass(frozen=True)
class Roofline:
    io_dense: float
    io_sparse: float
    rd_dense: float
    rd_sparse: float
    hit_rate: float
    arith_intensity: float
    throughput_scaling: float
    bound: str | None = None  # "compute" or "memory" when a profile is given


def io_terms(L, h, d, E, k, B: int = 1):
    io_dense = 2 * B * L * h * E + B * L * d * E
    io_sparse = 2 * B * L * h * k + B * L * d * k
    return io_dense, io_sparse


def io_and_roofline(cfg: ModelConfig, B: int = 1, hw: HardwareProfile | None = None) -> Roofline:
    if B <= 0:
        raise InvalidArgument("batch size must be positive")
    h, d, E, k, L = cfg.head_width, cfg.d, cfg.E, cfg.k, cfg.L
    io_dense, io_sparse = io_terms(L, h, d, E, k, B)
    ai = h / (2 * h + d)
    bound = None
    if hw is not None:
        bound = "memory" if ai * hw.peak_mem_bw < hw.peak_compute else "compute"
    return Roofline(io_dense, io_sparse, L / E, L / k, k / E, ai, E / k, bound)


def utilization_check(cfg: ModelConfig, active_experts: int, threshold: float):
    """(passed, eta_util) with eta_util = (k/E) * (active / E)."""
    if not 0 <= active_experts <= cfg.E:
        raise InvalidArgument(f"active expert count {active_experts} outside [0, {cfg.E}]")
    eta = (cfg.k / cfg.E) * (active_experts / cfg.E)
    return eta >= threshold, eta


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    mem_token: float
    mem_page: float
    mem_total: float
    t_read: float
    t_decode: float
    t_step: float
    io_dense: float
    io_sparse: float
    rd_dense: float
    rd_sparse: float
    hit_rate_approx: float
    arith_intensity: float
    throughput_scaling: float
    bound: str
    util_eta: float | None = None

    def as_record(self) -> dict:
        return asdict(self)


def cost_report(cfg: ModelConfig, hw: HardwareProfile | None = None, B: int = 1,
                active_experts: int | None = None, units: str = "elements") -> CostReport:
    hw = hw or HardwareProfile()
    mt, mp, mtot = mem_total(cfg, units)
    tr, td, ts = latency_step(cfg, hw, B)
    r = io_and_roofline(cfg, B, hw)
    util = None
    if active_experts is not None:
        util = utilization_check(cfg, active_experts, 0.0)[1]
    return CostReport(mt, mp, mtot, tr, td, ts, r.io_dense, r.io_sparse, r.rd_dense, r.rd_sparse,
                      r.hit_rate, r.arith_intensity, r.throughput_scaling, r.bound, util)
