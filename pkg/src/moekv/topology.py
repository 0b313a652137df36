"""Simulated device topology and fetch cost accounting (virtual time only)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidArgument, InvalidConfig


@dataclass(frozen=True)
class Topology:
    """``G`` devices joined by links with per-pair latency (s) and bandwidth (B/s)."""

    latency: np.ndarray
    bandwidth: np.ndarray
    local_latency: float = 1e-7

    def __post_init__(self):
        lat = np.asarray(self.latency, dtype=np.float64)
        bw = np.asarray(self.bandwidth, dtype=np.float64)
        if lat.ndim != 2 or lat.shape[0] != lat.shape[1] or bw.shape != lat.shape:
            raise InvalidConfig("latency and bandwidth must be matching square matrices")
        if not np.allclose(lat, lat.T) or np.any(np.diag(lat) != 0):
            raise InvalidConfig("latency matrix must be symmetric with a zero diagonal")
        off = ~np.eye(len(bw), dtype=bool)
        if np.any(bw[off] <= 0) or np.any(lat < 0) or self.local_latency < 0:
            raise InvalidConfig("bandwidths must be positive and latencies non-negative")
        object.__setattr__(self, "latency", lat)
        object.__setattr__(self, "bandwidth", bw)

    @property
    def G(self) -> int:
        return self.latency.shape[0]

    @classmethod
    def uniform(cls, G: int, link_latency: float = 1e-6, link_bandwidth: float = 1e9,
                local_latency: float = 1e-7) -> "Topology":
        lat = np.full((G, G), link_latency)
        np.fill_diagonal(lat, 0.0)
        bw = np.full((G, G), link_bandwidth)
        return cls(lat, bw, local_latency)


def simulate_fetch(topo: Topology, src: int, dst: int, nbytes: int) -> float:
    """Seconds to move ``nbytes`` from device ``src`` to ``dst``."""
    if not (0 <= src < topo.G and 0 <= dst < topo.G):
        raise InvalidArgument(f"device index outside [0, {topo.G})")
    if nbytes < 0:
        raise InvalidArgument("byte count must be non-negative")
    if src == dst:
        return topo.local_latency
    return float(topo.latency[src, dst] + nbytes / topo.bandwidth[src, dst])
