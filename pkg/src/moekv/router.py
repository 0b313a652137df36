"""Top-k expert routing with load, cache-miss, entropy and bandit penalties."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import InvalidArgument, InvalidConfig, NumericalError, make_rng, softmax

STRATEGIES = ("Base", "TopK", "LoadBalanced", "CacheAware", "EntropyLB", "Adaptive", "Hierarchical")


@dataclass(frozen=True)
class RouterConfig:
    strategy: str = "TopK"
    k: int = 2
    alpha: float = 0.1  # load penalty
    lambda_miss: float = 1.0  # cache-miss penalty
    beta_ent: float = 1.0  # entropy penalty
    bandit_step: float = 0.1
    groups: int = 2
    stride: int = 1  # Base round-robin stride
    bias_cap: float = 5.0
    mu_decay: float = 0.99

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidConfig(f"unknown router strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.k < 1:
            raise InvalidConfig("k must be >= 1")
        for name in ("alpha", "lambda_miss", "beta_ent", "bandit_step", "bias_cap"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")
        if self.groups < 1:
            raise InvalidConfig("groups must be >= 1")
        if not 0.0 <= self.mu_decay < 1.0:
            raise InvalidConfig("mu_decay must lie in [0, 1)")


@dataclass
class RouterState:
    """Mutable routing state for one decode stream.

    ``mu`` is a discounted assignment count (mu <- decay * mu + selected),
    ``counts`` the raw assignment counts behind ``usage_p``.
    """

    W_r: np.ndarray
    mu: np.ndarray
    counts: np.ndarray
    miss: np.ndarray
    bandit_bias: np.ndarray
    t: int = 0

    @classmethod
    def init(cls, E: int, d: int, seed: int = 0) -> "RouterState":
        rng = make_rng(seed)
        W = rng.standard_normal((E, d)) / math.sqrt(d)
        return cls(W_r=W, mu=np.zeros(E), counts=np.zeros(E, dtype=np.int64),
                   miss=np.zeros(E, dtype=np.int64), bandit_bias=np.zeros(E))

    @property
    def E(self) -> int:
        return self.W_r.shape[0]

    @property
    def usage_p(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            return np.zeros(self.E)
        return self.counts / total

    def copy(self) -> "RouterState":
        return RouterState(self.W_r, self.mu.copy(), self.counts.copy(), self.miss.copy(),
                           self.bandit_bias.copy(), self.t)


@dataclass
class RoutingDecision:
    experts: tuple[int, ...]
    gates: np.ndarray
    logits: np.ndarray
    step: int = 0
    strategy: str = "TopK"


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending; ties go to the lower index."""
    return np.argsort(-scores, kind="stable")[:k]


def _hierarchical_select(logits: np.ndarray, k: int, groups: int) -> np.ndarray:
    E = logits.shape[0]
    clusters = np.array_split(np.arange(E), groups)
    size = max(len(c) for c in clusters)
    cluster_score = np.array([logits[c].max() for c in clusters])
    n_pick = max(1, -(-k // size))
    ranked = np.argsort(-cluster_score, kind="stable")
    chosen: list[int] = []
    for i, ci in enumerate(ranked):
        chosen.extend(clusters[ci].tolist())
        if i + 1 >= n_pick and len(chosen) >= k:
            break
    cand = np.array(sorted(chosen))
    return cand[top_k(logits[cand], k)]


def penalised_logits(query, state: RouterState, cfg: RouterConfig) -> np.ndarray:
    """Router logits W_r q with the strategy's penalty or bias applied."""
    logits = state.W_r @ np.asarray(query, dtype=np.float64)
    s = cfg.strategy
    if s == "LoadBalanced":
        logits = logits - cfg.alpha * (state.mu - state.mu.mean())
    elif s == "CacheAware":
        logits = logits - cfg.lambda_miss * np.log1p(state.miss)
    elif s == "EntropyLB":
        p = state.usage_p
        h = np.zeros_like(p)
        nz = p > 0
        h[nz] = -p[nz] * np.log(p[nz])
        logits = logits - cfg.beta_ent * h
    elif s == "Adaptive":
        logits = logits + state.bandit_bias
    return logits


def route(query, state: RouterState, cfg: RouterConfig) -> RoutingDecision:
    """Pick k experts for ``query`` and update load statistics in ``state``."""
    E = state.E
    if cfg.k > E:
        raise InvalidConfig(f"k={cfg.k} exceeds expert count {E}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (state.W_r.shape[1],):
        raise InvalidArgument(f"query width {query.shape} != router width {state.W_r.shape[1]}")
    if cfg.strategy == "Base":
        sel = np.array([(state.t * cfg.stride + j) % E for j in range(cfg.k)])
        logits = np.zeros(E)
        gates = np.full(cfg.k, 1.0 / cfg.k)
    else:
        logits = penalised_logits(query, state, cfg)
        if not np.isfinite(logits).all():
            raise NumericalError("router logits are not finite")
        if cfg.strategy == "Hierarchical":
            sel = _hierarchical_select(logits, cfg.k, min(cfg.groups, E))
        else:
            sel = top_k(logits, cfg.k)
        gates = softmax(logits[sel])
    onehot = np.zeros(E)
    onehot[sel] = 1.0
    state.mu = cfg.mu_decay * state.mu + onehot
    state.counts[sel] += 1
    decision = RoutingDecision(tuple(int(e) for e in sel), gates, logits, state.t, cfg.strategy)
    state.t += 1
    return decision


def record_miss(state: RouterState, expert: int) -> RouterState:
    if not 0 <= expert < state.E:
        raise InvalidArgument(f"expert {expert} outside [0, {state.E})")
    state.miss[expert] += 1
    return state


def adapt(state: RouterState, decision: RoutingDecision, reward: float,
          cfg: RouterConfig) -> RouterState:
    """Mean-baseline bandit step on the selected experts' biases."""
    if not 0.0 <= reward <= 1.0:
        raise InvalidArgument(f"reward {reward} outside [0, 1]")
    baseline = state.bandit_bias.mean()
    idx = list(decision.experts)
    state.bandit_bias[idx] += cfg.bandit_step * (reward - baseline)
    np.clip(state.bandit_bias, -cfg.bias_cap, cfg.bias_cap, out=state.bandit_bias)
    return state


@dataclass
class Router:
    """Convenience wrapper bundling a config with its state."""

    cfg: RouterConfig
    state: RouterState

    @classmethod
    def create(cls, cfg: RouterConfig, E: int, d: int, seed: int = 0) -> "Router":
        if cfg.k > E:
            raise InvalidConfig(f"k={cfg.k} exceeds expert count {E}")
        if cfg.groups > E:
            raise InvalidConfig(f"groups={cfg.groups} exceeds expert count {E}")
        return cls(cfg, RouterState.init(E, d, seed))

    def route(self, query) -> RoutingDecision:
        return route(query, self.state, self.cfg)

    def record_miss(self, expert: int) -> None:
        record_miss(self.state, expert)

    def adapt(self, decision: RoutingDecision, reward: float) -> None:
        adapt(self.state, decision, reward, self.cfg)
