"""Utility scoring and page-granular eviction under a per-device page budget.

Convention: a HIGHER utility means the entry is worth keeping. Strategies whose
textbook score runs the other way (streaming sinks, recency) are flipped here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import InvalidConfig, NotFitted, cosine_similarity, make_rng

STRATEGIES = ("H2O", "SL", "QUEST", "Flex", "LRU", "LRUPlus", "AdaKV", "Duo")
DEFAULT_FLEX_PLAN = ((32, 1.0), (128, 0.5), (math.inf, 0.0))


@dataclass(frozen=True)
class SchedulerConfig:
    strategy: str = "H2O"
    budget_pages: int | None = 4  # None disables budget eviction
    page_size: int = 16
    tau: int = 64  # SL: entries older than tau lose their retain bit
    sink: int = 4  # SL: first tokens that always get a bonus
    sink_bonus: float = 1.0
    lambda_freq: float = 0.5
    adakv_step: float = 0.1
    target_hit: float = 0.9
    theta0: float = 0.0
    hit_decay: float = 0.9
    gamma_sim: float = 0.5
    feature_weights: tuple[float, ...] = (1.0, 0.1, 1.0)
    flex_plan: tuple[tuple[float, float], ...] = DEFAULT_FLEX_PLAN
    quest_warmup: int = 64

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidConfig(f"unknown scheduler strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.budget_pages is not None and self.budget_pages < 1:
            raise InvalidConfig("budget_pages must be >= 1 (or None for unbounded)")
        if self.page_size < 1:
            raise InvalidConfig("page_size must be >= 1")
        for name in ("lambda_freq", "adakv_step", "gamma_sim", "sink_bonus"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")
        if not 0.0 <= self.target_hit <= 1.0:
            raise InvalidConfig("target_hit must lie in [0, 1]")


@dataclass
class SchedulerState:
    theta: float = 0.0
    running_hit: float = 0.0
    step: int = 0
    quest: "QuestScorer | None" = None
    theta_history: list = field(default_factory=list)


@dataclass
class Features:
    """Column arrays describing a batch of entries at one instant."""

    attention: np.ndarray
    recency: np.ndarray  # steps since last access
    freq: np.ndarray
    age: np.ndarray  # steps since insertion
    token_id: np.ndarray
    per_layer: np.ndarray | None = None
    kv: np.ndarray | None = None  # [key; value] rows, for QUEST

    @classmethod
    def from_entry(cls, entry) -> "Features":
        m = entry.meta
        return cls(
            attention=np.array([m.attention_score]),
            recency=np.array([m.last_access]),
            freq=np.array([m.freq]),
            age=np.array([m.age]),
            token_id=np.array([entry.token_id]),
            per_layer=np.array([m.per_layer_scores], dtype=np.float64),
            kv=np.concatenate([entry.key, entry.value])[None],
        )


class QuestScorer:
    """Two-layer tanh perceptron (width 16) regressing future access counts from [K; V]."""

    def __init__(self, hidden: int = 16, seed: int = 0):
        self.hidden = hidden
        self.seed = seed
        self.params = None

    def fit(self, X, y, steps: int = 500, lr: float = 0.01) -> "QuestScorer":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        n, d = X.shape
        self.mu = X.mean(axis=0)
        self.sd = X.std(axis=0) + 1e-9
        Xn = (X - self.mu) / self.sd
        rng = make_rng(self.seed)
        W1 = rng.standard_normal((d, self.hidden)) / math.sqrt(d)
        b1 = np.zeros(self.hidden)
        W2 = rng.standard_normal(self.hidden) / math.sqrt(self.hidden)
        b2 = np.array(y.mean())
        params = [W1, b1, W2, b2]
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
        for it in range(1, steps + 1):
            H = np.tanh(Xn @ W1 + b1)
            err = H @ W2 + b2 - y
            gW2 = H.T @ err * (2 / n)
            gb2 = np.array(err.mean() * 2)
            dH = np.outer(err, W2) * (1 - H ** 2) * (2 / n)
            grads = [Xn.T @ dH, dH.sum(axis=0), gW2, gb2]
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= 0.9
                mi += 0.1 * g
                vi *= 0.999
                vi += 0.001 * g * g
                p -= lr * (mi / (1 - 0.9 ** it)) / (np.sqrt(vi / (1 - 0.999 ** it)) + 1e-8)
        self.params = params
        return self

    def predict(self, X) -> np.ndarray:
        if self.params is None:
            raise NotFitted("QUEST scorer has not been fitted")
        W1, b1, W2, b2 = self.params
        H = np.tanh(((np.asarray(X, dtype=np.float64) - self.mu) / self.sd) @ W1 + b1)
        return H @ W2 + b2


def flex_plan_score(age: np.ndarray, plan) -> np.ndarray:
    """Static retention plan: score of the first bucket whose bound exceeds the age."""
    age = np.asarray(age, dtype=np.float64)
    out = np.full(age.shape, float(plan[-1][1]))
    for bound, value in reversed(plan):
        out = np.where(age < bound, float(value), out)
    return out


def utilities(f: Features, state: SchedulerState, cfg: SchedulerConfig) -> np.ndarray:
    s = cfg.strategy
    if s == "H2O":
        return f.attention.astype(np.float64)
    if s == "SL":
        keep = (f.age <= cfg.tau).astype(np.float64)
        return keep + cfg.sink_bonus * (f.token_id < cfg.sink)
    if s == "QUEST":
        if state.quest is None:
            raise NotFitted("QUEST scorer has not been fitted")
        return state.quest.predict(f.kv)
    if s == "Flex":
        return flex_plan_score(f.age, cfg.flex_plan)
    if s == "LRU":
        return -f.recency.astype(np.float64)
    if s == "LRUPlus":
        return -f.recency + cfg.lambda_freq * f.freq
    if s == "AdaKV":
        phi = np.stack([f.attention, f.freq, 1.0 / (1.0 + f.age)], axis=-1).astype(np.float64)
        w = np.asarray(cfg.feature_weights, dtype=np.float64)
        return phi[..., : len(w)] @ w
    if s == "Duo":
        if f.per_layer is None or f.per_layer.shape[-1] == 0:
            return f.attention.astype(np.float64)
        return f.per_layer.sum(axis=-1)
    raise InvalidConfig(f"unknown strategy {s!r}")


def score(entry, query, state: SchedulerState, cfg: SchedulerConfig) -> float:
    """Utility u_i of one entry (``query`` is unused by the table strategies)."""
    return float(utilities(Features.from_entry(entry), state, cfg)[0])


def reuse_score(entry, query, cfg: SchedulerConfig) -> float:
    """Reuse plus query similarity: f / (1 + age) + gamma * cos(key, query)."""
    reuse = entry.meta.freq / (1.0 + entry.meta.age)
    return reuse + cfg.gamma_sim * cosine_similarity(entry.key, query)


def expert_utility(routed, attention, expert: int, tokens=None) -> dict[int, float] | None:
    """Mean attention weight each token receives from the queries routed to ``expert``.

    ``routed[i]`` is the expert set of query i and ``attention[i]`` maps token id
    to its attention weight in that query. Returns None when no query reached
    the expert. Tokens listed in ``tokens`` but never attended score 0.
    """
    hits = [att for exps, att in zip(routed, attention) if expert in exps]
    if not hits:
        return None
    keys = set(tokens or ())
    for att in hits:
        keys.update(att)
    return {tok: sum(att.get(tok, 0.0) for att in hits) / len(hits) for tok in sorted(keys)}


def adakv_update(state: SchedulerState, cfg: SchedulerConfig) -> SchedulerState:
    gap = cfg.target_hit - state.running_hit
    theta = state.theta + cfg.adakv_step * gap
    if theta == state.theta and gap != 0 and cfg.adakv_step > 0:
        # the step rounded away (tiny gap or huge theta); still move one ulp
        theta = math.nextafter(state.theta, math.copysign(math.inf, gap))
    state.theta = theta
    state.theta_history.append(state.theta)
    return state


def observe_hit(state: SchedulerState, hit_rate: float, cfg: SchedulerConfig) -> SchedulerState:
    """Fold one step's hit rate into the running estimate."""
    if state.step == 0:
        state.running_hit = hit_rate
    else:
        state.running_hit = cfg.hit_decay * state.running_hit + (1 - cfg.hit_decay) * hit_rate
    state.step += 1
    return state


# ---------------------------------------------------------------------------
# page selection


@dataclass
class PageTable:
    """Live entries grouped into pages, with one aggregate score per page."""

    page_of_entry: np.ndarray  # page index for each entry
    score: np.ndarray  # aggregate utility per page
    oldest: np.ndarray  # first insertion step per page (tie-break)
    device: np.ndarray
    key: np.ndarray  # global page key, used as final tie-break


def build_pages(page_key, device, insert_step, utility) -> PageTable:
    page_key = np.asarray(page_key, dtype=np.int64)
    uniq, inv = np.unique(page_key, return_inverse=True)
    score = np.bincount(inv, weights=utility, minlength=len(uniq))
    oldest = np.full(len(uniq), np.iinfo(np.int64).max)
    np.minimum.at(oldest, inv, np.asarray(insert_step, dtype=np.int64))
    dev = np.zeros(len(uniq), dtype=np.int64)
    dev[inv] = device
    return PageTable(inv, score, oldest, dev, uniq)


def select_evictions(score, budget: int | None, device=None, oldest=None, theta: float | None = None):
    """Pages to evict and why.

    Pages whose score is below ``theta`` go first (reason "threshold"); then
    each device drops its lowest-scored pages until at most ``budget`` remain
    (reason "budget"). Ties fall to the oldest page, then the lower index.
    Returns a list of (page index, reason) in eviction order.
    """
    score = np.asarray(score, dtype=np.float64)
    n = len(score)
    device = np.zeros(n, dtype=np.int64) if device is None else np.asarray(device)
    oldest = np.arange(n) if oldest is None else np.asarray(oldest)
    order = np.lexsort((np.arange(n), oldest, score))
    out = []
    dropped = np.zeros(n, dtype=bool)
    if theta is not None:
        for p in order:
            if score[p] < theta:
                out.append((int(p), "threshold"))
                dropped[p] = True
    if budget is not None:
        for dev in np.unique(device):
            mine = [p for p in order if device[p] == dev and not dropped[p]]
            excess = len(mine) - budget
            for p in mine[:max(0, excess)]:
                out.append((int(p), "budget"))
    return out
