"""The decode loop: route, encode, compress, insert, schedule, attend.

``Engine`` runs one autoregressive stream over the sharded store.
``FullCacheOracle`` replays the same stream with a plain list of every
uncompressed entry and no eviction; comparing the two isolates what
compression and eviction cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import compressor as cmp
from .core import InvalidComparison, InvalidConfig, ModelConfig, make_rng, softmax
from .kvstore import EXPERT_BITS, KVStore
from .router import Router, RouterConfig, RoutingDecision
from .scheduler import (
    Features,
    QuestScorer,
    SchedulerConfig,
    SchedulerState,
    adakv_update,
    build_pages,
    observe_hit,
    select_evictions,
    utilities,
)
from .topology import Topology, simulate_fetch


class QueryEncoder:
    """Fixed seeded linear maps x -> (q, K, V), each d wide."""

    def __init__(self, d: int, seed: int = 0):
        rng = make_rng(seed, worker=0x5EED)
        self.W = rng.standard_normal((3, d, d)) / math.sqrt(d)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.W[0] @ x, self.W[1] @ x, self.W[2] @ x

    def kv_rows(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X @ self.W[1].T, X @ self.W[2].T


@dataclass
class AttentionOutput:
    y: np.ndarray
    alpha: np.ndarray
    count: int


def attention(q, keys, values, scale: float | None = None) -> AttentionOutput:
    """Softmax(q.K / sqrt(width)) weighted sum of values; empty input gives zeros."""
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = len(keys)
    if n == 0:
        width = values.shape[1] if values.ndim == 2 else q.shape[0]
        return AttentionOutput(np.zeros(width), np.zeros(0), 0)
    if scale is None:
        scale = 1.0 / math.sqrt(keys.shape[1])
    alpha = softmax((keys @ q) * scale)
    return AttentionOutput(alpha @ values, alpha, n)


def attend_entries(q, entries) -> AttentionOutput:
    if not entries:
        return AttentionOutput(np.zeros(len(q)), np.zeros(0), 0)
    return attention(q, np.stack([e.key for e in entries]), np.stack([e.value for e in entries]))


@dataclass
class AttentionTrace:
    """What one step attended to: entry ids, weights and full-width values."""

    tokens: np.ndarray
    experts: np.ndarray
    alpha: np.ndarray
    values: np.ndarray

    @property
    def ids(self) -> list:
        return list(zip(self.tokens.tolist(), self.experts.tolist()))

    @property
    def uids(self) -> np.ndarray:
        """One int64 per entry: token in the high bits, expert in the low 24."""
        return (self.tokens.astype(np.int64) << EXPERT_BITS) | self.experts.astype(np.int64)


@dataclass
class EvictionRecord:
    step: int
    token_id: int
    expert_id: int
    strategy: str
    score: float | None
    reason: str

    def as_dict(self):
        return {"step": self.step, "token_id": self.token_id, "expert_id": self.expert_id,
                "strategy": self.strategy, "score": self.score, "reason": self.reason}


@dataclass
class StepReport:
    step: int
    decision: RoutingDecision
    inserts: list = field(default_factory=list)
    evictions: list = field(default_factory=list)
    misses: list = field(default_factory=list)
    served: int = 0
    requested: int = 0
    fetch_bytes: int = 0
    local_fetches: int = 0
    remote_fetches: int = 0
    latency: float = 0.0
    io_elements: int = 0
    fidelity: float | None = None
    trace: AttentionTrace | None = None

    @property
    def hit_rate(self) -> float | None:
        return self.served / self.requested if self.requested else None

    def as_record(self) -> dict:
        return {
            "step": self.step,
            "experts": list(self.decision.experts),
            "gates": [float(g) for g in self.decision.gates],
            "inserts": [list(i) for i in self.inserts],
            "evictions": [e.as_dict() for e in self.evictions],
            "misses": list(self.misses),
            "served": self.served,
            "requested": self.requested,
            "hit": bool(self.requested and self.served == self.requested),
            "fetch_bytes": self.fetch_bytes,
            "local_fetches": self.local_fetches,
            "remote_fetches": self.remote_fetches,
            "latency": self.latency,
            "io_elements": self.io_elements,
            "fidelity": self.fidelity,
        }


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


@dataclass(frozen=True)
class EngineConfig:
    """Everything one decode stream needs.

    ``attend`` is "compressed" (query projected into payload space) or
    "full" (payloads decoded before attention). ``home`` picks the device
    that runs each step's attention: "round_robin" (t mod G) or "fixed" (0).
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    compressor: cmp.CompressorConfig = field(default_factory=lambda: cmp.CompressorConfig("Identity"))
    scheduler: SchedulerConfig | None = None
    n_tok: int = 0  # 0 -> next power of two >= E
    n_exp: int = 0
    additive: bool = False
    n_layers: int = 4
    attend: str = "compressed"
    home: str = "round_robin"
    capacity: int = 0  # ring slots per shard; 0 -> model.S
    seed: int = 0

    def __post_init__(self):
        if self.router.k != self.model.k:
            raise InvalidConfig(f"router.k={self.router.k} differs from model.k={self.model.k}")
        if self.attend not in ("compressed", "full"):
            raise InvalidConfig("attend must be 'compressed' or 'full'")
        if self.home not in ("round_robin", "fixed"):
            raise InvalidConfig("home must be 'round_robin' or 'fixed'")
        if self.capacity < 0:
            raise InvalidConfig("capacity must be >= 0")

    @property
    def ring_capacity(self) -> int:
        return self.capacity or self.model.S

    @property
    def moduli(self) -> tuple[int, int]:
        e = _next_pow2(self.model.E)
        return (self.n_tok or e, self.n_exp or e)


def calibration_rows(cfg: EngineConfig, encoder: QueryEncoder) -> np.ndarray:
    """Pooled key and value rows from seeded Gaussian embeddings."""
    rng = make_rng(cfg.seed, worker=0xCA11B)
    X = rng.standard_normal((cfg.compressor.calib_size, cfg.model.d))
    K, V = encoder.kv_rows(X)
    return np.vstack([K, V])


def build_codec(cfg: EngineConfig, encoder: QueryEncoder) -> cmp.Codec:
    c = cfg.compressor
    if c.scheme == "Identity":
        return cmp.IdentityCodec(cfg.model.d)
    if c.scheme == "Composed":
        return cmp.fit_composed(c.stages, calibration_rows(cfg, encoder), [c] * len(c.stages), seed=cfg.seed)
    return cmp.fit(c.scheme, calibration_rows(cfg, encoder), c, seed=cfg.seed)


class Engine:
    """One decode stream over an expert-sharded, compressed, scheduled cache."""

    def __init__(self, cfg: EngineConfig, topology: Topology | None = None, codec: cmp.Codec | None = None):
        self.cfg = cfg
        m = cfg.model
        self.encoder = QueryEncoder(m.d, cfg.seed)
        self.codec = codec if codec is not None else build_codec(cfg, self.encoder)
        if self.codec.d != m.d:
            raise InvalidConfig(f"codec width {self.codec.d} != model width {m.d}")
        self.chunked = isinstance(self.codec, cmp.ChunkCodec)
        self.identity = type(self.codec) is cmp.IdentityCodec
        self.full_attend = cfg.attend == "full" or self.chunked
        n_tok, n_exp = cfg.moduli
        self.store = KVStore(m.G, n_tok, n_exp, cfg.ring_capacity, self.codec.width, m.elem_bytes,
                             n_layers=self._tracked_layers(), additive=cfg.additive, n_experts=m.E)
        self.block_of = np.full((self.store.n_buffers, cfg.ring_capacity), -1, dtype=np.int64)
        self.bases: dict[int, np.ndarray] = {}
        self.pending: list = []
        self.router = Router.create(cfg.router, m.E, m.d, seed=cfg.seed)
        self.sched_cfg = cfg.scheduler
        self.sched_state = SchedulerState(theta=cfg.scheduler.theta0 if cfg.scheduler else 0.0)
        self.topology = topology or Topology.uniform(m.G)
        self.inserted_by_expert = np.zeros(m.E, dtype=np.int64)
        self.t = 0

    # -- helpers --------------------------------------------------------
    def _tracked_layers(self) -> int:
        # per-layer attention mass only feeds the Duo scheduler
        sc = self.cfg.scheduler
        return self.cfg.n_layers if sc is not None and sc.strategy == "Duo" else 0

    def home_device(self, t: int) -> int:
        return t % self.cfg.model.G if self.cfg.home == "round_robin" else 0

    def _scheduler_active(self) -> bool:
        sc = self.sched_cfg
        if sc is None:
            return False
        if sc.strategy == "QUEST" and self.sched_state.quest is None:
            if self.t + 1 < sc.quest_warmup:
                return False
            self._fit_quest()
        return True

    def _features(self, flat) -> Features:
        st = self.store
        rows, slots = np.divmod(flat, st.S)
        kv = None
        if self.sched_cfg.strategy == "QUEST":
            kv = np.hstack([st.keys[rows, slots], st.values[rows, slots]])
        return Features(
            attention=st.attn[rows, slots],
            recency=self.t - st.last_step[rows, slots],
            freq=st.freq[rows, slots],
            age=self.t - st.insert_step[rows, slots],
            token_id=st.token[rows, slots],
            per_layer=st.layer_scores[rows, slots],
            kv=kv,
        )

    def _fit_quest(self):
        flat = self.store.live_flat()
        st = self.store
        rows, slots = np.divmod(flat, st.S)
        X = np.hstack([st.keys[rows, slots], st.values[rows, slots]])
        y = st.freq[rows, slots].astype(np.float64)
        self.sched_state.quest = QuestScorer(seed=self.cfg.seed).fit(X, y)

    def _decode_stored(self, flat, which: str) -> np.ndarray:
        st = self.store
        rows, slots = np.divmod(flat, st.S)
        Z = (st.keys if which == "key" else st.values)[rows, slots]
        if not self.chunked:
            return self.codec.decode_rows(Z)
        out = np.zeros((len(flat), self.codec.d))
        blocks = self.block_of[rows, slots]
        for b in np.unique(blocks):
            sel = blocks == b
            out[sel] = self.codec.decode_block(self.bases[int(b)], Z[sel])
        return out

    def _insert(self, items, report, basis_id=-1):
        """Insert (t, e, row, khat, vhat) tuples; callers validate widths first."""
        st = self.store
        for (t, e, row, kh, vh) in items:
            slot = int(st.head[row])
            old = st.insert_row(row, t, e, kh, vh, now=self.t)
            self.block_of[row, slot] = basis_id
            sid = st.shard_of_row(row)
            report.inserts.append((t, e, sid.device, sid.shard_index))
            if old is not None:
                report.evictions.append(EvictionRecord(self.t, old.token_id, old.expert_id,
                                                       "ring", None, "overwrite"))

    def _flush_chunk(self, report):
        if not self.pending:
            return
        X = np.vstack([np.vstack([p[3] for p in self.pending]), np.vstack([p[4] for p in self.pending])])
        basis, Z = self.codec.encode_block(X)
        n = len(self.pending)
        bid = len(self.bases)
        self.bases[bid] = basis
        items = [(t, e, row, Z[i], Z[n + i]) for i, (t, e, row, _, _) in enumerate(self.pending)]
        self.pending = []
        self._insert(items, report, basis_id=bid)

    def _schedule(self, report):
        sc = self.sched_cfg
        st = self.store
        flat = st.live_flat()
        if len(flat) == 0:
            return
        u = utilities(self._features(flat), self.sched_state, sc)
        rows, slots = np.divmod(flat, st.S)
        page_key = rows * (1 << 32) + st.seq[rows, slots] // sc.page_size
        pages = build_pages(page_key, rows // st.spd, st.insert_step[rows, slots], u)
        theta = self.sched_state.theta if sc.strategy == "AdaKV" else None
        chosen = select_evictions(pages.score, sc.budget_pages, pages.device, pages.oldest, theta)
        if not chosen:
            return
        reason_of = dict(chosen)
        victims = np.isin(pages.page_of_entry, list(reason_of))
        vflat = flat[victims]
        vpage = pages.page_of_entry[victims]
        order = np.lexsort((st.expert.reshape(-1)[vflat], st.token.reshape(-1)[vflat]))
        for i in order:
            f = vflat[i]
            report.evictions.append(EvictionRecord(
                self.t, int(st.token.reshape(-1)[f]), int(st.expert.reshape(-1)[f]), sc.strategy,
                float(u[victims][i]), reason_of[int(vpage[i])]))
        st.remove(vflat)

    # -- the loop -------------------------------------------------------
    def decode_step(self, x, layer_weights=None) -> tuple[np.ndarray, StepReport]:
        cfg, m, st = self.cfg, self.cfg.model, self.store
        t = self.t
        st.clock = t
        q, K, V = self.encoder(x)
        decision = self.router.route(q)
        report = StepReport(step=t, decision=decision)

        # compress and validate every insert before touching the store
        items = []
        if self.chunked:
            staged = [(t, e, st.row_of(st.shard_of(t, e)), K, V) for e in decision.experts]
        else:
            Z = self.codec.encode_rows(np.vstack([K, V]))
            for e in decision.experts:
                row = st.row_of(st.shard_of(t, e))
                items.append((t, e, row, Z[0], Z[1]))
            for it in items:
                if it[3].shape != (st.width,) or it[4].shape != (st.width,):
                    raise InvalidConfig("codec produced a payload of the wrong width")
        requested = int(self.inserted_by_expert[list(decision.experts)].sum())
        if self.chunked:
            self.pending.extend(staged)
            if len(self.pending) >= self.codec.chunk_size:
                self._flush_chunk(report)
        else:
            self._insert(items, report)
        self.inserted_by_expert[list(decision.experts)] += 1

        if self._scheduler_active():
            self._schedule(report)

        flat = st.gather(decision.experts, since=t)
        gathered_exp = st.expert.reshape(-1)[flat]
        present = np.bincount(gathered_exp, minlength=m.E)
        report.misses = [e for e in decision.experts if present[e] == 0]
        for e in report.misses:
            self.router.record_miss(e)
        st.stats.retrievals += 1
        st.stats.misses += len(report.misses)

        if self.full_attend:
            keys = self._decode_stored(flat, "key")
            vals_full = self._decode_stored(flat, "value")
            out = attention(q, keys, vals_full)
        else:
            qh = self.codec.project_query(q)
            vals = st.values.reshape(-1, st.width)[flat]
            out = attention(qh, st.keys.reshape(-1, st.width)[flat], vals)
            if self.identity:
                vals_full = vals
            else:
                vals_full = self._decode_stored(flat, "value") if len(flat) else np.zeros((0, m.d))
        y = out.y
        st.touch(flat, now=t, attention=out.alpha, layer_weights=layer_weights)
        report.trace = AttentionTrace(st.token.reshape(-1)[flat], gathered_exp, out.alpha, vals_full)

        report.served = len(flat)
        report.requested = requested
        self._account_fetch(flat, report)
        if report.requested:
            rate = report.served / report.requested
            if self.sched_cfg is not None:
                observe_hit(self.sched_state, rate, self.sched_cfg)
            if cfg.router.strategy == "Adaptive":
                self.router.adapt(decision, rate)
            if self.sched_cfg is not None and self.sched_cfg.strategy == "AdaKV":
                adakv_update(self.sched_state, self.sched_cfg)
        self.t += 1
        return y, report

    def _account_fetch(self, flat, report):
        st, m = self.store, self.cfg.model
        report.io_elements = len(flat) * (2 * m.head_width + m.d)
        if len(flat) == 0:
            return
        home = self.home_device(report.step)
        devices = st.device_of_flat(flat)
        counts = np.bincount(devices, minlength=m.G)
        report.fetch_bytes = int(len(flat) * st.entry_bytes)
        report.local_fetches = int(counts[home])
        report.remote_fetches = int(len(flat) - counts[home])
        report.latency = float(sum(simulate_fetch(self.topology, int(dev), home, int(c) * st.entry_bytes)
                                   for dev, c in enumerate(counts) if c))

    def finish(self) -> StepReport | None:
        """Flush a partial chunk at stream end (Chunk codec only)."""
        if not (self.chunked and self.pending):
            return None
        report = StepReport(step=self.t, decision=RoutingDecision((), np.zeros(0), np.zeros(0), self.t))
        self._flush_chunk(report)
        return report

    def full_width(self, y) -> np.ndarray:
        """Lift a payload-space output back to width d."""
        if self.full_attend:
            return y
        return self.codec.decode_rows(np.asarray(y)[None])[0]


class _Log:
    """Append-only arrays of every (token, expert, K, V) ever produced, in step order,
    plus the log positions of each expert's entries."""

    def __init__(self, d: int, E: int):
        self.n = 0
        self.tok = np.zeros(64, dtype=np.int64)
        self.exp = np.zeros(64, dtype=np.int64)
        self.K = np.zeros((64, d))
        self.V = np.zeros((64, d))
        self.pos = [np.zeros(16, dtype=np.int64) for _ in range(E)]
        self.count = np.zeros(E, dtype=np.int64)

    def append(self, t, e, K, V):
        if self.n == len(self.tok):
            cap = 2 * self.n
            self.tok = np.resize(self.tok, cap)
            self.exp = np.resize(self.exp, cap)
            self.K = np.vstack([self.K, np.zeros_like(self.K)])
            self.V = np.vstack([self.V, np.zeros_like(self.V)])
        i = self.n
        self.tok[i], self.exp[i], self.K[i], self.V[i] = t, e, K, V
        self.n += 1
        c = self.count[e]
        if c == len(self.pos[e]):
            self.pos[e] = np.resize(self.pos[e], 2 * c)
        self.pos[e][c] = i
        self.count[e] += 1

    def positions(self, experts) -> np.ndarray:
        """Log positions of the given experts' entries, in log order."""
        parts = [self.pos[e][:self.count[e]] for e in experts]
        if len(parts) == 1:
            return parts[0].copy()
        return np.sort(np.concatenate(parts))


class FullCacheOracle:
    """Reference stream: every uncompressed entry kept, same router and encoder.

    Entries live in one log appended in (step, expert) order, so log order
    already sorts them by (token, expert). With ``all_experts`` the query
    attends over every expert's entries instead of the routed ones, which
    measures what routing itself gives up.
    """

    def __init__(self, cfg: EngineConfig, all_experts: bool = False):
        self.cfg = cfg
        self.all_experts = all_experts
        m = cfg.model
        self.encoder = QueryEncoder(m.d, cfg.seed)
        self.router = Router.create(cfg.router, m.E, m.d, seed=cfg.seed)
        self.log = _Log(m.d, m.E)
        self.t = 0

    def decode_step(self, x) -> tuple[np.ndarray, AttentionTrace]:
        t = self.t
        q, K, V = self.encoder(x)
        decision = self.router.route(q)
        experts = sorted(decision.experts)
        lg = self.log
        for e in experts:
            if lg.count[e] == 0:
                self.router.record_miss(e)
        idx = lg.positions(range(self.cfg.model.E) if self.all_experts else experts)
        keys, values = lg.K[idx], lg.V[idx]
        # the current token is appended after the prefix is read
        for e in experts:
            lg.append(t, e, K, V)
        out = attention(q, keys, values)
        if len(idx) and self.cfg.router.strategy == "Adaptive":
            self.router.adapt(decision, 1.0)
        self.t += 1
        return out.y, AttentionTrace(lg.tok[idx], lg.exp[idx], out.alpha, values)


@dataclass
class FidelityLedger:
    per_step: list = field(default_factory=list)
    cumulative: list = field(default_factory=list)
    hits: int = 0
    requested: int = 0

    @property
    def total(self) -> float:
        return self.cumulative[-1] if self.cumulative else 0.0

    def add(self, term: float, served: int = 0, requested: int = 0) -> float:
        self.per_step.append(term)
        self.cumulative.append(self.total + term)
        self.hits += served
        self.requested += requested
        return term


def fidelity_term(oracle: AttentionTrace, engine: AttentionTrace | None) -> float:
    """Sum over the oracle's entries of ||alpha (V - V_hat)||^2; missing entries count as zero."""
    if len(oracle.tokens) == 0:
        return 0.0
    approx = np.zeros_like(oracle.values)
    if engine is not None and len(engine.tokens):
        eu = engine.uids
        order = np.argsort(eu, kind="stable")
        ou = oracle.uids
        pos = np.searchsorted(eu[order], ou)
        pos = np.minimum(pos, len(eu) - 1)
        hit = eu[order][pos] == ou
        approx[hit] = engine.values[order[pos[hit]]]
    diff = oracle.alpha[:, None] * (oracle.values - approx)
    return float((diff ** 2).sum())


def fidelity(oracle_stream, engine_stream) -> FidelityLedger:
    """Per-step fidelity loss of an engine stream against the oracle stream."""
    oracle_stream = list(oracle_stream)
    engine_stream = list(engine_stream)
    if len(oracle_stream) != len(engine_stream):
        raise InvalidComparison(f"stream lengths differ: {len(oracle_stream)} vs {len(engine_stream)}")
    ledger = FidelityLedger()
    for o, e in zip(oracle_stream, engine_stream):
        ledger.add(fidelity_term(o, e))
    return ledger
