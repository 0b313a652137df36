"""Expert-sharded KV storage built from fixed-capacity ring buffers.

Every (device, shard) pair owns one ring of ``S`` slots. The whole store is
kept columnar (one numpy array per field, shaped ``(n_buffers, S, ...)``) so
that retrieval and scoring over thousands of live entries stay vectorised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EntryMeta, InvalidArgument, InvalidConfig, InvalidEntry, KVEntry

EXPERT_BITS = 24  # expert ids are packed below token ids in sort keys


@dataclass(frozen=True, order=True)
class ShardId:
    device: int
    shard_index: int


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def raw_shard(t: int, e: int, n_tok: int, n_exp: int, additive: bool = False) -> int:
    """Raw shard value (t mod n_tok) XOR (e mod n_exp).

    ``additive=True`` reads the combining operator as addition modulo
    max(n_tok, n_exp) instead of XOR.
    """
    if not (_is_pow2(n_tok) and _is_pow2(n_exp)):
        raise InvalidConfig(f"n_tok={n_tok} and n_exp={n_exp} must be powers of two")
    if t < 0 or e < 0:
        raise InvalidArgument("token and expert indices must be non-negative")
    a, b = t % n_tok, e % n_exp
    if additive:
        return (a + b) % max(n_tok, n_exp)
    return a ^ b


def shards_per_device(n_tok: int, n_exp: int, G: int) -> int:
    return max(1, -(-max(n_tok, n_exp) // G))


def shard_assign(t: int, e: int, n_tok: int, n_exp: int, G: int = 1,
                 additive: bool = False) -> ShardId:
    raw = raw_shard(t, e, n_tok, n_exp, additive)
    return ShardId(device=raw % G, shard_index=raw // G)


@dataclass
class StoreStats:
    inserts: int = 0
    overwrites: int = 0
    retrievals: int = 0
    misses: int = 0
    removals: int = 0
    bytes_live: int = 0


class ShardBuffer:
    """Single ring buffer; a thin view over one row of the columnar store."""

    def __init__(self, store: "KVStore", row: int):
        self._store = store
        self.row = row

    @property
    def capacity(self) -> int:
        return self._store.S

    @property
    def head(self) -> int:
        return int(self._store.head[self.row])

    @property
    def live_count(self) -> int:
        return int(self._store.live_count[self.row])

    def entries(self) -> list[KVEntry]:
        st = self._store
        slots = np.nonzero(st.token[self.row] >= 0)[0]
        order = np.argsort(st.seq[self.row, slots], kind="stable")
        return [st.entry_at(self.row * st.S + int(s)) for s in slots[order]]


class KVStore:
    """Columnar expert-sharded store.

    Parameters
    ----------
    G : number of devices.
    n_tok, n_exp : power-of-two moduli of the shard hash.
    S : ring capacity per shard, in entries.
    width : stored vector width d'.
    elem_bytes : bytes per scalar used for memory accounting.
    n_layers : length of the per-layer attention score vector kept per entry.
    additive : use the additive reading of the shard hash.
    n_experts : optional expert count E; enables range checks on insert.
    """

    def __init__(self, G: int, n_tok: int, n_exp: int, S: int, width: int,
                 elem_bytes: int = 2, n_layers: int = 0, additive: bool = False,
                 n_experts: int | None = None):
        if G < 1 or S < 1 or width < 1:
            raise InvalidConfig("G, S and width must be >= 1")
        if not (_is_pow2(n_tok) and _is_pow2(n_exp)):
            raise InvalidConfig(f"n_tok={n_tok} and n_exp={n_exp} must be powers of two")
        self.G, self.n_tok, self.n_exp = G, n_tok, n_exp
        self.S, self.width, self.elem_bytes = S, width, elem_bytes
        self.additive = additive
        self.n_layers = n_layers
        self.n_experts = n_experts
        self.spd = shards_per_device(n_tok, n_exp, G)
        nb = G * self.spd
        self.n_buffers = nb
        self.token = np.full((nb, S), -1, dtype=np.int64)
        self.expert = np.full((nb, S), -1, dtype=np.int64)
        self.keys = np.zeros((nb, S, width))
        self.values = np.zeros((nb, S, width))
        self.freq = np.zeros((nb, S), dtype=np.int64)
        self.last_step = np.zeros((nb, S), dtype=np.int64)
        self.insert_step = np.zeros((nb, S), dtype=np.int64)
        self.attn = np.zeros((nb, S))
        self.layer_scores = np.zeros((nb, S, n_layers))
        self.seq = np.zeros((nb, S), dtype=np.int64)
        self.head = np.zeros(nb, dtype=np.int64)
        self.live_count = np.zeros(nb, dtype=np.int64)
        self.inserted = np.zeros(nb, dtype=np.int64)
        self.stats = StoreStats()
        self.clock = 0
        self._hw = 0  # slots [0, _hw) of any row may be occupied
        # expert -> [flat slots, token ids, count]: every insert ever made for
        # that expert; records whose slot now holds something else are stale
        self._index: dict[int, list] = {}

    # -- addressing -----------------------------------------------------
    def shard_of(self, t: int, e: int) -> ShardId:
        return shard_assign(t, e, self.n_tok, self.n_exp, self.G, self.additive)

    def row_of(self, shard: ShardId) -> int:
        if not (0 <= shard.device < self.G and 0 <= shard.shard_index < self.spd):
            raise InvalidArgument(f"shard {shard} outside the store")
        return shard.device * self.spd + shard.shard_index

    def shard_of_row(self, row: int) -> ShardId:
        return ShardId(row // self.spd, row % self.spd)

    def device_of_flat(self, flat) -> np.ndarray:
        return np.asarray(flat) // self.S // self.spd

    def buffer(self, shard: ShardId) -> ShardBuffer:
        return ShardBuffer(self, self.row_of(shard))

    # -- mutation -------------------------------------------------------
    def insert_row(self, row: int, token_id: int, expert_id: int, key, value,
                   now: int | None = None) -> KVEntry | None:
        """O(1) ring insert into ``row``; returns the overwritten entry if any."""
        key = np.asarray(key, dtype=np.float64)
        value = np.asarray(value, dtype=np.float64)
        if key.shape != (self.width,) or value.shape != (self.width,):
            raise InvalidEntry(f"entry width {key.shape} does not match store width {self.width}")
        if not 0 <= expert_id < (1 << EXPERT_BITS) or token_id < 0:
            raise InvalidEntry(f"ids out of range: token {token_id}, expert {expert_id}")
        if self.n_experts is not None and not 0 <= expert_id < self.n_experts:
            raise InvalidEntry(f"expert_id {expert_id} outside [0, {self.n_experts})")
        now = self.clock if now is None else now
        slot = int(self.head[row])
        flat = row * self.S + slot
        evicted = None
        if self.token[row, slot] >= 0:
            evicted = self.entry_at(flat, now)
            self.stats.overwrites += 1
        else:
            self.live_count[row] += 1
        self.token[row, slot] = token_id
        self.expert[row, slot] = expert_id
        self.keys[row, slot] = key
        self.values[row, slot] = value
        self.freq[row, slot] = 0
        self.last_step[row, slot] = now
        self.insert_step[row, slot] = now
        self.attn[row, slot] = 0.0
        self.layer_scores[row, slot] = 0.0
        self.seq[row, slot] = self.inserted[row]
        self.inserted[row] += 1
        self.head[row] = (slot + 1) % self.S
        self._hw = max(self._hw, slot + 1)
        self._index_add(expert_id, flat, token_id)
        self.stats.inserts += 1
        return evicted

    def _index_add(self, e: int, flat: int, token_id: int) -> None:
        rec = self._index.get(e)
        if rec is None:
            rec = self._index[e] = [np.zeros(16, dtype=np.int64), np.zeros(16, dtype=np.int64), 0]
        n = rec[2]
        if n == len(rec[0]):
            rec[0] = np.resize(rec[0], 2 * n)
            rec[1] = np.resize(rec[1], 2 * n)
        rec[0][n] = flat
        rec[1][n] = token_id
        rec[2] = n + 1

    def insert(self, shard: ShardId, entry: KVEntry, now: int | None = None) -> KVEntry | None:
        if entry.width != self.width:
            raise InvalidEntry(f"entry width {entry.width} != store width {self.width}")
        return self.insert_row(self.row_of(shard), entry.token_id, entry.expert_id,
                               entry.key, entry.value, now)

    def remove(self, flat) -> None:
        """Free the given flat slots (scheduler eviction)."""
        flat = np.atleast_1d(np.asarray(flat, dtype=np.int64))
        rows, slots = np.divmod(flat, self.S)
        live = self.token[rows, slots] >= 0
        rows, slots = rows[live], slots[live]
        self.token[rows, slots] = -1
        self.expert[rows, slots] = -1
        np.subtract.at(self.live_count, rows, 1)
        self.stats.removals += int(live.sum())

    # -- queries --------------------------------------------------------
    def live_flat(self) -> np.ndarray:
        """Flat indices of every live slot, in row-major order."""
        hw = self._hw
        r, s = np.nonzero(self.token[:, :hw] >= 0)
        return r * self.S + s

    def gather(self, experts, since: int) -> np.ndarray:
        """Flat indices of live entries of ``experts`` with token_id < since.

        Sorted by (token_id, expert_id); no metadata is touched. Cost is
        proportional to the number of inserts made for those experts, not to
        the size of the store.
        """
        tokens, experts_flat = self.token.reshape(-1), self.expert.reshape(-1)
        parts = []
        for e in set(int(x) for x in experts):
            rec = self._index.get(e)
            if rec is None:
                continue
            f, tk = rec[0][:rec[2]], rec[1][:rec[2]]
            ok = (tokens[f] == tk) & (experts_flat[f] == e)
            kept = int(ok.sum())
            if rec[2] > 64 and 2 * kept < rec[2]:  # mostly stale: compact
                rec[0][:kept], rec[1][:kept], rec[2] = f[ok], tk[ok], kept
            parts.append(f[ok & (tk < since)])
        if not parts:
            return np.zeros(0, dtype=np.int64)
        flat = np.unique(np.concatenate(parts)) if len(parts) > 1 else np.unique(parts[0])
        # (token, expert) pairs are unique, so one packed key sorts them
        uid = (tokens[flat] << EXPERT_BITS) | experts_flat[flat]
        return flat[np.argsort(uid, kind="stable")]

    def gather_scan(self, experts, since: int) -> np.ndarray:
        """Reference for ``gather``: a full scan of every occupied slot."""
        experts = np.asarray(sorted(set(int(x) for x in experts)), dtype=np.int64)
        hw = self._hw
        if hw == 0 or experts.size == 0:
            return np.zeros(0, dtype=np.int64)
        mask = np.isin(self.expert[:, :hw], experts) & (self.token[:, :hw] < since) \
            & (self.token[:, :hw] >= 0)
        i = np.flatnonzero(mask)
        flat = (i // hw) * self.S + i % hw
        uid = (self.token.reshape(-1)[flat] << EXPERT_BITS) | self.expert.reshape(-1)[flat]
        return flat[np.argsort(uid, kind="stable")]

    def touch(self, flat, now: int | None = None, attention=None, layer_weights=None) -> None:
        """Record an access: freq += 1, last access reset, attention mass added."""
        now = self.clock if now is None else now
        flat = np.asarray(flat, dtype=np.int64)
        self.freq.reshape(-1)[flat] += 1
        self.last_step.reshape(-1)[flat] = now
        if attention is not None:
            self.attn.reshape(-1)[flat] += attention
            if layer_weights is not None and self.n_layers:
                ls = self.layer_scores.reshape(-1, self.n_layers)
                ls[flat] += attention[:, None] * np.asarray(layer_weights, dtype=np.float64)

    def retrieve_with_misses(self, experts, since: int, now: int | None = None):
        experts = sorted(set(int(e) for e in experts))
        flat = self.gather(experts, since)
        self.touch(flat, now)
        self.stats.retrievals += 1
        found = set(self.expert.reshape(-1)[flat].tolist())
        missed = [e for e in experts if e not in found]
        self.stats.misses += len(missed)
        return [self.entry_at(int(f), now) for f in flat], missed

    def retrieve(self, experts, since: int, now: int | None = None) -> list[KVEntry]:
        return self.retrieve_with_misses(experts, since, now)[0]

    def entry_at(self, flat: int, now: int | None = None) -> KVEntry:
        now = self.clock if now is None else now
        row, slot = divmod(int(flat), self.S)
        meta = EntryMeta(
            attention_score=float(self.attn[row, slot]),
            last_access=int(now - self.last_step[row, slot]),
            freq=int(self.freq[row, slot]),
            age=int(now - self.insert_step[row, slot]),
            per_layer_scores=self.layer_scores[row, slot].tolist(),
        )
        return KVEntry(int(self.token[row, slot]), int(self.expert[row, slot]),
                       self.keys[row, slot].copy(), self.values[row, slot].copy(), meta)

    # -- accounting -----------------------------------------------------
    @property
    def entry_bytes(self) -> int:
        return 2 * self.width * self.elem_bytes

    def memory_bytes(self) -> int:
        b = int(self.live_count.sum()) * self.entry_bytes
        self.stats.bytes_live = b
        return b

    def device_bytes(self) -> np.ndarray:
        per_dev = self.live_count.reshape(self.G, self.spd).sum(axis=1)
        return per_dev * self.entry_bytes

    def capacity_bytes(self) -> int:
        return self.n_buffers * self.S * self.entry_bytes

    def snapshot(self, now: int | None = None) -> list[dict]:
        """One record per live entry, sorted by (device, shard, token, expert)."""
        now = self.clock if now is None else now
        flat = self.live_flat()
        rows, slots = np.divmod(flat, self.S)
        recs = []
        for row, slot in zip(rows.tolist(), slots.tolist()):
            sid = self.shard_of_row(row)
            recs.append({
                "device": sid.device,
                "shard": sid.shard_index,
                "token_id": int(self.token[row, slot]),
                "expert_id": int(self.expert[row, slot]),
                "age": int(now - self.insert_step[row, slot]),
                "freq": int(self.freq[row, slot]),
            })
        recs.sort(key=lambda r: (r["device"], r["shard"], r["token_id"], r["expert_id"]))
        return recs


def memory_bytes(store: KVStore) -> int:
    return store.memory_bytes()
