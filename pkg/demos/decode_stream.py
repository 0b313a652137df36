"""Decode one synthetic stream under shrinking page budgets.

Each run replays the same trace through the engine and through the
full-cache oracle, then prints hit rate, peak per-device bytes and the
accumulated fidelity loss. Smaller budgets evict more and lose more.
"""

import numpy as np

from moekv.core import ModelConfig
from moekv.compressor import CompressorConfig
from moekv.pipeline import Engine, EngineConfig, FullCacheOracle, fidelity_term
from moekv.router import RouterConfig
from moekv.scheduler import SchedulerConfig
from moekv.trace import TraceSpec, generate_trace

T = 400
trace = generate_trace(TraceSpec(T=T, d=16, vocab=128, skew=1.1, seed=3))
model = ModelConfig(d=16, head_width=4, E=8, k=2, L=T, G=4, S=T, K=4)

print(f"{'budget':>8} {'hit rate':>9} {'peak bytes':>11} {'fidelity':>10}")
for budget in (None, 16, 8, 4, 2, 1):
    cfg = EngineConfig(model=model, router=RouterConfig("TopK", k=2),
                       compressor=CompressorConfig("SVD", rank=8),
                       scheduler=SchedulerConfig("H2O", budget_pages=budget, page_size=8))
    engine, oracle = Engine(cfg), FullCacheOracle(cfg)
    served = requested = peak = 0
    loss = 0.0
    for ev in trace:
        _, rep = engine.decode_step(ev.embedding, ev.layer_weights)
        _, ref = oracle.decode_step(ev.embedding)
        loss += fidelity_term(ref, rep.trace)
        served += rep.served
        requested += rep.requested
        peak = max(peak, int(engine.store.device_bytes().max()))
    label = "inf" if budget is None else str(budget)
    print(f"{label:>8} {served / requested:9.3f} {peak:11d} {loss:10.4f}")

# the codec alone, before any eviction
probe = Engine(EngineConfig(model=model, compressor=CompressorConfig("SVD", rank=8)))
codec = probe.codec
keys, values = probe.encoder.kv_rows(np.random.default_rng(0).standard_normal((64, 16)))
rows = np.vstack([keys, values])
err = np.linalg.norm(rows - codec.decode_rows(codec.encode_rows(rows)), axis=1) / np.linalg.norm(rows, axis=1)
print(f"stored width {codec.width} of {model.d}; mean relative error on fresh K/V rows {err.mean():.3f}")
