"""Walk the analytic cost model: memory against shard size, the optimal
shard size, modeled speedup against compression, and the dense/sparse I/O
ratio for a few expert counts."""

from moekv import costmodel
from moekv.core import ModelConfig

d, rho, L, G, K = 64, 2.0, 1024, 4, 2

print("per-device memory (elements) vs shard size S")
for S in (2, 4, 8, 11, 12, 16, 32, 64):
    tok, page, total = costmodel.memory_terms(d, rho, L, G, S, K)
    print(f"  S={S:3d}  token-side {tok:8.1f}  page-side {page:8.1f}  total {total:8.1f}")

shard = costmodel.optimal_shard_size(L, K, G, d, rho)
print(f"S* = {shard.s_star:.3f}; integer choice {shard.best} "
      f"(floor costs {shard.mem_floor:.1f}, ceil costs {shard.mem_ceil:.1f}); "
      f"continuous optimum {costmodel.mem_optimum(d, rho, L, G, K):.1f}")

print("\nmodeled decode speedup relative to no compression")
cfg = ModelConfig(d=d, E=8, k=2)
hw = costmodel.HardwareProfile()
for r in (1, 2, 4, 8):
    print(f"  rho={r}: {costmodel.speedup(cfg, hw, 1.0, r):.2f}x")

print("\nsparse vs dense attention I/O")
for E, k in ((8, 2), (16, 2), (64, 4), (128, 8)):
    roof = costmodel.io_and_roofline(ModelConfig(d=d, head_width=16, E=E, k=k, L=L), B=1, hw=hw)
    print(f"  E={E:3d} k={k}: dense/sparse = {roof.io_dense / roof.io_sparse:.0f}, "
          f"hit rate ~ {roof.hit_rate:.4f}, {roof.bound}-bound")
