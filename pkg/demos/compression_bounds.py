"""Fit every compression scheme on the same calibration rows and compare the
measured squared error with each scheme's analytic bound."""

import numpy as np

from moekv import compressor as cmp

rng = np.random.default_rng(0)
d = 16
scale = np.linspace(0.3, 3.0, d)
calib = rng.standard_normal((512, d)) * scale
X = rng.standard_normal((1000, d)) * scale

settings = {
    "Identity": {}, "SVD": dict(rank=6), "LoRA": dict(rank=6), "LoRAPlus": dict(rank=6),
    "Pyramid": dict(levels=3), "FastV": dict(rank=6), "Prune": dict(prune_frac=0.4),
    "Chunk": dict(rank=3, chunk_size=16), "Distill": dict(rank=6),
}
print(f"{'scheme':>9} {'width':>5} {'error':>10} {'bound':>10}")
for scheme, kw in settings.items():
    # aggregate bounds hold on the rows the codec was fitted to
    data = X if scheme in ("SVD", "LoRA", "Chunk", "Distill") else calib
    codec = cmp.fit(scheme, data, cmp.CompressorConfig(scheme, **kw))
    err = cmp.squared_errors(codec, X).sum()
    rows = codec.bound_rows(X)
    bound = rows.sum() if rows is not None else codec.bound_total(X)
    note = "  (rank-r optimum; a learned map cannot beat it)" if scheme == "Distill" else ""
    print(f"{scheme:>9} {codec.width:5d} {err:10.2f} {bound:10.2f}{note}")
