"""Calibrated candidate grid versus uniform sampling.

Uniform sampling of architecture fields concentrates on small models because
parameter count grows multiplicatively.  The grid splits the parameter range
into equal bins and keeps, per bin, the sampled architecture with the largest
L1 weight magnitude.
"""

from __future__ import annotations

import numpy as np

from nasprune.grid import build_grid
from nasprune.model import SuperNetConfig, init_supernet
from nasprune.search import SearchSpace, count_params, sample_uniform

cfg = SuperNetConfig()
w = init_supernet(cfg, seed=0)
space = SearchSpace.from_config(cfg, "joint")
lo, hi = count_params(cfg, space.theta_min), count_params(cfg, space.theta_max)

rng = np.random.default_rng(0)
counts = np.array([count_params(cfg, sample_uniform(space, rng)) for _ in range(1000)])
hist, _ = np.histogram(counts, bins=np.linspace(lo, hi, 11))
print(f"parameter range [{lo}, {hi}]; uniform draws per tenth of the range:")
for i, h in enumerate(hist):
    print(f"  {i / 10:.1f}-{(i + 1) / 10:.1f}  {'#' * (h // 10)} {h}")

grid = build_grid(space, cfg, w, K=22, M=5, max_trials=10000, seed=0)
print(f"\ngrid: {len(grid.occupied())} of {len(grid.bins)} bins occupied")
for i, b in enumerate(grid.bins):
    desc = f"{b.theta} params={b.params} |w|_1={b.magnitude:.1f}" if b.occupied else "(empty)"
    print(f"  bin {i:2d} [{b.lo:9.0f}, {b.hi:9.0f})  trials={b.trials:5d}  {desc}")
