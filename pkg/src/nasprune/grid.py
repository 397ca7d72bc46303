"""Calibrated candidate grid: parameter-count bins filled by rejection sampling.

Uniform sampling over the search space piles up at small parameter counts.
The grid splits ``[params(theta_min), params(theta_max)]`` into K equal bins,
draws uniform architectures per bin until M land inside it (or the per-bin
trial budget runs out) and keeps the retained sample with the largest L1
weight magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, GridError
from .model import merged_params, select_blocks, slice_block, slice_outer
from .search import SubNetworkConfig, count_params, count_params_array, sample_indices, validate


def subnet_magnitude(w, theta, params=None):
    """L1 norm of every scalar in the theta-sliced weight set (LoRA merged)."""
    cfg = w.cfg
    p = merged_params(w) if params is None else params
    total = sum(float(np.abs(v).sum(dtype=np.float64)) for v in slice_outer(p, cfg, theta).values())
    for l in select_blocks(w, theta.n_layers):
        s = slice_block(p, cfg, theta, l)
        total += sum(float(np.abs(v).sum(dtype=np.float64)) for v in s.values())
    return total


@dataclass
class GridBin:
    lo: float
    hi: float
    theta: SubNetworkConfig | None = None
    params: int | None = None
    magnitude: float | None = None
    trials: int = 0
    retained: int = 0
    samples: list | None = field(default=None, repr=False)   # (theta, params, magnitude), test mode

    @property
    def occupied(self):
        return self.theta is not None

    def contains(self, n, last=False):
        return self.lo <= n < self.hi or (last and n == self.hi)

    def to_dict(self):
        return {"lo": self.lo, "hi": self.hi,
                "theta": None if self.theta is None else self.theta.to_dict(),
                "params": self.params, "magnitude": self.magnitude,
                "trials": self.trials, "retained": self.retained}

    @classmethod
    def from_dict(cls, d):
        theta = None if d["theta"] is None else SubNetworkConfig.from_dict(d["theta"])
        return cls(float(d["lo"]), float(d["hi"]), theta, d["params"], d["magnitude"],
                   int(d["trials"]), int(d["retained"]))


@dataclass
class CandidateGrid:
    params_min: int
    params_max: int
    bins: list
    seed: int | None = None
    samples_per_bin: int = 5
    max_trials: int = 10000

    @property
    def edges(self):
        return np.array([b.lo for b in self.bins] + [self.bins[-1].hi])

    def occupied(self):
        return [b for b in self.bins if b.occupied]

    def thetas(self):
        return [b.theta for b in self.occupied()]

    def duplicates(self):
        """Architectures selected by more than one bin (cannot happen with disjoint bins)."""
        seen, dup = set(), []
        for t in self.thetas():
            if t in seen:
                dup.append(t)
            seen.add(t)
        return dup

    def to_dict(self):
        return {"params_min": self.params_min, "params_max": self.params_max, "seed": self.seed,
                "samples_per_bin": self.samples_per_bin, "max_trials": self.max_trials,
                "bins": [b.to_dict() for b in self.bins]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["params_min"]), int(d["params_max"]), [GridBin.from_dict(b) for b in d["bins"]],
                   d.get("seed"), int(d.get("samples_per_bin", 5)), int(d.get("max_trials", 10000)))

    def rows(self):
        """One row per bin for tabular export."""
        out = []
        for i, b in enumerate(self.bins):
            t = b.theta
            out.append({"bin": i, "lo": b.lo, "hi": b.hi,
                        "d_model": t.d_model if t else "", "n_heads": t.n_heads if t else "",
                        "d_head": t.d_head if t else "", "ffn_ratio": t.ffn_ratio if t else "",
                        "n_layers": t.n_layers if t else "",
                        "params": b.params if t else "", "magnitude": b.magnitude if t else "",
                        "trials": b.trials})
        return out


def _fill_bin(space, cfg, lo, hi, last, M, max_trials, rng, chunk=512):
    """Uniform draws until M land in [lo, hi) (closed for the last bin)."""
    kept, trials = [], 0
    while len(kept) < M and trials < max_trials:
        n = min(chunk, max_trials - trials)
        fields = sample_indices(space, rng, n)
        counts = count_params_array(cfg, *fields)
        inside = (counts >= lo) & ((counts <= hi) if last else (counts < hi))
        hits = np.flatnonzero(inside)
        need = M - len(kept)
        if len(hits) >= need:
            hits = hits[:need]
            trials += int(hits[-1]) + 1
        else:
            trials += n
        for i in hits:
            kept.append(SubNetworkConfig(int(fields[0][i]), int(fields[1][i]), int(fields[2][i]),
                                         float(fields[3][i]), int(fields[4][i])))
    return kept, trials


def build_grid(space, cfg, w, K=22, M=5, max_trials=10000, seed=0, keep_samples=False):
    """Build the calibrated grid.  Each bin uses its own spawned RNG stream,
    so the result does not depend on the order bins are processed in."""
    if K < 2 or M < 1 or max_trials < 1:
        raise ContractError(f"need K >= 2, M >= 1, max_trials >= 1 (got {K}, {M}, {max_trials})")
    p_min, p_max = count_params(cfg, space.theta_min), count_params(cfg, space.theta_max)
    edges = np.linspace(p_min, p_max, K + 1)
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(K)]
    params = merged_params(w)
    mags = {}
    bins = []
    for i in range(K):
        last = i == K - 1
        b = GridBin(float(edges[i]), float(edges[i + 1]))
        kept, b.trials = _fill_bin(space, cfg, b.lo, b.hi, last, M, max_trials, streams[i])
        b.retained = len(kept)
        scored = []
        for t in kept:
            if t not in mags:
                mags[t] = subnet_magnitude(w, t, params)
            scored.append((t, count_params(cfg, t), mags[t]))
        if scored:
            # first maximal sample wins ties
            best = max(range(len(scored)), key=lambda j: (scored[j][2], -j))
            b.theta, b.params, b.magnitude = scored[best]
        if keep_samples:
            b.samples = scored
        bins.append(b)
    grid = CandidateGrid(p_min, p_max, bins, seed, M, max_trials)
    if not grid.occupied():
        raise GridError("no grid bin could be filled; increase max_trials or widen the search space")
    for t in grid.thetas():
        problems = validate(space, t)
        if problems:
            raise GridError(f"grid produced an invalid architecture {t}: {problems}")
    return grid


def draw(grid, rng, k):
    """``k`` grid architectures, without replacement when ``k`` allows it."""
    thetas = grid.thetas()
    if not thetas:
        raise GridError("grid has no occupied bins")
    if k < 0:
        raise ContractError("k must be non-negative")
    replace = k > len(thetas)
    idx = rng.choice(len(thetas), size=k, replace=replace)
    return [thetas[int(i)] for i in idx]
