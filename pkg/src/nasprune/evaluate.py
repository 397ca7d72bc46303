"""Perplexity, CPU latency and Pareto-front extraction."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import InputError
from .model import extract_subnet, forward


def mean_nll(w, theta, windows, batch_size=32, skip_blocks=()):
    """Mean next-token cross-entropy (nats) over every target position."""
    windows = np.asarray(windows)
    if windows.ndim != 2 or len(windows) == 0:
        raise InputError("evaluation set is empty")
    total, count = 0.0, 0
    for i in range(0, len(windows), batch_size):
        chunk = windows[i:i + batch_size]
        logits = forward(w, theta, chunk[:, :-1], skip_blocks=skip_blocks)
        loss = nx.cross_entropy(logits, chunk[:, 1:])
        n = chunk[:, 1:].size
        total += float(loss.data) * n
        count += n
    return total / count


def perplexity(w, theta, windows, batch_size=32, skip_blocks=()):
    return math.exp(mean_nll(w, theta, windows, batch_size, skip_blocks))


def measure_latency(subnet, seq_len, reps=10, warmup=2, seed=0):
    """Wall-clock of one batch-1 prefill forward of a materialized network.

    Runs pinned to a single BLAS thread.  Returns median / p10 / p90 in ms.
    """
    if reps < 3:
        raise InputError("measure_latency needs reps >= 3")
    theta = subnet.cfg.theta_max
    tokens = np.random.default_rng(seed).integers(0, subnet.cfg.vocab_size, size=(1, seq_len))
    times = []
    with nx.deterministic():
        for _ in range(warmup):
            forward(subnet, theta, tokens)
        for _ in range(reps):
            t0 = time.perf_counter()
            forward(subnet, theta, tokens)
            times.append((time.perf_counter() - t0) * 1e3)
    times = np.asarray(times)
    return {"median_ms": float(np.median(times)), "p10_ms": float(np.percentile(times, 10)),
            "p90_ms": float(np.percentile(times, 90))}


def subnet_latency(w, theta, seq_len, reps=10, warmup=2):
    return measure_latency(extract_subnet(w, theta), seq_len, reps, warmup)


@dataclass(frozen=True)
class ParetoPoint:
    theta: object
    quality: float
    cost: float
    source: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.quality) and math.isfinite(self.cost)):
            raise InputError(f"non-finite Pareto point {self}")


def dominates(p, q):
    """``p`` is no worse on both objectives and strictly better on one (minimisation)."""
    return (p.quality <= q.quality and p.cost <= q.cost
            and (p.quality < q.quality or p.cost < q.cost))


def pareto_front(points):
    """Non-dominated subset of ``points``, sorted by cost (then quality).

    One sweep over cost groups: a point survives iff it has the minimum quality
    within its cost group and that quality beats every strictly cheaper point.
    Exact duplicates of a surviving point are all kept.
    """
    pts = sorted(points, key=lambda p: (p.cost, p.quality))
    front = []
    best = math.inf
    i = 0
    while i < len(pts):
        j = i
        while j < len(pts) and pts[j].cost == pts[i].cost:
            j += 1
        group_best = pts[i].quality
        if group_best < best:
            front.extend(p for p in pts[i:j] if p.quality == group_best)
            best = group_best
        i = j
    return front
