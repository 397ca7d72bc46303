from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nasprune.data import make_windows, split
from nasprune.errors import InputError
from nasprune.evaluate import ParetoPoint, dominates, mean_nll, measure_latency, pareto_front, perplexity
from nasprune.model import SuperNetWeights, extract_subnet, init_supernet, logits_np
from nasprune.search import SubNetworkConfig

from reference import dominance_front, nll_oracle


def test_uniform_logits_give_vocab_perplexity(tiny_cfg, tokens):
    w = init_supernet(tiny_cfg, 0)
    w.params["lm_head"][:] = 0
    assert perplexity(w, tiny_cfg.theta_max, tokens) == pytest.approx(tiny_cfg.vocab_size, rel=1e-6)


def test_nll_matches_per_position_oracle(tiny_w, tiny_cfg):
    windows = np.random.default_rng(0).integers(0, tiny_cfg.vocab_size, size=(5, tiny_cfg.max_seq_len + 1))
    theta = SubNetworkConfig(8, 2, 2, 2.0, 2)
    want = nll_oracle(logits_np(tiny_w, theta, windows[:, :-1]), windows[:, 1:])
    assert mean_nll(tiny_w, theta, windows, batch_size=2) == pytest.approx(want, rel=1e-5)


def test_empty_evalset_rejected(tiny_w, tiny_cfg):
    with pytest.raises(InputError):
        perplexity(tiny_w, tiny_cfg.theta_max, np.zeros((0, 9), dtype=np.int64))


def test_windows_cover_every_target_once():
    toks = np.arange(20)
    win = make_windows(toks, 6)
    assert win.shape == (3, 7)
    assert np.concatenate([w[1:] for w in win]).tolist() == list(range(1, 19))
    with pytest.raises(InputError):
        make_windows(np.arange(4), 6)
    tr, va = split(np.arange(100))
    assert len(va) == 10 and tr[-1] + 1 == va[0]


def _points(rng, n, grid=None):
    q = rng.integers(0, grid, n) if grid else rng.random(n)
    c = rng.integers(0, grid, n) if grid else rng.random(n)
    return [ParetoPoint(i, float(a), float(b)) for i, (a, b) in enumerate(zip(q, c))]


def test_pareto_matches_bruteforce_on_random_instances():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(1, 400))
        pts = _points(rng, n, grid=int(rng.integers(3, 30)) if trial % 2 else None)
        got = pareto_front(pts)
        assert {p.theta for p in got} == {p.theta for p in dominance_front(pts)}
        assert [p.cost for p in got] == sorted(p.cost for p in got)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=40))
def test_pareto_property(pairs):
    pts = [ParetoPoint(i, float(q), float(c)) for i, (q, c) in enumerate(pairs)]
    front = pareto_front(pts)
    assert {p.theta for p in front} == {p.theta for p in dominance_front(pts)}
    for p in front:
        assert not any(dominates(q, p) for q in pts)
    qs = [p.quality for p in front]
    assert all(a >= b for a, b in zip(qs, qs[1:]))


def test_pareto_small_cases():
    a = ParetoPoint("a", 1.0, 1.0)
    assert pareto_front([a]) == [a]
    d1, d2 = ParetoPoint("d1", 2.0, 2.0), ParetoPoint("d2", 2.0, 2.0)
    assert pareto_front([a, d1, d2]) == [a]
    t1, t2 = ParetoPoint("t1", 1.0, 1.0), ParetoPoint("t2", 1.0, 1.0)
    assert {p.theta for p in pareto_front([t1, t2])} == {"t1", "t2"}
    with pytest.raises(InputError):
        ParetoPoint("x", math.nan, 1.0)


def test_latency_contract(toy_cfg):
    w = init_supernet(toy_cfg, 0)
    with pytest.raises(InputError):
        measure_latency(w, 16, reps=2)
    res = measure_latency(extract_subnet(w, SubNetworkConfig(32, 2, 8, 1.0, 1)), 8, reps=3, warmup=1)
    assert set(res) == {"median_ms", "p10_ms", "p90_ms"} and res["p10_ms"] <= res["median_ms"] <= res["p90_ms"]


def test_latency_is_stable_and_monotone_in_depth(toy_cfg):
    w = init_supernet(toy_cfg, 0)
    shallow = extract_subnet(w, SubNetworkConfig(64, 4, 16, 3.5, 2))
    deep = extract_subnet(w, SubNetworkConfig(64, 4, 16, 3.5, 4))
    a = measure_latency(deep, 64, reps=25, warmup=3)["median_ms"]
    b = measure_latency(deep, 64, reps=25, warmup=3)["median_ms"]
    assert abs(a - b) / min(a, b) < 0.25
    assert measure_latency(shallow, 64, reps=25, warmup=3)["median_ms"] < min(a, b)
