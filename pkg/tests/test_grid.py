from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from nasprune.errors import GridError
from nasprune.grid import CandidateGrid, build_grid, draw, subnet_magnitude
from nasprune.model import SuperNetWeights, init_supernet
from nasprune.search import SearchSpace, SubNetworkConfig, count_params, sample_uniform, validate


def test_magnitude_trivial_cases(tiny_w, tiny_cfg):
    zero = SuperNetWeights(tiny_cfg, {k: np.zeros_like(v) for k, v in tiny_w.params.items()})
    assert subnet_magnitude(zero, SubNetworkConfig(8, 2, 1, 1.0, 1)) == 0.0
    total = sum(np.abs(v.astype(np.float64)).sum() for v in tiny_w.params.values())
    assert subnet_magnitude(tiny_w, tiny_cfg.theta_max) == pytest.approx(total, rel=1e-12)


def test_magnitude_is_monotone_under_nesting(tiny_w, tiny_space):
    rng = np.random.default_rng(0)
    w = tiny_w.copy()
    w.block_scores = np.array([0.3, 0.9, 0.1])
    checked = 0
    while checked < 100:
        a, b = sample_uniform(tiny_space, rng), sample_uniform(tiny_space, rng)
        if not a.dominated_by(b):
            continue
        assert subnet_magnitude(w, a) <= subnet_magnitude(w, b) + 1e-9
        checked += 1


def _grid(space, cfg, w, **kw):
    kw = {"K": 22, "M": 5, "max_trials": 10000, "seed": 0, "keep_samples": True, **kw}
    return build_grid(space, cfg, w, **kw)


def test_grid_invariants_with_rescan(toy_cfg):
    w = init_supernet(toy_cfg, 0)
    space = SearchSpace.from_config(toy_cfg)
    grid = _grid(space, toy_cfg, w)
    edges = grid.edges
    assert edges[0] == count_params(toy_cfg, space.theta_min) and edges[-1] == count_params(toy_cfg, space.theta_max)
    np.testing.assert_allclose(np.diff(edges), np.diff(edges)[0])
    assert np.all(np.diff(edges) > 0)
    for i, b in enumerate(grid.bins):
        last = i == len(grid.bins) - 1
        for t, p, m in b.samples:
            assert p == count_params(toy_cfg, t) and b.contains(p, last)
            assert m == pytest.approx(subnet_magnitude(w, t), rel=1e-12)
        if b.occupied:
            assert b.contains(b.params, last) and validate(space, b.theta) == []
            assert b.magnitude == max(m for _, _, m in b.samples)
            assert b.retained == min(5, len(b.samples)) and b.trials <= 10000
        else:
            assert b.trials == 10000 and not b.samples
    assert grid.duplicates() == []


def test_grid_is_deterministic_and_serializable(toy_cfg):
    w = init_supernet(toy_cfg, 0)
    space = SearchSpace.from_config(toy_cfg)
    a = _grid(space, toy_cfg, w, keep_samples=False)
    b = _grid(space, toy_cfg, w, keep_samples=False)
    assert a.to_dict() == b.to_dict()
    assert CandidateGrid.from_dict(a.to_dict()).to_dict() == a.to_dict()
    assert len(a.rows()) == 22
    assert _grid(space, toy_cfg, w, seed=1, keep_samples=False).to_dict() != a.to_dict()


def test_single_theta_space(toy_cfg):
    w = init_supernet(toy_cfg, 0)
    space = SearchSpace(toy_cfg, "joint", (32,), (2,), (4,), (1.0,), (2,))
    grid = build_grid(space, toy_cfg, w, K=4, M=2, max_trials=50, seed=0)
    assert grid.thetas() == [space.theta_min]


def test_all_empty_grid_raises(toy_cfg):
    w = init_supernet(toy_cfg, 0)
    space = SearchSpace(toy_cfg, "joint", (32,), (2,), (4,), (1.0,), (1, 4))
    # two architectures land in the first and last bin; with one trial per bin both can miss
    raised = 0
    for seed in range(40):
        try:
            build_grid(space, toy_cfg, w, K=3, M=1, max_trials=1, seed=seed)
        except GridError:
            raised += 1
    assert raised > 0


def test_draw_semantics(toy_cfg):
    w = init_supernet(toy_cfg, 0)
    grid = _grid(SearchSpace.from_config(toy_cfg), toy_cfg, w, keep_samples=False)
    rng = np.random.default_rng(0)
    thetas = grid.thetas()
    assert sorted(map(str, draw(grid, rng, len(thetas)))) == sorted(map(str, thetas))
    assert len(draw(grid, rng, 3 * len(thetas))) == 3 * len(thetas)
    index = {t: i for i, t in enumerate(thetas)}
    counts = np.bincount([index[draw(grid, rng, 1)[0]] for _ in range(100_000)], minlength=len(thetas))
    assert stats.chisquare(counts).pvalue > 0.01


def test_draw_single_bin_and_empty(toy_cfg):
    w = init_supernet(toy_cfg, 0)
    space = SearchSpace(toy_cfg, "joint", (32,), (2,), (4,), (1.0,), (2,))
    grid = build_grid(space, toy_cfg, w, K=2, M=1, max_trials=5, seed=0)
    assert draw(grid, np.random.default_rng(0), 1) == [space.theta_min]
    grid.bins = [type(b)(b.lo, b.hi) for b in grid.bins]
    with pytest.raises(GridError):
        draw(grid, np.random.default_rng(0), 1)
