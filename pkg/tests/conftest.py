from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from nasprune.model import SuperNetConfig, init_supernet
from nasprune.search import SearchSpace

ROOT = Path(__file__).resolve().parents[1]
CORPUS = ROOT / "data" / "kjv_excerpt.txt"


def perturb(w, seed=1, scale=0.5):
    """Break the init symmetry (unit norms, tiny weights) so tests see real signal."""
    rng = np.random.default_rng(seed)
    out = w.copy()
    for k, v in out.params.items():
        if k.endswith("norm"):
            out.params[k] = (v + rng.normal(0, 0.3, v.shape)).astype(v.dtype)
        else:
            out.params[k] = (v + rng.normal(0, scale / np.sqrt(v.shape[0]), v.shape)).astype(v.dtype)
    return out


@pytest.fixture
def tiny_cfg():
    return SuperNetConfig(vocab_size=32, d_model_max=16, n_layers_max=3, n_heads_max=4, n_groups_max=2,
                          d_head_max=4, ffn_ratio_max=3.5, max_seq_len=8)


@pytest.fixture
def tiny_w(tiny_cfg):
    return perturb(init_supernet(tiny_cfg, seed=0))


@pytest.fixture
def tiny_space(tiny_cfg):
    return SearchSpace.from_config(tiny_cfg)


@pytest.fixture
def toy_cfg():
    return SuperNetConfig()


@pytest.fixture
def tokens(tiny_cfg):
    return np.random.default_rng(3).integers(0, tiny_cfg.vocab_size, size=(3, tiny_cfg.max_seq_len + 1))
