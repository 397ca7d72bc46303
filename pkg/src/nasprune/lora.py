"""Low-rank adapters on the embedding table and the Q/K/V column blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class LoraAdapterSet:
    rank: int = 32
    alpha: float = 16.0
    dropout: float = 0.05
    sites: tuple = ()
    params: dict = field(default_factory=dict)

    @property
    def scale(self):
        return self.alpha / self.rank

    def trainable_names(self):
        return [f"lora.{k}" for k in self.params]

    def to_dict(self):
        return {"rank": self.rank, "alpha": self.alpha, "dropout": self.dropout,
                "sites": list(self.sites)}


def default_sites(cfg):
    return ("emb",) + tuple(f"{l}.{m}" for l in range(cfg.n_layers_max) for m in "qkv")


def site_shapes(cfg, site, rank):
    """``(A, B)`` shapes.  A is rank x in, B is out x rank."""
    if site == "emb":
        return (rank, cfg.vocab_size), (cfg.d_model_max, rank)
    l, which = site.split(".")
    if int(l) >= cfg.n_layers_max or which not in "qkv":
        raise ContractError(f"no LoRA site {site!r} in this network")
    heads = cfg.n_heads_max if which == "q" else cfg.n_groups_max
    return (rank, cfg.d_model_max), (heads * cfg.d_head_max, rank)


def attach_lora(w, rank=32, alpha=16.0, dropout=0.05, sites=None, seed=0):
    """Return a copy of ``w`` carrying fresh adapters (B = 0, so the function is unchanged).

    A is drawn uniformly in +-1/sqrt(fan_in).  Base weights are shared, not copied.
    """
    from .model import SuperNetWeights

    if w.lora is not None:
        raise ContractError("LoRA adapters are already attached")
    sites = tuple(default_sites(w.cfg) if sites is None else sites)
    if len(set(sites)) != len(sites):
        raise ContractError(f"duplicate LoRA sites in {sites}")
    if not 0 <= dropout < 1:
        raise ContractError("LoRA dropout must be in [0, 1)")
    rng = np.random.default_rng(seed)
    dtype = w.params["emb"].dtype
    params = {}
    for site in sites:
        a_shape, b_shape = site_shapes(w.cfg, site, rank)
        bound = 1.0 / math.sqrt(a_shape[1])
        params[f"{site}.A"] = rng.uniform(-bound, bound, size=a_shape).astype(dtype)
        params[f"{site}.B"] = np.zeros(b_shape, dtype=dtype)
    adapters = LoraAdapterSet(rank, float(alpha), float(dropout), sites, params)
    return SuperNetWeights(w.cfg, w.params, w.block_scores, adapters)
