"""Factorized sub-network search space, validity checks, and size accounting."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

VARIANTS = ("joint", "fixed_head", "fixed_head_size")
FFN_RATIOS = (1.0, 2.0, 3.0, 3.5)


def round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SubNetworkConfig:
    """One point ``[d_model, n_heads, d_head, ffn_ratio, n_layers]`` of the space."""

    d_model: int
    n_heads: int
    d_head: int
    ffn_ratio: float
    n_layers: int

    @property
    def ffn_hidden(self):
        return round_half_up(self.ffn_ratio * self.d_model)

    def n_groups(self, cfg):
        return self.n_heads * cfg.n_groups_max // cfg.n_heads_max

    def as_list(self):
        return [self.d_model, self.n_heads, self.d_head, self.ffn_ratio, self.n_layers]

    @classmethod
    def from_list(cls, values):
        if isinstance(values, str):
            values = [v for v in values.replace("[", "").replace("]", "").split(",") if v.strip()]
        if len(values) != 5:
            raise InputError(f"theta needs 5 fields [d_model, H, d_head, r, L], got {values!r}")
        d, h, dh, r, n = values
        return cls(int(d), int(h), int(dh), float(r), int(n))

    def to_dict(self):
        return {"d_model": self.d_model, "n_heads": self.n_heads, "d_head": self.d_head,
                "ffn_ratio": self.ffn_ratio, "n_layers": self.n_layers}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["d_model"]), int(d["n_heads"]), int(d["d_head"]),
                   float(d["ffn_ratio"]), int(d["n_layers"]))

    def __str__(self):
        return "[{}, {}, {}, {:g}, {}]".format(*self.as_list())

    def dominated_by(self, other):
        """True if every field of ``self`` is <= the same field of ``other``."""
        return all(a <= b for a, b in zip(self.as_list(), other.as_list()))


def _powers_of_two(lo, hi):
    out, p = [], 1
    while p <= hi:
        if p >= lo:
            out.append(p)
        p *= 2
    return out


@dataclass(frozen=True)
class SearchSpace:
    cfg: object
    variant: str
    choices_d_model: tuple
    choices_H: tuple
    choices_d_head: tuple
    choices_r: tuple
    choices_L: tuple
    fields: tuple = field(default=("d_model", "n_heads", "d_head", "ffn_ratio", "n_layers"),
                          init=False, repr=False, compare=False)

    def __post_init__(self):
        cfg = self.cfg
        for name in ("choices_d_model", "choices_H", "choices_d_head", "choices_r", "choices_L"):
            vals = tuple(sorted(set(getattr(self, name))))
            if not vals:
                raise ConfigError(f"{name} is empty")
            object.__setattr__(self, name, vals)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown search-space variant {self.variant!r}; expected one of {VARIANTS}")
        limits = [("choices_d_model", cfg.d_model_max), ("choices_H", cfg.n_heads_max),
                  ("choices_d_head", cfg.d_head_max), ("choices_r", cfg.ffn_ratio_max),
                  ("choices_L", cfg.n_layers_max)]
        for name, hi in limits:
            vals = getattr(self, name)
            if min(vals) <= 0 or max(vals) > hi:
                raise ConfigError(f"{name}={vals} must lie in (0, {hi}]")
        if self.variant == "fixed_head" and len(self.choices_H) != 1:
            raise ConfigError("fixed_head space needs exactly one head-count choice")
        if self.variant == "fixed_head_size" and len(self.choices_d_head) != 1:
            raise ConfigError("fixed_head_size space needs exactly one head-size choice")
        bad = [h for h in self.choices_H if (h * cfg.n_groups_max) % cfg.n_heads_max]
        if bad:
            raise ConfigError(f"head choices {bad} leave a fractional number of KV groups "
                              f"(H_max={cfg.n_heads_max}, G_max={cfg.n_groups_max})")

    @classmethod
    def from_config(cls, cfg, variant="joint"):
        """Default choice sets, scaled to ``cfg``.

        d_model: powers of two from 32 to d_model_max (``{d/2, d}`` when d < 64);
        heads: ``{H/4, H/2, H}``; head size: ``{dh/16, ..., dh}``; FFN ratio:
        ``{1, 2, 3, 3.5}`` capped at r_max; depth ``1..L``.  Choices that would
        leave a fractional number of KV groups are dropped.
        """
        d = _powers_of_two(32, cfg.d_model_max)
        if len(d) < 2:
            d = sorted({max(1, cfg.d_model_max // 2), cfg.d_model_max})
        heads = [cfg.n_heads_max // q for q in (4, 2, 1) if cfg.n_heads_max % q == 0]
        heads = [h for h in heads if h >= 1 and (h * cfg.n_groups_max) % cfg.n_heads_max == 0]
        dh = [cfg.d_head_max // q for q in (16, 8, 4, 2, 1) if cfg.d_head_max % q == 0]
        ratios = [r for r in FFN_RATIOS if r <= cfg.ffn_ratio_max]
        if cfg.ffn_ratio_max not in ratios:
            ratios.append(cfg.ffn_ratio_max)
        if variant == "fixed_head":
            heads = [cfg.n_heads_max]
        elif variant == "fixed_head_size":
            dh = [cfg.d_head_max]
        return cls(cfg, variant, tuple(d), tuple(heads), tuple(dh), tuple(ratios),
                   tuple(range(1, cfg.n_layers_max + 1)))

    def choices(self):
        return (self.choices_d_model, self.choices_H, self.choices_d_head,
                self.choices_r, self.choices_L)

    @property
    def theta_min(self):
        return SubNetworkConfig(*(c[0] for c in self.choices()))

    @property
    def theta_max(self):
        return SubNetworkConfig(*(c[-1] for c in self.choices()))

    def size(self):
        return int(np.prod([len(c) for c in self.choices()]))

    def enumerate(self):
        for vals in itertools.product(*self.choices()):
            yield SubNetworkConfig(*vals)

    def to_dict(self):
        return {"variant": self.variant,
                "choices_d_model": list(self.choices_d_model),
                "choices_H": list(self.choices_H),
                "choices_d_head": list(self.choices_d_head),
                "choices_r": list(self.choices_r),
                "choices_L": list(self.choices_L)}

    @classmethod
    def from_dict(cls, cfg, d):
        return cls(cfg, d["variant"], tuple(int(x) for x in d["choices_d_model"]),
                   tuple(int(x) for x in d["choices_H"]),
                   tuple(int(x) for x in d["choices_d_head"]),
                   tuple(float(x) for x in d["choices_r"]),
                   tuple(int(x) for x in d["choices_L"]))


def sample_uniform(space, rng):
    """Draw every field independently and uniformly from its choice set."""
    vals = [c[int(rng.integers(len(c)))] for c in space.choices()]
    return SubNetworkConfig(*vals)


def sample_indices(space, rng, n):
    """Vectorised form of :func:`sample_uniform`: ``n`` draws as field arrays."""
    return [np.asarray(c)[rng.integers(len(c), size=n)] for c in space.choices()]


def validate(space, theta):
    """Return a list of human-readable violations (empty when ``theta`` is valid)."""
    problems = []
    for name, value, choices in zip(space.fields, theta.as_list(), space.choices()):
        if value not in choices:
            problems.append(f"{name}={value} not in {list(choices)}")
    cfg = space.cfg
    if (theta.n_heads * cfg.n_groups_max) % cfg.n_heads_max:
        problems.append(f"n_heads={theta.n_heads} gives a fractional KV-group count "
                        f"({theta.n_heads}*{cfg.n_groups_max}/{cfg.n_heads_max})")
    return problems


def count_params(cfg, theta):
    """Exact scalar count of the materialized sub-network (LoRA excluded).

    embedding V*d + positions S*d + per block
    [2d (norms) + d*(H+2G)*dh (qkv) + H*dh*d (proj) + 3*d*U (gated FFN)]
    + d (final norm) + d*V (head), with U = round(r*d), G = H*G_max/H_max.
    """
    d, h, dh, n = theta.d_model, theta.n_heads, theta.d_head, theta.n_layers
    g = theta.n_groups(cfg)
    u = theta.ffn_hidden
    block = 2 * d + d * (h + 2 * g) * dh + h * dh * d + 3 * d * u
    return int(cfg.vocab_size * d + cfg.max_seq_len * d + n * block + d + d * cfg.vocab_size)


def count_params_array(cfg, d, h, dh, r, n):
    """:func:`count_params` over arrays of field values (int64)."""
    d, h, dh, n = (np.asarray(a, dtype=np.int64) for a in (d, h, dh, n))
    u = np.floor(np.asarray(r, dtype=np.float64) * d + 0.5).astype(np.int64)
    g = h * cfg.n_groups_max // cfg.n_heads_max
    block = 2 * d + d * (h + 2 * g) * dh + h * dh * d + 3 * d * u
    return cfg.vocab_size * d + cfg.max_seq_len * d + n * block + d + d * cfg.vocab_size


def estimate_flops(cfg, theta, seq_len):
    """Forward FLOPs (2 x multiply-adds) at batch 1 for ``seq_len`` tokens.

    Per block: T*d*(H+2G)*dh for the QKV projections, 2*H*T*T*dh for the score
    and value products (the full T x T score matrix is computed, then masked),
    T*H*dh*d for the output projection and 3*T*d*U for the gated FFN.  The LM
    head adds T*d*V.  Norms, softmax and elementwise ops are not counted.
    """
    if seq_len < 1:
        raise InputError("seq_len must be >= 1")
    t = int(seq_len)
    d, h, dh, n = theta.d_model, theta.n_heads, theta.d_head, theta.n_layers
    g = theta.n_groups(cfg)
    u = theta.ffn_hidden
    block = t * d * (h + 2 * g) * dh + 2 * h * t * t * dh + t * h * dh * d + 3 * t * d * u
    return 2 * (n * block + t * d * cfg.vocab_size)
