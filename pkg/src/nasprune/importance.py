"""Activation-based importance of channels, neurons, KV groups and blocks.

Scores are aggregated first over sequence positions (``agg_S``), then over
calibration samples (``agg_B``); each is one of mean / l2norm / variance.
Mean and l2norm aggregate absolute activations, variance the raw values.

Sorting permutes equivalent components in descending score order so the
full network computes exactly the same function while first-k slicing keeps
the highest-scoring components.  Blocks are never moved; their scores only
decide which blocks a shallower sub-network retains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError
from .evaluate import perplexity
from .model import SuperNetWeights, forward

AGGS = ("mean", "l2norm", "variance")
_ALIASES = {"mean": "mean", "norm": "l2norm", "l2norm": "l2norm", "l2": "l2norm",
            "var": "variance", "variance": "variance"}
_SHORT = {"mean": "mean", "l2norm": "norm", "variance": "var"}


@dataclass(frozen=True)
class AggregationScheme:
    over_batch: str = "mean"
    over_sequence: str = "mean"

    def __post_init__(self):
        for v in (self.over_batch, self.over_sequence):
            if v not in AGGS:
                raise ContractError(f"unknown aggregation {v!r}; expected one of {AGGS}")

    @classmethod
    def parse(cls, name):
        """``"norm-mean"`` -> l2norm over batch, mean over sequence."""
        parts = str(name).lower().split("-")
        if len(parts) != 2 or any(p not in _ALIASES for p in parts):
            raise ContractError(f"bad aggregation scheme {name!r}; use e.g. mean-mean, norm-mean")
        return cls(_ALIASES[parts[0]], _ALIASES[parts[1]])

    @property
    def name(self):
        return f"{_SHORT[self.over_batch]}-{_SHORT[self.over_sequence]}"

    @classmethod
    def all(cls):
        return [cls(b, s) for b in AGGS for s in AGGS]


class _Accumulator:
    """Running per-sample sums for every ``agg_S`` choice of one component."""

    def __init__(self, width):
        self.s1 = np.zeros((len(AGGS), width))
        self.s2 = np.zeros((len(AGGS), width))
        self.n = 0

    def add(self, act):
        act = np.asarray(act, dtype=np.float64)                # B x T x C
        mag = np.abs(act)
        per_sample = np.stack([mag.mean(axis=1),
                               np.sqrt((act * act).sum(axis=1)),
                               act.var(axis=1)])               # 3 x B x C
        self.s1 += per_sample.sum(axis=1)
        self.s2 += (per_sample * per_sample).sum(axis=1)
        self.n += act.shape[0]

    def reduce(self, scheme):
        i = AGGS.index(scheme.over_sequence)
        s1, s2, n = self.s1[i], self.s2[i], self.n
        if scheme.over_batch == "mean":
            return s1 / n
        if scheme.over_batch == "l2norm":
            return np.sqrt(s2)
        return np.maximum(s2 / n - (s1 / n) ** 2, 0.0)

    def to_dict(self):
        return {"s1": self.s1.tolist(), "s2": self.s2.tolist(), "n": self.n}


@dataclass
class ActivationStats:
    n_samples: int
    components: frozenset
    emb_sites: list = field(default_factory=list)   # one accumulator per RMSNorm site
    ffn: list = field(default_factory=list)
    gqa: list = field(default_factory=list)
    block_cos: np.ndarray | None = None            # per block, sum over samples of mean_T cos


COMPONENTS = frozenset({"emb", "ffn", "gqa", "block"})


def collect_stats(w, calib_batches, components=COMPONENTS):
    """Run traced full-network forwards and accumulate activation summaries.

    ``calib_batches`` is an iterable of B x T token matrices (or B x (T+1)
    windows; the trailing target column is ignored when it would exceed the
    context).  Accumulation is in float64 and associative over batches.
    """
    cfg = w.cfg
    components = frozenset(components)
    theta = cfg.theta_max
    n_sites = 2 * cfg.n_layers_max + 1
    stats = ActivationStats(0, components)
    if "emb" in components:
        stats.emb_sites = [_Accumulator(cfg.d_model_max) for _ in range(n_sites)]
    if "ffn" in components:
        stats.ffn = [_Accumulator(cfg.ffn_hidden_max) for _ in range(cfg.n_layers_max)]
    if "gqa" in components:
        stats.gqa = [_Accumulator(cfg.n_groups_max) for _ in range(cfg.n_layers_max)]
    cos_sum = np.zeros(cfg.n_layers_max)
    for tokens in calib_batches:
        tokens = np.asarray(tokens)
        if tokens.shape[1] > cfg.max_seq_len:
            tokens = tokens[:, : cfg.max_seq_len]
        _, tr = forward(w, theta, tokens, trace=True)
        for site, act in enumerate(tr.norm_outputs):
            if stats.emb_sites:
                stats.emb_sites[site].add(act)
        for pos, l in enumerate(tr.blocks):
            if stats.ffn:
                stats.ffn[l].add(tr.ffn_preacts[pos])
            if stats.gqa:
                stats.gqa[l].add(np.linalg.norm(tr.attn_group_outputs[pos].astype(np.float64), axis=-1))
            if "block" in components:
                cos_sum[l] += block_cosine(tr.block_inputs[pos], tr.block_outputs[pos]).mean(axis=1).sum()
        stats.n_samples += tokens.shape[0]
    if stats.n_samples == 0:
        raise InputError("calibration set is empty")
    stats.block_cos = cos_sum if "block" in components else None
    return stats


def block_cosine(x_in, x_out):
    """Per-position cosine similarity between a block's input and output (B x T)."""
    a = np.asarray(x_in, dtype=np.float64)
    b = np.asarray(x_out, dtype=np.float64)
    num = (a * b).sum(-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return num / np.where(den > 0, den, 1.0)


@dataclass
class ImportanceScores:
    emb: np.ndarray            # d_model_max
    ffn: np.ndarray            # L x U_max
    gqa: np.ndarray            # L x G
    blocks: np.ndarray         # L
    scheme: str = "mean-mean"
    n_samples: int = 0
    block_scheme: str = "cosine"


def score_components(stats, scheme=AggregationScheme()):
    """Reduce activation statistics to per-component scores.

    Embedding channels sum their score over every RMSNorm site; block scores are
    ``1 - mean cosine(block input, block output)``.
    """
    if isinstance(scheme, str):
        scheme = AggregationScheme.parse(scheme)
    missing = COMPONENTS - stats.components
    if missing:
        raise ContractError(f"statistics lack components {sorted(missing)}")
    emb = np.sum([acc.reduce(scheme) for acc in stats.emb_sites], axis=0)
    ffn = np.stack([acc.reduce(scheme) for acc in stats.ffn])
    gqa = np.stack([acc.reduce(scheme) for acc in stats.gqa])
    blocks = 1.0 - stats.block_cos / stats.n_samples
    return ImportanceScores(emb, ffn, gqa, blocks, scheme.name, stats.n_samples)


def score_blocks_by_drop(w, calib_windows, batch_size=32):
    """Perplexity increase when each block is skipped (residual pass-through)."""
    cfg = w.cfg
    if cfg.n_layers_max < 2:
        raise ContractError("block-drop scoring needs at least two blocks")
    theta = cfg.theta_max
    plain = SuperNetWeights(cfg, w.params, None, w.lora)
    base = perplexity(plain, theta, calib_windows, batch_size)
    return np.array([perplexity(plain, theta, calib_windows, batch_size, skip_blocks=(l,)) - base
                     for l in range(cfg.n_layers_max)])


def descending_order(scores):
    """Indices by descending score; ties keep the lower original index first."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


@dataclass
class PermutationRecord:
    """``new[i] = old[perm[i]]`` for every permuted axis; blocks are only ranked."""

    emb: list
    ffn: list
    groups: list
    block_ranking: list

    def to_dict(self):
        return {"emb": list(map(int, self.emb)), "ffn": [list(map(int, p)) for p in self.ffn],
                "groups": [list(map(int, p)) for p in self.groups],
                "block_ranking": list(map(int, self.block_ranking))}

    @classmethod
    def from_dict(cls, d):
        return cls(d["emb"], d["ffn"], d["groups"], d["block_ranking"])

    @classmethod
    def identity(cls, cfg):
        return cls(list(range(cfg.d_model_max)),
                   [list(range(cfg.ffn_hidden_max)) for _ in range(cfg.n_layers_max)],
                   [list(range(cfg.n_groups_max)) for _ in range(cfg.n_layers_max)],
                   list(range(cfg.n_layers_max)))

    def is_identity(self):
        ident = lambda p: list(p) == list(range(len(p)))
        return ident(self.emb) and all(map(ident, self.ffn)) and all(map(ident, self.groups))

    def inverse(self):
        inv = lambda p: np.argsort(np.asarray(p)).tolist()
        return PermutationRecord(inv(self.emb), [inv(p) for p in self.ffn],
                                 [inv(p) for p in self.groups], list(self.block_ranking))

    def then(self, other):
        """Record equivalent to applying ``self`` and then ``other``."""
        comp = lambda a, b: np.asarray(a)[np.asarray(b)].tolist()
        return PermutationRecord(comp(self.emb, other.emb),
                                 [comp(a, b) for a, b in zip(self.ffn, other.ffn)],
                                 [comp(a, b) for a, b in zip(self.groups, other.groups)],
                                 list(other.block_ranking))


def _check_perm(p, n, what):
    p = np.asarray(p)
    if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
        raise ContractError(f"{what} permutation is not a bijection on range({n})")
    return p


def head_permutation(group_perm, heads_per_group):
    """Query-head order induced by a KV-group order (heads never leave their group)."""
    return np.concatenate([np.arange(g * heads_per_group, (g + 1) * heads_per_group)
                           for g in group_perm]).astype(np.int64)


def permute_weights(w, record):
    """Apply a :class:`PermutationRecord` to every coupled axis of ``w``."""
    if w.lora is not None:
        raise ContractError("sort the super-network before attaching LoRA adapters")
    cfg = w.cfg
    L, d, u = cfg.n_layers_max, cfg.d_model_max, cfg.ffn_hidden_max
    hm, gm, dhm, hpg = cfg.n_heads_max, cfg.n_groups_max, cfg.d_head_max, cfg.heads_per_group
    pe = _check_perm(record.emb, d, "embedding")
    if len(record.ffn) != L or len(record.groups) != L:
        raise ContractError("permutation record does not cover every block")
    p = w.params
    out = {"emb": p["emb"][:, pe], "pos": p["pos"][:, pe],
           "final_norm": p["final_norm"][pe], "lm_head": p["lm_head"][pe, :]}
    for l in range(L):
        pf = _check_perm(record.ffn[l], u, f"block {l} FFN")
        pg = _check_perm(record.groups[l], gm, f"block {l} group")
        ph = head_permutation(pg, hpg)
        attn = p[f"blocks.{l}.attn"][pe, :].reshape(d, hm + 2 * gm, dhm)
        attn = np.concatenate([attn[:, ph], attn[:, hm + pg], attn[:, hm + gm + pg]], axis=1)
        proj = p[f"blocks.{l}.proj"][:, pe].reshape(hm, dhm, d)[ph]
        out.update({
            f"blocks.{l}.attn_norm": p[f"blocks.{l}.attn_norm"][pe],
            f"blocks.{l}.attn": attn.reshape(d, -1),
            f"blocks.{l}.proj": proj.reshape(hm * dhm, d),
            f"blocks.{l}.ffn_norm": p[f"blocks.{l}.ffn_norm"][pe],
            f"blocks.{l}.w0": p[f"blocks.{l}.w0"][pe][:, pf],
            f"blocks.{l}.w2": p[f"blocks.{l}.w2"][pe][:, pf],
            f"blocks.{l}.w1": p[f"blocks.{l}.w1"][pf][:, pe],
        })
    out = {k: np.ascontiguousarray(out[k]) for k in p}
    return SuperNetWeights(cfg, out, w.block_scores, None)


def apply_sorting(w, scores):
    """Sort every component by descending importance.

    Returns ``(sorted_weights, record)``.  Block scores are attached to the
    returned weights; block order in storage is unchanged.
    """
    cfg = w.cfg
    if (scores.emb.shape != (cfg.d_model_max,) or scores.ffn.shape != (cfg.n_layers_max, cfg.ffn_hidden_max)
            or scores.gqa.shape != (cfg.n_layers_max, cfg.n_groups_max)
            or scores.blocks.shape != (cfg.n_layers_max,)):
        raise ContractError("importance scores do not cover every component of this network")
    record = PermutationRecord(descending_order(scores.emb).tolist(),
                               [descending_order(s).tolist() for s in scores.ffn],
                               [descending_order(s).tolist() for s in scores.gqa],
                               descending_order(scores.blocks).tolist())
    out = permute_weights(w, record)
    out.block_scores = np.asarray(scores.blocks, dtype=np.float64).copy()
    return out, record


def rpd_terms(w_before, w_after, thetas, windows, batch_size=32):
    """Per-architecture relative perplexity decrease ``(before - after) / before``."""
    thetas = list(thetas)
    if not thetas:
        raise InputError("RPD needs at least one architecture")
    # float64 so architectures that sorting leaves untouched give ~0, not float32 noise
    w_before, w_after = w_before.astype(np.float64), w_after.astype(np.float64)
    out = []
    for theta in thetas:
        before = perplexity(w_before, theta, windows, batch_size)
        after = perplexity(w_after, theta, windows, batch_size)
        out.append((before - after) / before)
    return np.asarray(out)


def compute_rpd(w_before, w_after, thetas, windows, batch_size=32):
    """Mean relative perplexity decrease over ``thetas``."""
    return float(np.mean(rpd_terms(w_before, w_after, thetas, windows, batch_size)))


def rpd_from_perplexities(before, after):
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.size == 0:
        raise InputError("RPD needs at least one architecture")
    return float(np.mean((before - after) / before))


def sort_supernet(w, calib_windows, scheme="mean-mean", block_scheme="cosine", batch_size=32):
    """collect -> score -> (optional block drop) -> sort, in one call."""
    if block_scheme not in ("cosine", "drop"):
        raise ContractError(f"unknown block scheme {block_scheme!r}")
    calib_windows = np.asarray(calib_windows)
    inputs = calib_windows[:, :-1] if calib_windows.shape[1] > w.cfg.max_seq_len else calib_windows
    stats = collect_stats(w, (inputs[i:i + batch_size] for i in range(0, len(inputs), batch_size)))
    scores = score_components(stats, scheme)
    if block_scheme == "drop":
        scores.blocks = score_blocks_by_drop(w, calib_windows, batch_size)
        scores.block_scheme = "drop"
    sorted_w, record = apply_sorting(w, scores)
    return sorted_w, record, scores
