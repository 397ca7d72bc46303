"""Elastic decoder-only GQA transformer super-network.

Every sub-network is realised by first-k slicing of the shared weights:
the first ``d_model`` embedding channels, the first ``G' = H'*G/H`` key/value
groups together with their query heads, the first ``d_head`` entries of each
head and the first ``U' = round(r*d_model)`` FFN neurons.  Depth keeps the
``L'`` highest-scoring blocks in their original order (the first ``L'`` when
no block scores are stored).

Weight layout (``d = d_model_max``, ``dh = d_head_max``, ``U = U_max``)::

    emb        V x d            pos        S x d
    blocks.l.attn_norm  d       blocks.l.attn  d x (H+2G)*dh  (queries|keys|values)
    blocks.l.proj  H*dh x d     blocks.l.ffn_norm  d
    blocks.l.w0    d x U (gate) blocks.l.w2    d x U (up)     blocks.l.w1  U x d (down)
    final_norm  d               lm_head    d x V
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .errors import ConfigError, InputError
from .search import SubNetworkConfig, round_half_up


def _is_pow2(n):
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class SuperNetConfig:
    vocab_size: int = 256
    d_model_max: int = 64
    n_layers_max: int = 4
    n_heads_max: int = 4
    n_groups_max: int = 2
    d_head_max: int = 16
    ffn_ratio_max: float = 3.5
    rms_eps: float = 1e-5
    max_seq_len: int = 64

    def validate(self, strict=True):
        ints = dict(vocab_size=self.vocab_size, d_model_max=self.d_model_max,
                    n_layers_max=self.n_layers_max, n_heads_max=self.n_heads_max,
                    n_groups_max=self.n_groups_max, d_head_max=self.d_head_max,
                    max_seq_len=self.max_seq_len)
        for k, v in ints.items():
            if int(v) != v or v <= 0:
                raise ConfigError(f"{k} must be a positive integer, got {v!r}")
        if self.ffn_ratio_max <= 0 or self.rms_eps <= 0:
            raise ConfigError("ffn_ratio_max and rms_eps must be positive")
        if self.n_heads_max % self.n_groups_max:
            raise ConfigError(f"n_heads_max={self.n_heads_max} is not a multiple of "
                              f"n_groups_max={self.n_groups_max}")
        if strict and not (_is_pow2(self.d_model_max) and _is_pow2(self.d_head_max)):
            raise ConfigError("d_model_max and d_head_max must be powers of two")
        return self

    @property
    def heads_per_group(self):
        return self.n_heads_max // self.n_groups_max

    @property
    def ffn_hidden_max(self):
        return round_half_up(self.ffn_ratio_max * self.d_model_max)

    @property
    def theta_max(self):
        return SubNetworkConfig(self.d_model_max, self.n_heads_max, self.d_head_max,
                                self.ffn_ratio_max, self.n_layers_max)

    def param_shapes(self):
        d, dh, u = self.d_model_max, self.d_head_max, self.ffn_hidden_max
        h, g = self.n_heads_max, self.n_groups_max
        shapes = {"emb": (self.vocab_size, d), "pos": (self.max_seq_len, d)}
        for l in range(self.n_layers_max):
            shapes.update({
                f"blocks.{l}.attn_norm": (d,),
                f"blocks.{l}.attn": (d, (h + 2 * g) * dh),
                f"blocks.{l}.proj": (h * dh, d),
                f"blocks.{l}.ffn_norm": (d,),
                f"blocks.{l}.w0": (d, u),
                f"blocks.{l}.w2": (d, u),
                f"blocks.{l}.w1": (u, d),
            })
        shapes["final_norm"] = (d,)
        shapes["lm_head"] = (d, self.vocab_size)
        return shapes

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        floats = ("ffn_ratio_max", "rms_eps")
        return cls(**{k: float(v) if k in floats else int(v) for k, v in d.items()})


@dataclass
class SuperNetWeights:
    """Shared parameters plus optional block scores and LoRA adapters."""

    cfg: SuperNetConfig
    params: dict
    block_scores: np.ndarray | None = None
    lora: object | None = None

    def tensors(self, trainable=()):
        """Wrap parameters as autodiff leaves (no copies).

        Names in ``trainable`` get ``requires_grad=True``; adapter tensors are
        keyed ``lora.<site>.A`` / ``lora.<site>.B``.
        """
        trainable = set(trainable)
        out = {k: nx.Tensor(v, requires_grad=k in trainable, name=k) for k, v in self.params.items()}
        if self.lora is not None:
            for k, v in self.lora.params.items():
                name = f"lora.{k}"
                out[name] = nx.Tensor(v, requires_grad=name in trainable, name=name)
        return out

    def astype(self, dtype):
        lora = None
        if self.lora is not None:
            lora = replace(self.lora, params={k: v.astype(dtype) for k, v in self.lora.params.items()})
        return SuperNetWeights(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()},
                               None if self.block_scores is None else self.block_scores.copy(), lora)

    def copy(self):
        return self.astype(next(iter(self.params.values())).dtype)

    def num_scalars(self):
        return int(sum(v.size for v in self.params.values()))


@dataclass
class ForwardTrace:
    """Activations captured by ``forward(..., trace=True)`` (numpy arrays)."""

    batch_size: int
    seq_len: int
    blocks: list = field(default_factory=list)          # super-network block indices
    block_inputs: list = field(default_factory=list)    # B x T x d per block
    block_outputs: list = field(default_factory=list)
    norm_outputs: list = field(default_factory=list)    # every RMSNorm site, in order
    attn_group_outputs: list = field(default_factory=list)  # B x T x G' x (hpg*dh)
    attn_probs: list = field(default_factory=list)      # B x G' x hpg x T x T
    values: list = field(default_factory=list)          # B x G' x T x dh
    ffn_preacts: list = field(default_factory=list)     # B x T x U' (input @ W0)
    head_groups: np.ndarray | None = None               # query head -> KV group


def init_supernet(cfg, seed=0):
    """Scaled normal init: std 0.02, residual down-projections by 1/sqrt(2L)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    down = 0.02 / math.sqrt(2 * cfg.n_layers_max)
    params = {}
    for name, shape in cfg.param_shapes().items():
        if name.endswith("norm"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".proj") or name.endswith(".w1"):
            params[name] = rng.normal(0.0, down, size=shape).astype(np.float32)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
    return SuperNetWeights(cfg, params)


def check_theta(cfg, theta):
    bad = []
    for name, value, hi in zip(("d_model", "n_heads", "d_head", "ffn_ratio", "n_layers"),
                               theta.as_list(), cfg.theta_max.as_list()):
        if not (0 < value <= hi):
            bad.append(f"{name}={value} outside (0, {hi}]")
    if (theta.n_heads * cfg.n_groups_max) % cfg.n_heads_max:
        bad.append(f"n_heads={theta.n_heads} is not a whole number of KV groups")
    if theta.ffn_hidden > cfg.ffn_hidden_max or theta.ffn_hidden < 1:
        bad.append(f"ffn hidden {theta.ffn_hidden} outside [1, {cfg.ffn_hidden_max}]")
    if bad:
        raise ConfigError(f"invalid sub-network {theta}: " + "; ".join(bad))


def check_tokens(cfg, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise InputError(f"tokens must be a B x T integer matrix, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError("tokens must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise InputError(f"token ids must lie in [0, {cfg.vocab_size})")
    if tokens.shape[1] > cfg.max_seq_len:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
    return tokens.astype(np.int64, copy=False)


def select_blocks(w, n_layers):
    """Indices of the blocks a depth-``n_layers`` sub-network keeps (ascending)."""
    if w.block_scores is None:
        return list(range(n_layers))
    order = np.argsort(-np.asarray(w.block_scores, dtype=np.float64), kind="stable")
    return sorted(int(i) for i in order[:n_layers])


def slice_block(p, cfg, theta, l):
    """First-k views of block ``l``.  Works on numpy arrays and on Tensors."""
    d, h, dh, u = theta.d_model, theta.n_heads, theta.d_head, theta.ffn_hidden
    g = theta.n_groups(cfg)
    hm, gm, dhm = cfg.n_heads_max, cfg.n_groups_max, cfg.d_head_max
    heads = p[f"blocks.{l}.attn"][:d].reshape(d, hm + 2 * gm, dhm)
    return {
        "attn_norm": p[f"blocks.{l}.attn_norm"][:d],
        "wq": heads[:, :h, :dh].reshape(d, h * dh),
        "wk": heads[:, hm:hm + g, :dh].reshape(d, g * dh),
        "wv": heads[:, hm + gm:hm + gm + g, :dh].reshape(d, g * dh),
        "proj": p[f"blocks.{l}.proj"].reshape(hm, dhm, cfg.d_model_max)[:h, :dh, :d].reshape(h * dh, d),
        "ffn_norm": p[f"blocks.{l}.ffn_norm"][:d],
        "w0": p[f"blocks.{l}.w0"][:d, :u],
        "w2": p[f"blocks.{l}.w2"][:d, :u],
        "w1": p[f"blocks.{l}.w1"][:u, :d],
    }


def slice_outer(p, cfg, theta, seq_len=None):
    d = theta.d_model
    s = cfg.max_seq_len if seq_len is None else seq_len
    return {"emb": p["emb"][:, :d], "pos": p["pos"][:s, :d],
            "final_norm": p["final_norm"][:d], "lm_head": p["lm_head"][:d]}


def _dropout(x, p, rng, shape=None):
    if rng is None or p <= 0:
        return x
    keep = rng.random(shape if shape is not None else x.shape) >= p
    return x * (keep / (1.0 - p)).astype(x.dtype)


def _lora_delta(p, lora, site, x, rng, cols_view):
    """scale * dropout(x) @ A[:, :d].T @ B_active.T for a Q/K/V site."""
    a = p[f"lora.{site}.A"]
    b = p[f"lora.{site}.B"]
    d = x.shape[-1]
    xa = _dropout(x, lora.dropout, rng) @ nx.transpose(a[:, :d])
    return (xa @ nx.transpose(cols_view(b))) * lora.scale


def forward(w, theta, tokens, trace=False, *, tensors=None, dropout_rng=None, skip_blocks=()):
    """Logits (B x T x V Tensor) of sub-network ``theta``; with ``trace`` also a ForwardTrace.

    ``tensors`` supplies autodiff leaves (see :meth:`SuperNetWeights.tensors`);
    ``dropout_rng`` enables LoRA dropout (training only); ``skip_blocks`` turns
    the listed super-network blocks into residual pass-throughs.
    """
    cfg = w.cfg
    check_theta(cfg, theta)
    tokens = check_tokens(cfg, tokens)
    p = tensors if tensors is not None else w.tensors()
    bsz, t = tokens.shape
    d, h, dh = theta.d_model, theta.n_heads, theta.d_head
    g = theta.n_groups(cfg)
    hpg = cfg.heads_per_group
    hm, gm, dhm = cfg.n_heads_max, cfg.n_groups_max, cfg.d_head_max
    lora = w.lora
    sites = set(lora.sites) if lora is not None else set()
    tr = ForwardTrace(bsz, t) if trace else None
    if tr is not None:
        tr.head_groups = np.repeat(np.arange(g), hpg)

    outer = slice_outer(p, cfg, theta, t)
    x = nx.take(outer["emb"], tokens)
    if "emb" in sites:
        a_rows = nx.take(nx.transpose(p["lora.emb.A"]), tokens)           # B x T x rank
        a_rows = _dropout(a_rows, lora.dropout, dropout_rng, (bsz, t, 1))
        x = x + (a_rows @ nx.transpose(p["lora.emb.B"][:d])) * lora.scale
    x = x + outer["pos"]

    dtype = x.dtype
    mask = np.triu(np.full((t, t), -np.inf, dtype=dtype), 1)
    scale = 1.0 / math.sqrt(dh)
    q_view = lambda b_: b_.reshape(hm, dhm, -1)[:h, :dh].reshape(h * dh, -1)
    kv_view = lambda b_: b_.reshape(gm, dhm, -1)[:g, :dh].reshape(g * dh, -1)

    blocks = [l for l in select_blocks(w, theta.n_layers) if l not in set(skip_blocks)]
    for l in blocks:
        s = slice_block(p, cfg, theta, l)
        x_in = x
        hn = nx.rms_norm(x, s["attn_norm"], cfg.rms_eps)
        q = hn @ s["wq"]
        k = hn @ s["wk"]
        v = hn @ s["wv"]
        if f"{l}.q" in sites:
            q = q + _lora_delta(p, lora, f"{l}.q", hn, dropout_rng, q_view)
        if f"{l}.k" in sites:
            k = k + _lora_delta(p, lora, f"{l}.k", hn, dropout_rng, kv_view)
        if f"{l}.v" in sites:
            v = v + _lora_delta(p, lora, f"{l}.v", hn, dropout_rng, kv_view)
        q = q.reshape(bsz, t, g, hpg, dh).transpose(0, 2, 3, 1, 4)   # B G hpg T dh
        k = k.reshape(bsz, t, g, 1, dh).transpose(0, 2, 3, 4, 1)     # B G 1 dh T
        v = v.reshape(bsz, t, g, 1, dh).transpose(0, 2, 3, 1, 4)     # B G 1 T dh
        probs = nx.softmax((q @ k) * scale + mask)
        att = (probs @ v).transpose(0, 3, 1, 2, 4)                   # B T G hpg dh
        x = x + att.reshape(bsz, t, h * dh) @ s["proj"]

        hf = nx.rms_norm(x, s["ffn_norm"], cfg.rms_eps)
        gate = hf @ s["w0"]
        x = x + (nx.silu(gate) * (hf @ s["w2"])) @ s["w1"]

        if tr is not None:
            tr.blocks.append(l)
            tr.block_inputs.append(x_in.data)
            tr.block_outputs.append(x.data)
            tr.norm_outputs.extend([hn.data, hf.data])
            tr.attn_group_outputs.append(att.data.reshape(bsz, t, g, hpg * dh))
            tr.attn_probs.append(probs.data)
            tr.values.append(v.data[:, :, 0])
            tr.ffn_preacts.append(gate.data)

    hn = nx.rms_norm(x, outer["final_norm"], cfg.rms_eps)
    logits = hn @ outer["lm_head"]
    if tr is not None:
        tr.norm_outputs.append(hn.data)
        return logits, tr
    return logits


def logits_np(w, theta, tokens, **kw):
    return forward(w, theta, tokens, **kw).data


def lm_loss(logits, targets):
    """Mean next-token cross-entropy over all B*T positions."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise InputError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise InputError(f"target ids must lie in [0, {v})")
    return nx.cross_entropy(logits, targets)


def merged_params(w):
    """Base parameters with any LoRA deltas folded in (numpy copies)."""
    params = {k: v.copy() for k, v in w.params.items()}
    lora = w.lora
    if lora is None:
        return params
    cfg = w.cfg
    hm, gm, dhm = cfg.n_heads_max, cfg.n_groups_max, cfg.d_head_max
    for site in lora.sites:
        a, b = lora.params[f"{site}.A"], lora.params[f"{site}.B"]
        delta = (lora.scale * (b @ a)).T.astype(params["emb"].dtype)
        if site == "emb":
            params["emb"] += delta
            continue
        l, which = site.split(".")
        start = {"q": 0, "k": hm * dhm, "v": (hm + gm) * dhm}[which]
        params[f"blocks.{l}.attn"][:, start:start + delta.shape[1]] += delta
    return params


def extract_subnet(w, theta):
    """Materialize ``theta`` as a standalone network whose forward needs no slicing."""
    cfg = w.cfg
    check_theta(cfg, theta)
    p = merged_params(w)
    keep = select_blocks(w, theta.n_layers)
    sub_cfg = SuperNetConfig(cfg.vocab_size, theta.d_model, theta.n_layers, theta.n_heads,
                             theta.n_groups(cfg), theta.d_head, theta.ffn_ratio, cfg.rms_eps,
                             cfg.max_seq_len).validate(strict=False)
    outer = slice_outer(p, cfg, theta)
    out = {"emb": outer["emb"], "pos": outer["pos"]}
    for new, l in enumerate(keep):
        s = slice_block(p, cfg, theta, l)
        packed = np.concatenate([s["wq"], s["wk"], s["wv"]], axis=1)
        out.update({
            f"blocks.{new}.attn_norm": s["attn_norm"], f"blocks.{new}.attn": packed,
            f"blocks.{new}.proj": s["proj"], f"blocks.{new}.ffn_norm": s["ffn_norm"],
            f"blocks.{new}.w0": s["w0"], f"blocks.{new}.w2": s["w2"], f"blocks.{new}.w1": s["w1"],
        })
    out["final_norm"] = outer["final_norm"]
    out["lm_head"] = outer["lm_head"]
    out = {k: np.ascontiguousarray(out[k]).copy() for k in sub_cfg.param_shapes()}
    return SuperNetWeights(sub_cfg, out)
