"""Super-network fine-tuning with the sandwich rule and in-place distillation.

Each step runs the full network on the batch (LM loss, logits cached as the
teacher), then ``k`` sampled sub-networks (LM loss + weighted KD toward the
teacher).  Gradients from all passes are summed and globally clipped before
one Adam update at a cosine-annealed learning rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .errors import ConfigError, InputError, TrainingError
from .grid import draw
from .lora import attach_lora
from .model import SuperNetWeights, extract_subnet, forward, init_supernet, lm_loss, merged_params
from .search import sample_uniform

KD_KINDS = ("forward_kl", "reverse_kl", "js", "l1", "l2", "cosine")
MODES = ("weight_sharing", "independent")
SAMPLERS = ("grid", "uniform")
INIT_MODES = ("random", "pretrained")


def _abs(x):
    return x * np.sign(x.data).astype(x.dtype)


def _per_position(v):
    return v.reshape(-1, v.shape[-1])


def kd_loss(kind, teacher_logits, student_logits, temperature=1.0):
    """Distillation loss of ``student_logits`` toward constant ``teacher_logits``.

    KL and JS use temperature softmaxes and are averaged over positions; l1/l2
    are per-position distances between raw logits (mean over positions);
    cosine is ``1 - mean per-position cosine similarity``.
    """
    if kind not in KD_KINDS:
        raise ConfigError(f"unknown KD kind {kind!r}; expected one of {KD_KINDS}")
    if temperature <= 0:
        raise ConfigError("KD temperature must be positive")
    t_data = np.asarray(getattr(teacher_logits, "data", teacher_logits))
    s = student_logits if isinstance(student_logits, nx.Tensor) else nx.Tensor(np.asarray(student_logits))
    if t_data.shape != s.shape:
        raise InputError(f"teacher {t_data.shape} and student {s.shape} logits differ in shape")
    if not (np.all(np.isfinite(t_data)) and np.all(np.isfinite(s.data))):
        raise InputError("non-finite logits passed to kd_loss")
    t_data = t_data.astype(s.dtype, copy=False)
    n_pos = t_data.size // t_data.shape[-1]
    s2 = _per_position(s)
    t2 = t_data.reshape(-1, t_data.shape[-1])

    if kind in ("forward_kl", "reverse_kl", "js"):
        log_p = nx.log_softmax(nx.Tensor(t2 / temperature)).data        # teacher, constant
        log_q = nx.log_softmax(s2 * (1.0 / temperature))
        p = np.exp(log_p)
        if kind == "forward_kl":
            per = nx.sum_((log_q * -1.0 + log_p) * p, axis=-1)
        elif kind == "reverse_kl":
            q = nx.exp(log_q)
            per = nx.sum_(q * (log_q - log_p), axis=-1)
        else:
            q = nx.exp(log_q)
            log_m = nx.log((q + p) * 0.5)
            kl_pm = nx.sum_((log_m * -1.0 + log_p) * p, axis=-1)
            kl_qm = nx.sum_(q * (log_q - log_m), axis=-1)
            per = (kl_pm + kl_qm) * 0.5
        return nx.sum_(per) * (1.0 / n_pos)
    diff = s2 - t2
    if kind == "l1":
        return nx.sum_(_abs(diff)) * (1.0 / n_pos)
    if kind == "l2":
        return nx.sum_(nx.l2norm(diff, axis=-1)) * (1.0 / n_pos)
    t_norm = np.linalg.norm(t2.astype(np.float64), axis=-1)
    dots = nx.sum_(s2 * t2, axis=-1)
    s_norm = nx.l2norm(s2, axis=-1)
    den = s_norm * np.where(t_norm > 0, t_norm, 1.0).astype(s.dtype) + 1e-12
    return 1.0 - nx.sum_(dots / den) * (1.0 / n_pos)


def cosine_lr(step, total_steps, base_lr, final_lr):
    """Cosine decay from ``base_lr`` at step 0 to ``final_lr`` at the last step."""
    if total_steps <= 1:
        return float(base_lr)
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return float(final_lr + 0.5 * (base_lr - final_lr) * (1.0 + math.cos(math.pi * frac)))


@dataclass
class TrainConfig:
    epochs: int = 3
    base_lr: float = 2e-4
    final_lr: float = 6e-5
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    k: int = 3
    kd_kind: str = "cosine"
    kd_temperature: float = 1.0
    kd_weight: float = 1.0
    batch_size: int = 16
    seq_len: int = 64
    seed: int = 0
    lora: bool = True
    lora_rank: int = 32
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    train_mode: str = "weight_sharing"
    sampler: str = "grid"
    init_mode: str = "pretrained"
    steps_per_epoch: int = 0          # 0 = one pass over the shuffled windows
    deterministic: bool = True

    def validate(self):
        if self.epochs < 0 or self.k < 0 or self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("epochs and k must be >= 0, batch_size and seq_len >= 1")
        if not 0 < self.final_lr <= self.base_lr and not (self.base_lr == 0 == self.final_lr):
            raise ConfigError(f"need 0 < final_lr <= base_lr (got {self.final_lr}, {self.base_lr})")
        if self.kd_temperature <= 0:
            raise ConfigError("kd_temperature must be positive")
        if self.kd_kind not in KD_KINDS:
            raise ConfigError(f"unknown kd_kind {self.kd_kind!r}; expected one of {KD_KINDS}")
        if self.train_mode not in MODES:
            raise ConfigError(f"unknown train_mode {self.train_mode!r}; expected one of {MODES}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}; expected one of {SAMPLERS}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"unknown init_mode {self.init_mode!r}; expected one of {INIT_MODES}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.clip_norm < 0:
            raise ConfigError("betas must lie in [0, 1) and clip_norm must be >= 0")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        kinds = {f.name: type(f.default) for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise ConfigError(f"unknown training option {k!r}")
            if kinds[k] is bool and isinstance(v, str):
                v = v.strip().lower() in ("1", "true", "yes", "on")
            out[k] = kinds[k](v)
        return cls(**out)


@dataclass
class TrainState:
    weights: SuperNetWeights
    trainable: list
    m: dict
    v: dict
    step: int = 0
    total_steps: int = 0
    epoch: int = 0
    rng_shuffle: np.random.Generator = None
    rng_sampler: np.random.Generator = None
    rng_dropout: np.random.Generator = None
    log: list = field(default_factory=list)
    initial_loss: float | None = None

    @classmethod
    def create(cls, w, cfg):
        """Copy ``w`` (attaching adapters when LoRA is on) and zero the Adam moments."""
        cfg.validate()
        w = w.copy()
        if cfg.lora and w.lora is None:
            w = attach_lora(w, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, seed=cfg.seed)
        trainable = w.lora.trainable_names() if cfg.lora else sorted(w.params)
        if not cfg.lora and w.lora is not None:
            raise ConfigError("weights carry LoRA adapters but LoRA training is off")
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3)]
        state = cls(w, trainable, {}, {}, rng_shuffle=streams[0], rng_sampler=streams[1],
                    rng_dropout=streams[2])
        for name in trainable:
            arr = state.array(name)
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state

    def array(self, name):
        if name.startswith("lora."):
            return self.weights.lora.params[name[5:]]
        return self.weights.params[name]

    def set_array(self, name, value):
        if name.startswith("lora."):
            self.weights.lora.params[name[5:]] = value
        else:
            self.weights.params[name] = value


def _pass(w, tensors, theta, inputs, targets, rng, teacher=None, cfg=None):
    with nx.Tape() as tape:
        logits = forward(w, theta, inputs, tensors=tensors, dropout_rng=rng)
        lm = lm_loss(logits, targets)
        loss, kd = lm, None
        if teacher is not None:
            kd = kd_loss(cfg.kd_kind, teacher, logits, cfg.kd_temperature)
            loss = lm + kd * cfg.kd_weight
    for name, val in (("lm", lm), ("kd", kd)):
        if val is not None and not np.isfinite(float(val.data)):
            raise TrainingError(f"non-finite {name} loss for sub-network {theta}")
    return tape, loss, logits, float(lm.data), None if kd is None else float(kd.data)


def adam_update(state, grads, lr, cfg):
    """In-place (per dict entry) Adam with bias correction; returns nothing."""
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    for name, g in grads.items():
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = state.array(name)
        step = (lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(p.dtype)
        state.set_array(name, p - step)


def sandwich_step(state, batch, grid, cfg, space=None):
    """One sandwich-rule update on ``batch`` (B x (T+1) token windows)."""
    w = state.weights
    batch = np.asarray(batch)
    inputs, targets = batch[:, :-1], batch[:, 1:]
    lr = cosine_lr(state.step, max(state.total_steps, state.step + 1), cfg.base_lr, cfg.final_lr)
    tensors = w.tensors(state.trainable)
    leaves = [tensors[n] for n in state.trainable]
    drop = state.rng_dropout if cfg.lora else None

    theta_max = w.cfg.theta_max
    tape, loss, logits, lm_full, _ = _pass(w, tensors, theta_max, inputs, targets, drop)
    nx.backward(tape, loss, leaves)
    teacher = logits.data.copy()
    record = {"step": state.step, "lr": lr, "full_lm": lm_full, "subnets": []}

    if cfg.k > 0:
        if cfg.sampler == "grid":
            if grid is None:
                raise TrainingError("sandwich step with k > 0 needs a candidate grid")
            thetas = draw(grid, state.rng_sampler, cfg.k)
        else:
            if space is None:
                raise TrainingError("uniform sampling needs a search space")
            thetas = [sample_uniform(space, state.rng_sampler) for _ in range(cfg.k)]
        for theta in thetas:
            tape, loss, _, lm, kd = _pass(w, tensors, theta, inputs, targets, drop, teacher, cfg)
            nx.backward(tape, loss, leaves)
            record["subnets"].append({"theta": theta.as_list(), "lm": lm, "kd": kd})
    record["passes"] = 1 + len(record["subnets"])

    grads = {n: tensors[n].grad.astype(np.float64) for n in state.trainable}
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if not math.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm at step {state.step}")
    if cfg.clip_norm > 0 and norm > cfg.clip_norm:
        scale = cfg.clip_norm / norm
        grads = {n: g * scale for n, g in grads.items()}
    record["grad_norm"] = norm
    adam_update(state, grads, lr, cfg)
    state.step += 1
    state.log.append(record)
    return state, record


def _as_windows(data, seq_len):
    from .data import make_windows

    data = np.asarray(data)
    if data.ndim == 1:
        return make_windows(data, seq_len)
    if data.ndim != 2 or len(data) == 0:
        raise InputError("training data is empty")
    return data


def steps_per_epoch(n_windows, cfg):
    full = math.ceil(n_windows / cfg.batch_size)
    return min(full, cfg.steps_per_epoch) if cfg.steps_per_epoch > 0 else full


def train(state, data, cfg, grid=None, space=None, on_epoch=None, log_path=None):
    """Run ``cfg.epochs`` epochs of sandwich steps over shuffled windows.

    ``data`` is a 1-D token array or a matrix of (T+1)-token windows.
    ``on_epoch(state)`` is called at every epoch boundary (checkpointing);
    step records are appended to ``log_path`` as JSON lines.
    """
    cfg.validate()
    windows = _as_windows(data, cfg.seq_len)
    spe = steps_per_epoch(len(windows), cfg)
    state.total_steps = state.step + cfg.epochs * spe
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    ctx = nx.deterministic() if cfg.deterministic else _null()
    try:
        with ctx:
            for _ in range(cfg.epochs):
                order = state.rng_shuffle.permutation(len(windows))
                for i in range(spe):
                    idx = order[i * cfg.batch_size:(i + 1) * cfg.batch_size]
                    if len(idx) == 0:
                        break
                    _, rec = sandwich_step(state, windows[idx], grid, cfg, space)
                    if state.initial_loss is None:
                        state.initial_loss = rec["full_lm"]
                    if log:
                        log.write(json.dumps({"epoch": state.epoch, **rec}) + "\n")
                state.epoch += 1
                if log:
                    log.flush()
                if on_epoch is not None:
                    on_epoch(state)
    finally:
        if log:
            log.close()
    return state


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def finetune_independent(w, theta, data, cfg, init_mode=None, lora=False):
    """Train one architecture alone with plain LM loss.

    ``init_mode`` "pretrained" starts from the extracted slice of ``w``;
    "random" starts from a fresh init of the same shape.  Baselines train all
    weights unless ``lora`` is set.  Returns standalone weights with any
    adapters merged.
    """
    init_mode = init_mode or cfg.init_mode
    if init_mode not in INIT_MODES:
        raise ConfigError(f"unknown init mode {init_mode!r}; expected one of {INIT_MODES}")
    sub = extract_subnet(w, theta)
    if init_mode == "random":
        sub = init_supernet(sub.cfg, seed=cfg.seed + 1)
    sub_cfg = TrainConfig(**{**cfg.to_dict(), "k": 0, "lora": bool(lora)})
    state = TrainState.create(sub, sub_cfg)
    train(state, data, sub_cfg)
    out = state.weights
    return SuperNetWeights(out.cfg, merged_params(out))
