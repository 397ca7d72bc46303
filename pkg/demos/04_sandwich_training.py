"""Sandwich-rule fine-tuning with in-place distillation, then a Pareto front.

Each step trains the full network plus k grid architectures; the full
network's logits serve as the distillation teacher.  Only LoRA adapters are
trained.  Afterwards every grid architecture is evaluated and the
non-dominated (parameters, perplexity) set is reported.
"""

from __future__ import annotations

from pathlib import Path

from nasprune import data
from nasprune.evaluate import ParetoPoint, perplexity, pareto_front
from nasprune.grid import build_grid
from nasprune.model import SuperNetConfig, init_supernet, merged_params
from nasprune.search import SearchSpace, count_params
from nasprune.train import TrainConfig, TrainState, train

ROOT = Path(__file__).resolve().parents[1]
cfg = SuperNetConfig(d_model_max=32, n_layers_max=2, max_seq_len=32)
tokens = data.load_corpus(ROOT / "data" / "kjv_excerpt.txt")[:200_000]
train_tok, val_tok = data.split(tokens)
train_w, val_w = data.make_windows(train_tok, 32), data.make_windows(val_tok, 32)[:128]

pre = TrainConfig(epochs=1, base_lr=3e-3, final_lr=3e-4, k=0, lora=False, seq_len=32, steps_per_epoch=150)
w = train(TrainState.create(init_supernet(cfg, 0), pre), train_w, pre).weights
space = SearchSpace.from_config(cfg)
grid = build_grid(space, cfg, w, K=8, M=5, seed=0)
before = {t: perplexity(w, t, val_w) for t in grid.thetas()}

tc = TrainConfig(epochs=1, k=2, kd_kind="cosine", lora=True, lora_rank=8, base_lr=2e-3, final_lr=2e-4,
                 seq_len=32, steps_per_epoch=80)
state = train(TrainState.create(w, tc), train_w, tc, grid=grid, space=space)
last = state.log[-1]
print(f"last step: full-network LM {last['full_lm']:.3f}; sub-networks " +
      ", ".join(f"{s['lm']:.3f} (kd {s['kd']:.4f})" for s in last["subnets"]))

points = []
print(f"\n{'architecture':<40} {'params':>7} {'ppl before':>11} {'ppl after':>10}")
for t in grid.thetas():
    after = perplexity(state.weights, t, val_w)
    points.append(ParetoPoint(t, after, count_params(cfg, t)))
    print(f"{str(t):<40} {count_params(cfg, t):>7} {before[t]:>11.2f} {after:>10.2f}")
print("\nPareto front (params, perplexity):")
for p in pareto_front(points):
    print(f"  {int(p.cost):>7}  {p.quality:.2f}  {p.theta}")
