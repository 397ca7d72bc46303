"""Command-line pipeline: init -> sort -> grid -> train, plus eval / pareto / extract / latency.

Every stage writes a checkpoint directory ``<run-dir>/<stage>``; each command
checks that the stages it depends on exist.  Exit codes: 0 success, 1 other
failures, 2 usage errors, 3 pipeline-order (state) errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .errors import ConfigError, NasPruneError, StateError
from .evaluate import ParetoPoint, mean_nll, measure_latency, pareto_front
from .grid import CandidateGrid, build_grid
from .importance import AggregationScheme, rpd_terms, sort_supernet
from .model import extract_subnet, init_supernet
from .plot import scatter_svg
from .search import SearchSpace, SubNetworkConfig, count_params, estimate_flops, sample_uniform, validate
from .train import KD_KINDS, TrainState, finetune_independent, train

STAGES = ("init", "sorted", "grid", "trained")


class UsageError(NasPruneError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# run-directory helpers ----------------------------------------------------


def _stage_dir(run_dir, stage):
    return Path(run_dir) / stage


def _require(run_dir, stage, why):
    path = _stage_dir(run_dir, stage)
    if not (path / "manifest").exists():
        raise StateError(f"{why} needs the '{stage}' stage; run `nasprune {_producer(stage)}` first")
    return load_checkpoint(path)


def _producer(stage):
    return {"init": "init", "sorted": "sort", "grid": "grid", "trained": "train"}[stage]


def _latest(run_dir):
    for stage in reversed(STAGES):
        if (_stage_dir(run_dir, stage) / "manifest").exists():
            return stage
    raise StateError(f"{run_dir} holds no checkpoint; run `nasprune init` first")


def _clear_downstream(run_dir, stage, force):
    later = [s for s in STAGES[STAGES.index(stage) + 1:] if _stage_dir(run_dir, s).exists()]
    if later and not force:
        raise StateError(f"stages {later} already exist and would be stale; use --force to discard them")
    for s in later:
        shutil.rmtree(_stage_dir(run_dir, s))


def _carry(manifest, *keys):
    return {k: manifest[k] for k in keys if k in manifest}


def _space(cfg, manifest):
    if "space" in manifest:
        return SearchSpace.from_dict(cfg, manifest["space"])
    return SearchSpace.from_config(cfg)


def _splits(rc):
    tokens = data_mod.load_corpus(rc.data.corpus)
    train_tok, val_tok = data_mod.split(tokens, rc.data.val_fraction)
    seq = rc.train.seq_len
    train_w = data_mod.make_windows(train_tok, seq)
    val_w = data_mod.make_windows(val_tok, seq)
    if rc.data.eval_windows > 0:
        val_w = val_w[: rc.data.eval_windows]
    return train_w, val_w


def _parse_theta(text):
    try:
        return SubNetworkConfig.from_list(text)
    except (ValueError, TypeError) as e:
        raise UsageError(f"bad --theta {text!r}; expected d_model,n_heads,d_head,ffn_ratio,n_layers") from e


# commands -----------------------------------------------------------------


def cmd_init(rc, args):
    run = Path(args.run_dir)
    _clear_downstream(run, "init", args.force)
    cfg = rc.supernet
    w = init_supernet(cfg, rc.seed)
    train_w, val_w = _splits(rc)
    space = SearchSpace.from_config(cfg, rc.grid.variant)
    meta = {"stage": "init", "space": space.to_dict(), "seed": rc.seed,
            "init_val_loss": mean_nll(w, cfg.theta_max, val_w, rc.eval.batch_size)}
    epochs = rc.pretrain.epochs if args.pretrain_epochs is None else args.pretrain_epochs
    if epochs > 0:
        tc = replace(rc.train, epochs=epochs, base_lr=rc.pretrain.lr, final_lr=rc.pretrain.final_lr,
                     k=0, lora=False, steps_per_epoch=rc.pretrain.steps_per_epoch, seed=rc.seed)
        log = run / "pretrain_log.jsonl"
        run.mkdir(parents=True, exist_ok=True)
        log.unlink(missing_ok=True)
        state = train(TrainState.create(w, tc), train_w, tc, log_path=log)
        w = state.weights
        meta["pretrain"] = {"epochs": epochs, "steps": state.step, "lr": tc.base_lr,
                            "final_lr": tc.final_lr, "first_loss": state.initial_loss,
                            "last_loss": state.log[-1]["full_lm"] if state.log else None}
    meta["val_loss"] = mean_nll(w, cfg.theta_max, val_w, rc.eval.batch_size)
    save_checkpoint(run / "init", w, **meta)
    print(f"init: params={w.num_scalars()} val_loss={meta['val_loss']:.4f} -> {run / 'init'}")


def cmd_sort(rc, args):
    run = Path(args.run_dir)
    ck = _require(run, "init", "sort")
    _clear_downstream(run, "sorted", args.force)
    w = ck.weights
    scheme = AggregationScheme.parse(args.scheme or rc.sort.scheme)
    block_scheme = args.block_scheme or rc.sort.block_scheme
    n_calib = args.calib_samples if args.calib_samples is not None else rc.sort.calib_samples
    train_w, val_w = _splits(rc)
    calib = data_mod.calibration_windows(train_w, n_calib, seed=rc.sort.seed)
    sorted_w, record, scores = sort_supernet(w, calib, scheme, block_scheme, rc.eval.batch_size)
    space = _space(w.cfg, ck.manifest)
    n_rpd = rc.sort.rpd_samples if args.rpd_samples is None else args.rpd_samples
    rpd = None
    if n_rpd > 0:
        rng = np.random.default_rng(rc.sort.seed)
        thetas = [sample_uniform(space, rng) for _ in range(n_rpd)]
        terms = rpd_terms(w, sorted_w, thetas, val_w, rc.eval.batch_size)
        rpd = {"mean": float(np.mean(terms)), "median": float(np.median(terms)),
               "terms": [float(x) for x in terms], "thetas": [t.as_list() for t in thetas]}
    meta = _carry(ck.manifest, "space", "seed", "init_val_loss", "val_loss", "pretrain")
    meta.update(stage="sorted", scheme=scheme.name, block_scheme=block_scheme, calib_samples=len(calib),
                permutation=record.to_dict(), rpd=rpd,
                scores={"emb": scores.emb.tolist(), "ffn": scores.ffn.tolist(),
                        "gqa": scores.gqa.tolist(), "blocks": scores.blocks.tolist()})
    save_checkpoint(run / "sorted", sorted_w, **meta)
    msg = "" if rpd is None else f" rpd_mean={rpd['mean']:.4f} rpd_median={rpd['median']:.4f}"
    print(f"sort: scheme={scheme.name} blocks={block_scheme}{msg} -> {run / 'sorted'}")


def cmd_grid(rc, args):
    run = Path(args.run_dir)
    ck = _require(run, "sorted", "grid")
    _clear_downstream(run, "grid", args.force)
    w = ck.weights
    space = _space(w.cfg, ck.manifest)
    g = rc.grid
    grid = build_grid(space, w.cfg, w, args.bins or g.bins, args.per_bin or g.per_bin,
                      args.max_trials or g.max_trials, seed=g.seed if args.seed is None else args.seed)
    meta = {k: v for k, v in ck.manifest.items() if k not in ("tensors", "schema_version", "supernet",
                                                                "block_scores", "lora")}
    meta.update(stage="grid", grid=grid.to_dict())
    save_checkpoint(run / "grid", w, **meta)
    _write_csv(run / "grid.csv", grid.rows())
    print(f"grid: {len(grid.occupied())}/{len(grid.bins)} bins occupied "
          f"params=[{grid.params_min}, {grid.params_max}] -> {run / 'grid'}")


def _train_config(rc, args):
    tc = rc.train
    over = {"epochs": args.epochs, "base_lr": args.lr, "final_lr": args.final_lr, "k": args.k,
            "kd_kind": args.kd, "kd_temperature": args.kd_temp, "kd_weight": args.kd_weight,
            "lora": args.lora, "train_mode": args.mode, "init_mode": args.init,
            "steps_per_epoch": args.steps_per_epoch, "sampler": args.sampler}
    tc = replace(tc, **{k: v for k, v in over.items() if v is not None})
    if tc.base_lr == 0 and args.final_lr is None:
        tc = replace(tc, final_lr=0.0)
    return tc.validate()


def cmd_train(rc, args):
    run = Path(args.run_dir)
    ck = _require(run, "grid", "train")
    tc = _train_config(rc, args)
    grid = CandidateGrid.from_dict(ck.manifest["grid"])
    train_w, _ = _splits(rc)
    w = ck.weights
    space = _space(w.cfg, ck.manifest)
    if tc.train_mode == "independent":
        out = run / "independent" / tc.init_mode
        for i, b in enumerate(grid.bins):
            if b.occupied:
                sub = finetune_independent(w, b.theta, train_w, tc, tc.init_mode, lora=bool(args.lora))
                save_checkpoint(out / f"bin_{i:02d}", sub, stage="independent", theta=b.theta.to_dict(),
                                init_mode=tc.init_mode, training={**tc.to_dict(), "lora": bool(args.lora)})
        print(f"train: independent {tc.init_mode} models for {len(grid.occupied())} bins -> {out}")
        return
    _clear_downstream(run, "trained", True)
    meta = {k: v for k, v in ck.manifest.items() if k not in ("tensors", "schema_version", "supernet",
                                                                "block_scores", "lora")}
    log = run / "train_log.jsonl"
    log.unlink(missing_ok=True)

    def on_epoch(state):
        info = {"epochs_done": state.epoch, "steps": state.step, "first_loss": state.initial_loss,
                "last_loss": state.log[-1]["full_lm"] if state.log else None}
        save_checkpoint(run / "trained", state.weights, **{**meta, "stage": "trained",
                                                           "training": tc.to_dict(), "progress": info})

    state = TrainState.create(w, tc)
    train(state, train_w, tc, grid=grid, space=space, on_epoch=on_epoch, log_path=log)
    if tc.epochs == 0:
        on_epoch(state)
    print(f"train: {state.step} steps, k={tc.k}, kd={tc.kd_kind}, lora={tc.lora} -> {run / 'trained'}")


def _eval_rows(rc, w, thetas, sources, latency):
    _, val_w = _splits(rc)
    rows = []
    for theta, src in zip(thetas, sources):
        loss = mean_nll(w, theta, val_w, rc.eval.batch_size)
        row = {"source": src, **theta.to_dict(), "params": count_params(w.cfg, theta),
               "flops": estimate_flops(w.cfg, theta, rc.eval.latency_seq_len),
               "loss": loss, "ppl": float(np.exp(loss))}
        if latency:
            lat = measure_latency(extract_subnet(w, theta), rc.eval.latency_seq_len,
                                  rc.eval.latency_reps, rc.eval.latency_warmup)
            row.update(latency_ms=lat["median_ms"], latency_p10_ms=lat["p10_ms"], latency_p90_ms=lat["p90_ms"])
        rows.append(row)
    return rows


def _stage_checkpoint(run, stage):
    stage = stage or _latest(run)
    if stage not in STAGES:
        raise UsageError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return _require(run, stage, "this command"), stage


def _grid_thetas(ck):
    if "grid" not in ck.manifest:
        raise StateError("this stage has no candidate grid; run `nasprune grid` first")
    grid = CandidateGrid.from_dict(ck.manifest["grid"])
    idx = [i for i, b in enumerate(grid.bins) if b.occupied]
    return [grid.bins[i].theta for i in idx], [f"bin_{i:02d}" for i in idx]


def cmd_eval(rc, args):
    run = Path(args.run_dir)
    ck, stage = _stage_checkpoint(run, args.stage)
    if args.all_grid:
        thetas, sources = _grid_thetas(ck)
    elif args.theta:
        thetas, sources = [_parse_theta(args.theta)], ["theta"]
    else:
        raise UsageError("eval needs --theta or --all-grid")
    space = _space(ck.weights.cfg, ck.manifest)
    for t in thetas:
        problems = validate(space, t)
        if problems:
            raise ConfigError(f"{t} is not in the search space: {'; '.join(problems)}")
    rows = _eval_rows(rc, ck.weights, thetas, sources, not args.no_latency)
    out = Path(args.out) if args.out else run / f"eval_{stage}.csv"
    _write_csv(out, rows)
    _print_rows(rows)


def cmd_pareto(rc, args):
    run = Path(args.run_dir)
    ck, stage = _stage_checkpoint(run, args.stage)
    thetas, sources = _grid_thetas(ck)
    cost = args.cost
    rows = _eval_rows(rc, ck.weights, thetas, sources, cost == "latency")
    key = "params" if cost == "params" else "latency_ms"
    points = [ParetoPoint(SubNetworkConfig.from_dict(r), r["ppl"], float(r[key]), r["source"]) for r in rows]
    front = pareto_front(points)
    keep = {(p.source, p.cost, p.quality) for p in front}
    front_rows = sorted((r for r in rows if (r["source"], float(r[key]), r["ppl"]) in keep),
                        key=lambda r: (float(r[key]), r["ppl"]))
    out_csv = run / f"pareto_{cost}_{stage}.csv"
    _write_csv(out_csv, front_rows)
    scatter_svg({"grid": ([p.cost for p in points], [p.quality for p in points], False),
                 "front": ([p.cost for p in front], [p.quality for p in front], True)},
                run / f"pareto_{cost}_{stage}.svg", xlabel=cost, ylabel="validation perplexity",
                title=f"{stage} sub-networks")
    _print_rows(front_rows)
    print(f"pareto: {len(front)} of {len(points)} points on the front -> {out_csv}")


def cmd_extract(rc, args):
    run = Path(args.run_dir)
    ck, stage = _stage_checkpoint(run, args.stage)
    theta = _parse_theta(args.theta)
    sub = extract_subnet(ck.weights, theta)
    save_checkpoint(args.out, sub, stage="extracted", source_stage=stage, theta=theta.to_dict())
    print(f"extract: {theta} params={sub.num_scalars()} -> {args.out}")


def cmd_latency(rc, args):
    run = Path(args.run_dir)
    ck, _ = _stage_checkpoint(run, args.stage)
    theta = _parse_theta(args.theta) if args.theta else ck.weights.cfg.theta_max
    reps = rc.eval.latency_reps if args.reps is None else args.reps
    warmup = rc.eval.latency_warmup if args.warmup is None else args.warmup
    seq = rc.eval.latency_seq_len if args.seq_len is None else args.seq_len
    lat = measure_latency(extract_subnet(ck.weights, theta), seq, reps, warmup)
    print(json.dumps({"theta": theta.as_list(), "seq_len": seq, **lat}))


# output -------------------------------------------------------------------


def _write_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _print_rows(rows):
    if not rows:
        return
    cols = list(rows[0])
    fmt = lambda v: f"{v:.4g}" if isinstance(v, float) else str(v)
    print("\t".join(cols))
    for r in rows:
        print("\t".join(fmt(r.get(c, "")) for c in cols))


# parser -------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="nasprune", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--run-dir", default="run", help="directory holding the stage checkpoints")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("init", help="create (and optionally pretrain) the super-network")
    s.add_argument("--pretrain-epochs", type=int)
    s.add_argument("--force", action="store_true")

    s = sub.add_parser("sort", help="importance scoring and sorting")
    s.add_argument("--scheme", help="aggregation over batch-sequence, e.g. mean-mean, norm-mean, var-mean")
    s.add_argument("--block-scheme", choices=("cosine", "drop"))
    s.add_argument("--calib-samples", type=int)
    s.add_argument("--rpd-samples", type=int)
    s.add_argument("--force", action="store_true")

    s = sub.add_parser("grid", help="build the calibrated candidate grid")
    s.add_argument("--bins", type=int)
    s.add_argument("--per-bin", type=int)
    s.add_argument("--max-trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--force", action="store_true")

    s = sub.add_parser("train", help="sandwich-rule fine-tuning or independent baselines")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--final-lr", type=float)
    s.add_argument("--k", type=int)
    s.add_argument("--kd", choices=KD_KINDS)
    s.add_argument("--kd-temp", type=float)
    s.add_argument("--kd-weight", type=float)
    s.add_argument("--lora", dest="lora", action="store_true", default=None)
    s.add_argument("--no-lora", dest="lora", action="store_false")
    s.add_argument("--mode", choices=("weight_sharing", "independent"))
    s.add_argument("--init", choices=("random", "pretrained"))
    s.add_argument("--sampler", choices=("grid", "uniform"))
    s.add_argument("--steps-per-epoch", type=int)

    for name, text in (("eval", "perplexity, params, FLOPs and latency"),
                       ("pareto", "Pareto front of the grid sub-networks"),
                       ("extract", "materialize one sub-network as a standalone checkpoint"),
                       ("latency", "CPU latency of one materialized sub-network")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--stage", choices=STAGES)
        if name == "eval":
            s.add_argument("--theta")
            s.add_argument("--all-grid", action="store_true")
            s.add_argument("--no-latency", action="store_true")
            s.add_argument("--out")
        elif name == "pareto":
            s.add_argument("--cost", choices=("params", "latency"), default="params")
        elif name == "extract":
            s.add_argument("--theta", required=True)
            s.add_argument("--out", required=True)
        else:
            s.add_argument("--theta")
            s.add_argument("--reps", type=int)
            s.add_argument("--warmup", type=int)
            s.add_argument("--seq-len", type=int)
    return p


COMMANDS = {"init": cmd_init, "sort": cmd_sort, "grid": cmd_grid, "train": cmd_train, "eval": cmd_eval,
            "pareto": cmd_pareto, "extract": cmd_extract, "latency": cmd_latency}


def run_cli(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; one of " + ", ".join(COMMANDS))
        rc = load_config(args.config)
        COMMANDS[args.command](rc, args)
        return 0
    except SystemExit as e:          # --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"nasprune: usage error: {e}", file=sys.stderr)
        return 2
    except StateError as e:
        print(f"nasprune: state error: {e}", file=sys.stderr)
        return 3
    except NasPruneError as e:
        print(f"nasprune: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"nasprune: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
