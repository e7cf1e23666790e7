"""Command-line orchestration: train / flops / gradcheck / budget / sweep.

Run configs are single JSON documents, schema-checked with unknown keys
rejected so sweep configs stay diffable. All command outputs are
deterministic per (config, seed) at the byte level; logs go to stderr
(DFS_LOG={error|info|debug}), data to files or stdout. Exit codes: 0
success, 1 runtime/assertion failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, data, dfs_net, train
from .autograd import GradTape, backward, detach_aware_fd_oracle
from .errors import (
    AccountingViolation,
    BudgetError,
    ConfigError,
    DataError,
    DivergenceError,
    FormatError,
    RoutingViolation,
)
from .tensor import RngStream

log = logging.getLogger("dfslab")

_GRADCHECK_STREAM = 8

_MODEL_KEYS = {"widths", "beta", "mode", "bias", "head_shared_grad", "input_dim", "classes"}
_TRAIN_KEYS = {
    "total_steps", "batch_size", "lr0", "momentum", "weight_decay", "drop_points", "eval_every",
}
_DATA_KEYS_SPIRALS = {"kind", "classes", "train_per_class", "test_per_class", "val_per_class", "noise"}
_DATA_KEYS_IDX = {"kind", "train_images", "train_labels", "test_images", "test_labels"}
_TOP_KEYS = {"seed", "model", "train", "data", "normalize"}


def _check_keys(section: dict, allowed: set, required: set, path: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    missing = sorted(required - set(section))
    if missing:
        raise ConfigError(f"{path}: missing keys {missing}")


def load_run_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}"
        ) from e
    return validate_run_config(cfg)


def validate_run_config(cfg: dict) -> dict:
    _check_keys(cfg, _TOP_KEYS, {"model", "data"}, "config")
    model = cfg["model"]
    _check_keys(model, _MODEL_KEYS, {"widths"}, "config.model")
    if not (isinstance(model["widths"], list) and model["widths"]
            and all(isinstance(w, int) and w > 0 for w in model["widths"])):
        raise ConfigError("config.model.widths: expected a non-empty list of positive ints")
    dat = cfg["data"]
    kind = dat.get("kind")
    if kind == "spirals":
        _check_keys(dat, _DATA_KEYS_SPIRALS, {"kind", "classes", "train_per_class", "test_per_class"}, "config.data")
    elif kind == "idx":
        _check_keys(dat, _DATA_KEYS_IDX, _DATA_KEYS_IDX, "config.data")
    else:
        raise ConfigError(f"config.data.kind: expected 'spirals' or 'idx', got {kind!r}")
    _check_keys(cfg.get("train", {}), _TRAIN_KEYS, set(), "config.train")
    return cfg


def make_datasets(cfg: dict) -> dict[str, data.Dataset]:
    """Build the split dict from the data section; normalized with train stats."""
    dat = cfg["data"]
    seed = cfg.get("seed", 0)
    if dat["kind"] == "spirals":
        def spec(split, per_class):
            return data.SyntheticSpec(
                kind="spirals",
                classes=dat["classes"],
                samples_per_class=per_class,
                noise=dat.get("noise", 0.1),
                seed=seed,
                split=split,
            )

        sets = {"train": data.gen_spirals(spec("train", dat["train_per_class"]))}
        if dat.get("val_per_class", 0) > 0:
            sets["val"] = data.gen_spirals(spec("val", dat["val_per_class"]))
        sets["test"] = data.gen_spirals(spec("test", dat["test_per_class"]))
    else:
        sets = {
            "train": data.load_idx(dat["train_images"], dat["train_labels"], "train"),
            "test": data.load_idx(dat["test_images"], dat["test_labels"], "test"),
        }
    if cfg.get("normalize", True):
        sets["train"], stats = data.standardize_fit(sets["train"])
        for split in ("val", "test"):
            if split in sets:
                sets[split] = data.standardize_apply(stats, sets[split])
    return sets


def model_config_from_run(cfg: dict, datasets: dict) -> dfs_net.ModelConfig:
    model = cfg["model"]
    train_ds = datasets["train"]
    input_dim = model.get("input_dim", train_ds.dim)
    classes = model.get("classes", train_ds.classes)
    if input_dim != train_ds.dim:
        raise ConfigError(f"config.model.input_dim {input_dim} != dataset dim {train_ds.dim}")
    if classes != train_ds.classes:
        raise ConfigError(f"config.model.classes {classes} != dataset classes {train_ds.classes}")
    return dfs_net.ModelConfig(
        widths=tuple(model["widths"]),
        input_dim=input_dim,
        classes=classes,
        beta=model.get("beta", 0.5),
        mode=model.get("mode", "dfs"),
        bias_enabled=model.get("bias", True),
        head_shared_grad=model.get("head_shared_grad", False),
        seed=cfg.get("seed", 0),
    )


def train_config_from_run(cfg: dict) -> train.TrainConfig:
    section = dict(cfg.get("train", {}))
    if "drop_points" in section:
        section["drop_points"] = tuple(section["drop_points"])
    tc = train.TrainConfig(seed=cfg.get("seed", 0), **section)
    tc.validate()
    return tc


def run_training(cfg: dict, out_dir) -> dict:
    """Train one model per the run config; write metrics.csv, summary.json, model.ckpt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = make_datasets(cfg)
    model_cfg = model_config_from_run(cfg, datasets)
    train_cfg = train_config_from_run(cfg)
    model = dfs_net.build(model_cfg)
    log.info("training mode=%s beta=%s seed=%s steps=%s",
             model_cfg.mode, model_cfg.beta, train_cfg.seed, train_cfg.total_steps)

    eval_sets = {s: datasets[s] for s in ("train", "val", "test") if s in datasets}
    result = train.train_loop(model, datasets["train"], train_cfg, eval_sets)

    best_val = None
    for row in result.history:
        if row.split == "val" and row.exit_id == "ensemble":
            best_val = row.top1 if best_val is None else max(best_val, row.top1)

    test = result.final["test"]
    summary = {
        "mode": model_cfg.mode,
        "beta": model_cfg.beta,
        "seed": train_cfg.seed,
        "steps": train_cfg.total_steps,
        "final": {
            split: {
                "exit_top1": r.exit_top1,
                "exit_loss": r.exit_loss,
                "ensemble_top1": r.ensemble_top1,
                "ensemble_loss": r.ensemble_loss,
            }
            for split, r in result.final.items()
        },
        "best_val_ensemble_top1": best_val,
        "test_ensemble_top1": test.ensemble_top1,
    }
    train.write_metrics(out_dir / "metrics.csv", result.history)
    train.write_summary(out_dir / "summary.json", summary)
    train.save_checkpoint(model, out_dir / "model.ckpt", run_config=cfg)
    return summary


# -- subcommands --------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    summary = run_training(cfg, args.out)
    log.info("final test ensemble top1: %.4f", summary["test_ensemble_top1"])
    return 0


def cmd_flops(args) -> int:
    report = analysis.verify_counts(args.layers, args.width, args.beta)
    for mode in ("joint", "dfs"):
        m = report.modes[mode]
        print(
            f"{mode:>5}: forward closed={m['closed_forward']} measured={m['measured_forward']} "
            f"backward closed={m['closed_backward']} measured={m['measured_backward']} "
            f"{'ok' if m['forward_match'] and m['backward_match'] else 'MISMATCH'}"
        )
    frac = analysis.reduction(args.layers)
    print(f"per-step training reduction at L={args.layers}: {100 * frac:.2f}% (limit 16.67%)")
    return 0


def _random_small_config(rng: RngStream, mode: str) -> dfs_net.ModelConfig:
    L = int(rng.integers(2, 5, 1)[0])
    widths = tuple(int(w) for w in rng.integers(4, 9, L))
    return dfs_net.ModelConfig(
        widths=widths,
        input_dim=int(rng.integers(2, 6, 1)[0]),
        classes=int(rng.integers(2, 5, 1)[0]),
        beta=float(0.1 + 0.8 * rng.uniform(1)[0]),
        mode=mode,
        bias_enabled=bool(rng.integers(0, 2, 1)[0]),
        seed=int(rng.integers(0, 2**31, 1)[0]),
    )


def gradcheck_one(model: dfs_net.Model, X, Y, tolerance: float = 1e-4) -> float:
    """Max relative error between autodiff and the detach-aware FD oracle."""
    tape = GradTape()
    out = dfs_net.forward(model, X, tape)
    loss_ids = [train.cross_entropy(tape, lid, Y) for lid in out.logit_ids]
    seeded = train.select_losses(loss_ids, model.config.mode)
    grad_map = backward(tape, seeded, list(out.param_ids.values()))

    def total_loss(t: GradTape) -> float:
        o = dfs_net.forward(model, X, t)
        ids = [train.cross_entropy(t, lid, Y) for lid in o.logit_ids]
        return sum(float(t.value(i)[0, 0]) for i in train.select_losses(ids, model.config.mode))

    worst = 0.0
    for name, value, _ in model.parameters():
        fd = detach_aware_fd_oracle(total_loss, value)
        ad = grad_map[out.param_ids[name]]
        err = float((np.abs(ad - fd) / np.maximum(1.0, np.abs(fd))).max())
        worst = max(worst, err)
        if err > tolerance:
            raise RoutingViolation(name, "fd", f"autodiff vs oracle relative error {err:.3e}")
    return worst


def _inject_fault_check(seed: int) -> None:
    """Flip the head's stop-gradient edge and demand the probe catches it."""
    cfg = dfs_net.ModelConfig(
        widths=(6, 6, 6), input_dim=3, classes=3, beta=0.5, mode="dfs",
        bias_enabled=False, head_shared_grad=True, seed=seed,
    )
    model = dfs_net.build(cfg)
    rng = RngStream(seed, _GRADCHECK_STREAM)
    X = rng.normal(5, 3)
    Y = rng.integers(0, 3, 5)
    tape = GradTape()
    out = dfs_net.forward(model, X, tape)
    losses = [train.cross_entropy(tape, lid, Y) for lid in out.logit_ids]
    wid = out.param_ids["layer0.w"]
    g = backward(tape, [losses[0]], [wid])[wid]
    s = model.layers[0].split
    if np.any(g[:, :s] != 0.0):
        raise RoutingViolation(0, "a", "shared block updated by its own exit's loss")


def cmd_gradcheck(args) -> int:
    if args.inject_fault:
        _inject_fault_check(args.seed)
        print("injected fault was not detected")  # pragma: no cover
        return 1  # pragma: no cover
    rng = RngStream(args.seed, _GRADCHECK_STREAM)
    for m in range(args.models):
        cfg = _random_small_config(rng, "dfs")
        model = dfs_net.build(cfg)
        batch = int(rng.integers(3, 7, 1)[0])
        X = rng.normal(batch, cfg.input_dim)
        Y = rng.integers(0, cfg.classes, batch)
        dfs_net.routing_check(model, X, Y)
        worst = gradcheck_one(model, X, Y)
        print(f"model {m}: L={cfg.layer_count} widths={cfg.widths} beta={cfg.beta:.3f} "
              f"routing ok, fd max rel err {worst:.2e}")
    joint_cfg = _random_small_config(rng, "joint")
    joint_model = dfs_net.build(joint_cfg)
    X = rng.normal(5, joint_cfg.input_dim)
    Y = rng.integers(0, joint_cfg.classes, 5)
    worst = gradcheck_one(joint_model, X, Y)
    print(f"joint control: fd max rel err {worst:.2e}")
    print("gradcheck passed")
    return 0


def _budget_rows(model, calib, test, budgets) -> list[dict]:
    rows = []
    for budget in budgets:
        try:
            r = analysis.budgeted_eval(model, calib, test, budget)
            rows.append({
                "budget": budget, "threshold": r.threshold, "avg_cost": r.avg_cost,
                "top1": r.top1, "hist": r.histogram, "feasible": True,
            })
        except BudgetError as e:
            log.warning("budget %s infeasible: %s", budget, e)
            rows.append({
                "budget": budget, "threshold": math.nan, "avg_cost": math.nan,
                "top1": math.nan, "hist": [0] * model.config.layer_count, "feasible": False,
            })
    return rows


def cmd_budget(args) -> int:
    model, config = train.load_checkpoint(args.checkpoint)
    run_cfg = config.get("run")
    if run_cfg is None:
        raise ConfigError("checkpoint carries no run config; cannot rebuild the dataset")
    datasets = make_datasets(validate_run_config(run_cfg))
    costs = analysis.inference_cost_profile(model.config).per_exit
    if args.budgets:
        budgets = [float(b) for b in args.budgets.split(",")]
    else:
        budgets = list(np.linspace(costs[0], costs[-1], args.points))
    rows = _budget_rows(model, datasets["train"], datasets["test"], budgets)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "budget.csv"
    L = model.config.layer_count
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["budget", "threshold", "avg_cost", "top1"] + [f"hist_{i+1}" for i in range(L)])
        for r in rows:
            writer.writerow([repr(float(r["budget"])), repr(r["threshold"]),
                             repr(r["avg_cost"]), repr(r["top1"])] + r["hist"])
    print(f"wrote {path}")
    return 0


def _sweep_cell(payload):
    cfg, out_dir = payload
    try:
        return "ok", run_training(cfg, out_dir)
    except Exception as e:  # cell isolation: a bad cell must not kill the sweep
        return "error", f"{type(e).__name__}: {e}"


def cmd_sweep(args) -> int:
    base = load_run_config(args.config)
    betas = [float(b) for b in args.beta.split(",")]
    base_seed = args.seed if args.seed is not None else base.get("seed", 0)
    seeds = list(range(base_seed, base_seed + args.seeds))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    cells = []
    for beta in betas:
        for seed in seeds:
            cfg = json.loads(json.dumps(base))  # deep copy
            cfg["seed"] = seed
            cfg["model"]["beta"] = beta
            cells.append(((beta, seed), (cfg, str(out_dir / f"beta{beta}_seed{seed}"))))

    results = {}
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for (key, _), outcome in zip(cells, pool.map(_sweep_cell, [c[1] for c in cells])):
                results[key] = outcome
    else:
        for key, payload in cells:
            results[key] = _sweep_cell(payload)

    rows = []
    summaries = {}
    for (beta, seed), (status, value) in sorted(results.items()):
        if status != "ok":
            continue
        summaries[(beta, seed)] = value
        final = value["final"]["test"]
        for i, (top1, loss) in enumerate(zip(final["exit_top1"], final["exit_loss"])):
            rows.append([beta, seed, str(i + 1), top1, loss])
        rows.append([beta, seed, "ensemble", final["ensemble_top1"], final["ensemble_loss"]])

    # aggregate rows: seed column carries "mean" / "std"
    exits = sorted({r[2] for r in rows},
                   key=lambda e: (e == "ensemble", int(e) if e != "ensemble" else 0))
    for beta in betas:
        for exit_id in exits:
            vals = [(r[3], r[4]) for r in rows if r[0] == beta and r[2] == exit_id and isinstance(r[1], int)]
            if not vals:
                continue
            top1s = np.array([v[0] for v in vals])
            losses = np.array([v[1] for v in vals])
            rows.append([beta, "mean", exit_id, float(top1s.mean()), float(losses.mean())])
            rows.append([beta, "std", exit_id, float(top1s.std()), float(losses.std())])

    with open(out_dir / "sweep.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["beta", "seed", "exit_id", "top1", "loss"])
        for beta, seed, exit_id, top1, loss in rows:
            writer.writerow([repr(float(beta)), seed, exit_id, repr(float(top1)), repr(float(loss))])

    status_map = {}
    failures = {}
    for (beta, seed), (status, value) in sorted(results.items()):
        cell = f"beta{beta}_seed{seed}"
        status_map[cell] = status
        if status != "ok":
            failures[cell] = value
    train.write_summary(out_dir / "sweep_summary.json", {"cells": status_map, "failures": failures})
    if results and all(status != "ok" for status, _ in results.values()):
        return 1
    return 0


# -- entry point ---------------------------------------------------------------

def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("DFS_LOG", "info"), logging.INFO
    )
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfslab",
        description="multi-exit training lab: partitioned features, stop-gradient "
                    "referencing, exact operation accounting, budgeted early exit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("flops", help="closed-form vs measured operation counts")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--beta", type=float, default=0.5)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="routing probes + finite-difference oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", type=int, default=20)
    p.add_argument("--inject-fault", action="store_true",
                   help="flip one stop-gradient edge; the probe must fail (self-test)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("budget", help="budgeted batch classification curve from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budgets", default=None, help="comma-separated ops/sample budgets")
    p.add_argument("--points", type=int, default=10, help="grid size when --budgets is absent")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("sweep", help="beta x seed training grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta", required=True, help="comma-separated beta values")
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    p.add_argument("--seed", type=int, default=None, help="first seed (default: config seed)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    _setup_logging()
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (AccountingViolation, BudgetError, DataError, DivergenceError,
            FormatError, RoutingViolation) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
