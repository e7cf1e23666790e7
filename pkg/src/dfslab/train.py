"""Loss construction, SGD with momentum, schedule, training loop, evaluation,
checkpointing and metrics emission.

All randomness flows through counter-based streams keyed by the run seed, so
a (seed, config, dataset) triple reproduces every metric bit for bit.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import dfs_net
from .autograd import GradTape, backward
from .data import Dataset, batches
from .errors import ConfigError, ContractError, DataError, DivergenceError, FormatError
from .tensor import softmax_rows

CHECKPOINT_MAGIC = b"DFSCKPT1"

DEFAULT_DROP_POINTS = (250 / 300, 280 / 300, 295 / 300)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 3000
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    drop_points: tuple[float, float, float] = DEFAULT_DROP_POINTS
    eval_every: int = 500
    seed: int = 0

    def validate(self) -> None:
        if self.total_steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError(
                f"bad step/batch/eval settings: {self.total_steps}, {self.batch_size}, {self.eval_every}"
            )
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        points = self.drop_points
        if not all(0.0 < p < 1.0 for p in points) or not all(
            a < b for a, b in zip(points, points[1:])
        ):
            raise ConfigError(f"drop_points must increase strictly inside (0, 1), got {points}")


def cross_entropy(tape: GradTape, logits_id: int, labels) -> int:
    """Mean softmax cross-entropy, recorded as a scalar loss node."""
    return tape.softmax_ce(logits_id, labels)


def select_losses(loss_ids, mode: str):
    """Loss nodes to seed: all exits at unit weight, or only the last one."""
    return [loss_ids[-1]] if mode == "final_only" else list(loss_ids)


def lr_at(step: int, config: TrainConfig) -> float:
    """Piecewise-constant schedule: lr0, then x0.1 at each drop point."""
    cuts = [math.floor(p * config.total_steps) for p in config.drop_points]
    drops = sum(step >= c for c in cuts)
    return config.lr0 * (0.1 ** drops)


class OptimizerState:
    """Per-parameter velocity buffers, zero-initialized."""

    def __init__(self, model: dfs_net.Model):
        self.velocity = {name: np.zeros_like(value) for name, value, _ in model.parameters()}


def sgd_step(model: dfs_net.Model, grads: dict, state: OptimizerState, lr: float,
             momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + (g + wd*w); w <- w - lr*v. Decay skips biases."""
    for name, value, is_bias in model.parameters():
        g = grads[name]
        if g.shape != value.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {value.shape} ({name})")
        update = g if (is_bias or weight_decay == 0.0) else g + weight_decay * value
        v = state.velocity[name]
        v *= momentum
        v += update
        value -= lr * v


@dataclass
class MetricsRow:
    step: int
    split: str
    exit_id: str  # "1".."L" or "ensemble"
    loss: float
    top1: float


@dataclass
class EvalResult:
    exit_top1: list[float]
    exit_loss: list[float]
    ensemble_top1: float
    ensemble_loss: float


def _ce_value(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float((lse - shifted[np.arange(len(labels)), labels]).mean())


def evaluate(model: dfs_net.Model, dataset: Dataset) -> EvalResult:
    """Top-1 and mean loss per exit, plus the mean-logit ensemble."""
    if dataset.n == 0:
        raise DataError("cannot evaluate on an empty split")
    out = dfs_net.forward(model, dataset.X, GradTape())
    y = dataset.Y
    exit_top1, exit_loss = [], []
    for logits in out.logits:
        exit_top1.append(float((logits.argmax(axis=1) == y).mean()))
        exit_loss.append(_ce_value(logits, y))
    mean_logits = np.mean(out.logits, axis=0)
    return EvalResult(
        exit_top1=exit_top1,
        exit_loss=exit_loss,
        ensemble_top1=float((mean_logits.argmax(axis=1) == y).mean()),
        ensemble_loss=_ce_value(mean_logits, y),
    )


def _eval_rows(step: int, split: str, result: EvalResult) -> list[MetricsRow]:
    rows = [
        MetricsRow(step, split, str(i + 1), result.exit_loss[i], result.exit_top1[i])
        for i in range(len(result.exit_top1))
    ]
    rows.append(MetricsRow(step, split, "ensemble", result.ensemble_loss, result.ensemble_top1))
    return rows


@dataclass
class TrainResult:
    model: dfs_net.Model
    history: list[MetricsRow] = field(default_factory=list)
    final: dict = field(default_factory=dict)  # split -> EvalResult


def train_loop(model: dfs_net.Model, train_ds: Dataset, config: TrainConfig,
               eval_sets: dict[str, Dataset] | None = None) -> TrainResult:
    """SGD training; deterministic per (seed, config, dataset).

    Emits metrics rows for every split in ``eval_sets`` every ``eval_every``
    steps and once more after the last step. Aborts on non-finite loss.
    """
    config.validate()
    eval_sets = eval_sets or {}
    state = OptimizerState(model)
    history: list[MetricsRow] = []
    mode = model.config.mode

    epoch = -1
    epoch_batches: list = []
    cursor = 0
    for step in range(config.total_steps):
        if cursor >= len(epoch_batches):
            epoch += 1
            epoch_batches = batches(train_ds, config.batch_size, config.seed, epoch)
            cursor = 0
        xb, yb = epoch_batches[cursor]
        cursor += 1

        tape = GradTape()
        out = dfs_net.forward(model, xb, tape)
        loss_ids = [cross_entropy(tape, lid, yb) for lid in out.logit_ids]
        seeded = select_losses(loss_ids, mode)
        total = sum(float(tape.value(lid)[0, 0]) for lid in seeded)
        if not math.isfinite(total):
            raise DivergenceError(step)

        grad_map = backward(tape, seeded, list(out.param_ids.values()))
        grads = {name: grad_map[nid] for name, nid in out.param_ids.items()}
        sgd_step(model, grads, state, lr_at(step, config), config.momentum, config.weight_decay)

        if (step + 1) % config.eval_every == 0:
            for split, ds in eval_sets.items():
                history.extend(_eval_rows(step + 1, split, evaluate(model, ds)))

    final = {split: evaluate(model, ds) for split, ds in eval_sets.items()}
    if config.total_steps % config.eval_every != 0 or config.total_steps == 0:
        for split, result in final.items():
            history.extend(_eval_rows(config.total_steps, split, result))
    return TrainResult(model=model, history=history, final=final)


# -- metrics files -----------------------------------------------------------

def write_metrics(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "split", "exit_id", "loss", "top1"])
        for r in rows:
            writer.writerow([r.step, r.split, r.exit_id, repr(r.loss), repr(r.top1)])


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")


# -- checkpoints -------------------------------------------------------------

def model_config_to_dict(cfg: dfs_net.ModelConfig) -> dict:
    return {
        "widths": list(cfg.widths),
        "input_dim": cfg.input_dim,
        "classes": cfg.classes,
        "beta": cfg.beta,
        "mode": cfg.mode,
        "bias": cfg.bias_enabled,
        "head_shared_grad": cfg.head_shared_grad,
        "seed": cfg.seed,
    }


def model_config_from_dict(d: dict) -> dfs_net.ModelConfig:
    return dfs_net.ModelConfig(
        widths=tuple(d["widths"]),
        input_dim=d["input_dim"],
        classes=d["classes"],
        beta=d.get("beta", 0.5),
        mode=d.get("mode", "dfs"),
        bias_enabled=d.get("bias", True),
        head_shared_grad=d.get("head_shared_grad", False),
        seed=d.get("seed", 0),
    )


def save_checkpoint(model: dfs_net.Model, path, run_config: dict | None = None) -> None:
    """Magic + u32 LE header length + JSON manifest + contiguous LE f8 blobs."""
    tensors = []
    blobs = []
    offset = 0
    for name, value, _ in model.parameters():
        raw = np.ascontiguousarray(value, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(value.shape), "offset": offset, "len": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    config = {"model": model_config_to_dict(model.config)}
    if run_config is not None:
        config["run"] = run_config
    manifest = json.dumps({"config": config, "tensors": tensors}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> tuple[dfs_net.Model, dict]:
    """Rebuild a model from a checkpoint; returns (model, manifest config)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic in {path}")
    (header_len,) = struct.unpack_from("<I", blob, 8)
    if 12 + header_len > len(blob):
        raise FormatError("checkpoint truncated inside the manifest")
    try:
        manifest = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint manifest: {e}") from e
    payload = blob[12 + header_len :]

    try:
        config = manifest["config"]
        entries = manifest["tensors"]
        model_cfg = model_config_from_dict(config["model"])
    except (KeyError, TypeError) as e:
        raise FormatError(f"checkpoint manifest missing field: {e}") from e

    span = sum(e["len"] for e in entries)
    if span != len(payload):
        raise FormatError(f"blob section holds {len(payload)} bytes, manifest promises {span}")

    model = dfs_net.build(model_cfg)
    params = {name: value for name, value, _ in model.parameters()}
    seen = set()
    for entry in entries:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in params:
            raise FormatError(f"checkpoint tensor {name!r} not in model")
        target = params[name]
        if shape != target.shape or int(np.prod(shape)) * 8 != entry["len"]:
            raise FormatError(
                f"tensor {name!r}: manifest shape {shape}/len {entry['len']} "
                f"does not match model shape {target.shape}"
            )
        raw = payload[entry["offset"] : entry["offset"] + entry["len"]]
        target[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise FormatError(f"checkpoint missing tensors: {sorted(missing)}")
    return model, config
