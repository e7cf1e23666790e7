"""Multi-exit model construction and wiring.

A model is a stack of affine+relu layers with one classifier head per depth.
Four wirings are supported:

* ``joint``: every head reads its layer's full features and every loss
  updates every weight beneath it (the classic deeply-supervised setup).
* ``dfs``: each partitioned layer's output columns are split into a shared
  part (updated by all deeper losses) and an exit-specific part (updated by
  its own exit's loss only). Forward passes cross-reference both parts
  everywhere; stop-gradient edges cut the cross-references in backward.
* ``partition_only``: the shared chain consumes only shared features and
  each head reads only its exit-specific part; isolation is structural, no
  stop-gradients needed.
* ``final_only``: joint wiring, intended to be trained on the last exit's
  loss alone.

The normative stop-gradient table for ``dfs`` (i indexes partitioned
layers, L the final one):

    live edges:     f_i+ -> layer i+1 (both parts);  f_i- -> head i;
                    f_L -> head L;  f_{L-1}+ -> layer L
    detached edges: f_i- -> layer i+1 (both parts);  f_i- -> layer L;
                    f_i+ -> head i  (unless head_shared_grad)

Forward values are unaffected by the flags, so a dfs model and a joint
model holding identical arrays produce bitwise identical logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .autograd import GradTape, backward, detach
from .errors import ConfigError, RoutingViolation, ShapeError

MODES = ("joint", "dfs", "partition_only", "final_only")

INIT_STREAM = 1


def partition_channels(channels: int, beta: float) -> tuple[int, int]:
    """Split a channel count into (shared, exit-specific) parts.

    Rounds ``beta * channels`` half away from zero, then clamps so both
    sides keep at least one channel.
    """
    if channels < 2:
        raise ConfigError(f"cannot partition {channels} channel(s); need at least 2")
    if not (0.0 < beta < 1.0):
        raise ConfigError(f"beta must lie strictly inside (0, 1), got {beta}")
    shared = int(math.floor(beta * channels + 0.5))
    shared = min(max(shared, 1), channels - 1)
    return shared, channels - shared


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, ...]
    input_dim: int
    classes: int
    beta: float = 0.5
    mode: str = "dfs"
    bias_enabled: bool = True
    head_shared_grad: bool = False
    seed: int = 0

    @property
    def layer_count(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.layer_count < 2:
            raise ConfigError(f"need at least 2 layers, got {self.layer_count}")
        if self.input_dim < 1 or self.classes < 2:
            raise ConfigError(
                f"input_dim >= 1 and classes >= 2 required, got {self.input_dim}, {self.classes}"
            )
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if not (0.0 < self.beta < 1.0):
            raise ConfigError(f"beta must lie strictly inside (0, 1), got {self.beta}")
        if self.mode in ("dfs", "partition_only"):
            for w in self.widths[:-1]:
                partition_channels(w, self.beta)  # raises if unsplittable


@dataclass
class LayerParams:
    w: np.ndarray  # in_dim x out_dim
    split: int  # shared part is columns [0, split); split == out_dim means unpartitioned
    b: np.ndarray | None = None

    @property
    def w_plus(self) -> np.ndarray:
        return self.w[:, : self.split]

    @property
    def w_minus(self) -> np.ndarray:
        return self.w[:, self.split :]


@dataclass
class ExitHead:
    w: np.ndarray  # feat_dim x classes
    b: np.ndarray | None = None


@dataclass
class Model:
    config: ModelConfig
    layers: list[LayerParams]
    heads: list[ExitHead]

    def parameters(self):
        """Yield (name, array, is_bias) in a fixed order."""
        for i, layer in enumerate(self.layers):
            yield f"layer{i}.w", layer.w, False
            if layer.b is not None:
                yield f"layer{i}.b", layer.b, True
        for i, head in enumerate(self.heads):
            yield f"head{i}.w", head.w, False
            if head.b is not None:
                yield f"head{i}.b", head.b, True


def plan_shapes(config: ModelConfig):
    """Per-layer (in_dim, out_dim, split) and per-head feat_dim for a config."""
    L = config.layer_count
    layer_plans = []
    head_feats = []
    prev_out = config.input_dim  # width of the tensor feeding the next layer
    for i, width in enumerate(config.widths):
        last = i == L - 1
        if last or config.mode in ("joint", "final_only"):
            split = width
        else:
            split, _ = partition_channels(width, config.beta)
        layer_plans.append((prev_out, width, split))
        if config.mode == "partition_only":
            head_feats.append(width if last else width - split)
            prev_out = split if not last else width
        else:
            head_feats.append(width)
            prev_out = width
    return layer_plans, head_feats


def build(config: ModelConfig, rng: tensor.RngStream | None = None) -> Model:
    """Allocate and initialize all layer and head parameters."""
    config.validate()
    if rng is None:
        rng = tensor.RngStream(config.seed, INIT_STREAM)
    layer_plans, head_feats = plan_shapes(config)
    layers = []
    for in_dim, out_dim, split in layer_plans:
        w = tensor.he_init(in_dim, out_dim, rng)
        b = np.zeros((1, out_dim)) if config.bias_enabled else None
        layers.append(LayerParams(w=w, split=split, b=b))
    heads = []
    for feat in head_feats:
        w = tensor.he_init(feat, config.classes, rng)
        b = np.zeros((1, config.classes)) if config.bias_enabled else None
        heads.append(ExitHead(w=w, b=b))
    return Model(config=config, layers=layers, heads=heads)


@dataclass
class ExitOutputs:
    logits: list[np.ndarray]  # one batch x classes array per exit, shallow to deep
    logit_ids: list[int]  # tape node ids of the logits
    param_ids: dict[str, int] = field(default_factory=dict)  # parameter name -> node id


def _affine(tape, src, w_id, b_id, lo=None, hi=None):
    """matmul (optionally against a column slice of w/b) plus optional bias."""
    w_ref = w_id if lo is None else tape.slice_cols(w_id, lo, hi)
    out = tape.matmul(src, w_ref)
    if b_id is not None:
        b_ref = b_id if lo is None else tape.slice_cols(b_id, lo, hi)
        out = tape.add_bias(out, b_ref)
    return out


def forward(model: Model, X, tape: GradTape) -> ExitOutputs:
    """Run one forward pass, recording every op (and stop-gradient edge) on the tape."""
    cfg = model.config
    X = tensor.as_tensor(X)
    if X.shape[1] != cfg.input_dim:
        raise ShapeError(f"input has {X.shape[1]} features, model expects {cfg.input_dim}")
    L = cfg.layer_count

    param_ids: dict[str, int] = {}
    x_id = tape.leaf(X, requires_grad=False)
    for name, value, _ in model.parameters():
        param_ids[name] = tape.leaf(value, requires_grad=True)

    def wid(i):
        return param_ids[f"layer{i}.w"]

    def bid(i):
        return param_ids.get(f"layer{i}.b")

    logits_ids: list[int] = []

    if cfg.mode in ("joint", "final_only"):
        h = x_id
        feats = []
        for i in range(L):
            h = tape.relu(_affine(tape, h, wid(i), bid(i)))
            feats.append(h)
        for i in range(L):
            logits_ids.append(_affine(tape, feats[i], param_ids[f"head{i}.w"], param_ids.get(f"head{i}.b")))

    elif cfg.mode == "dfs":
        src = x_id
        feats = []  # (f_plus, f_minus) per partitioned layer
        for i in range(L - 1):
            split = model.layers[i].split
            out_dim = model.layers[i].w.shape[1]
            fp = tape.relu(_affine(tape, src, wid(i), bid(i), 0, split))
            fm = tape.relu(_affine(tape, src, wid(i), bid(i), split, out_dim))
            feats.append((fp, fm))
            # downstream layers read both parts; the exit-specific part is
            # value-only so deeper losses never update it
            src = tape.concat_cols(fp, detach(fm))
        f_last = tape.relu(_affine(tape, src, wid(L - 1), bid(L - 1)))
        for i, (fp, fm) in enumerate(feats):
            head_src = tape.concat_cols(
                fp if cfg.head_shared_grad else detach(fp), fm
            )
            logits_ids.append(_affine(tape, head_src, param_ids[f"head{i}.w"], param_ids.get(f"head{i}.b")))
        logits_ids.append(_affine(tape, f_last, param_ids[f"head{L-1}.w"], param_ids.get(f"head{L-1}.b")))

    elif cfg.mode == "partition_only":
        h_shared = x_id
        for i in range(L - 1):
            split = model.layers[i].split
            out_dim = model.layers[i].w.shape[1]
            fp = tape.relu(_affine(tape, h_shared, wid(i), bid(i), 0, split))
            fm = tape.relu(_affine(tape, h_shared, wid(i), bid(i), split, out_dim))
            logits_ids.append(_affine(tape, fm, param_ids[f"head{i}.w"], param_ids.get(f"head{i}.b")))
            h_shared = fp
        f_last = tape.relu(_affine(tape, h_shared, wid(L - 1), bid(L - 1)))
        logits_ids.append(_affine(tape, f_last, param_ids[f"head{L-1}.w"], param_ids.get(f"head{L-1}.b")))

    else:  # pragma: no cover - validate() rejects unknown modes
        raise ConfigError(f"unknown mode {cfg.mode!r}")

    return ExitOutputs(
        logits=[tape.value(i) for i in logits_ids],
        logit_ids=logits_ids,
        param_ids=param_ids,
    )


def routing_check(model: Model, X, labels) -> dict:
    """Probe the dfs gradient routing table with structural-zero assertions.

    Per partitioned layer i, with s its split point:
      (a) seeding only loss i: grad of w_i[:, :s] is exactly zero and grad of
          w_i[:, s:] is nonzero;
      (b) seeding only losses deeper than i: grad of w_i[:, s:] is exactly zero;
      (c) the head weight of exit i gets a nonzero gradient only when loss i
          is seeded.
    Raises RoutingViolation naming the layer and clause on the first failure.
    """
    cfg = model.config
    if cfg.mode != "dfs":
        raise ConfigError(f"routing_check applies to dfs mode, got {cfg.mode!r}")
    if cfg.head_shared_grad:
        raise ConfigError("routing_check requires head_shared_grad off")

    from .train import cross_entropy  # local import to avoid a cycle

    tape = GradTape()
    out = forward(model, X, tape)
    losses = [cross_entropy(tape, lid, labels) for lid in out.logit_ids]
    L = cfg.layer_count
    weight_ids = [out.param_ids[f"layer{i}.w"] for i in range(L)]
    head_ids = [out.param_ids[f"head{i}.w"] for i in range(L)]
    probe_ids = weight_ids + head_ids

    single = [backward(tape, [losses[k]], probe_ids) for k in range(L)]

    report = {}
    for i in range(L - 1):
        s = model.layers[i].split
        g_own = single[i][weight_ids[i]]
        if np.any(g_own[:, :s] != 0.0):
            raise RoutingViolation(i, "a", "shared block updated by its own exit's loss")
        if not np.any(g_own[:, s:] != 0.0):
            raise RoutingViolation(i, "a", "exit-specific block missed its own exit's loss")
        deeper = [losses[k] for k in range(i + 1, L)]
        g_deep = backward(tape, deeper, [weight_ids[i]])[weight_ids[i]]
        if np.any(g_deep[:, s:] != 0.0):
            raise RoutingViolation(i, "b", "exit-specific block updated by a deeper loss")
        report[i] = {"a": "ok", "b": "ok"}
    for i in range(L):
        for k in range(L):
            g_head = single[k][head_ids[i]]
            nonzero = bool(np.any(g_head != 0.0))
            if nonzero != (k == i):
                raise RoutingViolation(
                    i, "c", f"head gradient {'present' if nonzero else 'missing'} under loss {k}"
                )
        report.setdefault(i, {})["c"] = "ok"
    return report
