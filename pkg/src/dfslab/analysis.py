"""Closed-form operation models, exact count verification, gradient-conflict
diagnostics, per-exit inference cost profiles and budgeted batch evaluation.

The closed forms assume the square benchmark network: batch, feature and
class dimensions all equal N, every layer and head an N x N matrix, no bias.
One training step of the joint wiring then costs 4LN^3 forward and
(8L-2)N^3 backward operations; the partitioned-and-referencing wiring keeps
the forward cost and cuts backward to 6LN^3 regardless of the split ratio.
``verify_counts`` rebuilds that network on the tape and demands integer
equality between measured and predicted counts.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import dfs_net
from .autograd import GradTape, backward, macs
from .data import Dataset
from .errors import AccountingViolation, BudgetError, ConfigError, RoutingViolation
from .tensor import RngStream, softmax_rows
from .train import cross_entropy

_VERIFY_STREAM = 7


def closed_form(layers: int, width: int, mode: str) -> tuple[int, int]:
    """(forward, backward) operation counts for one square-network step."""
    if layers < 1 or width < 1:
        raise ConfigError(f"need layers >= 1 and width >= 1, got {layers}, {width}")
    n3 = width**3
    forward = 4 * layers * n3
    if mode == "joint":
        return forward, (8 * layers - 2) * n3
    if mode == "dfs":
        return forward, 6 * layers * n3
    raise ConfigError(f"closed_form covers joint and dfs, got {mode!r}")


def reduction(layers: int) -> float:
    """Fraction of per-step operations saved versus joint training: 1 - 10L/(12L-2)."""
    if layers < 1:
        raise ConfigError(f"need layers >= 1, got {layers}")
    return 1.0 - (10.0 * layers) / (12.0 * layers - 2.0)


@dataclass(frozen=True)
class AccountingModel:
    layers: int
    width: int
    beta: float = 0.5
    mode: str = "dfs"

    def validate(self) -> None:
        if self.layers < 2 or self.width < 2:
            raise ConfigError(f"need layers >= 2 and width >= 2, got {self.layers}, {self.width}")
        if self.mode not in ("joint", "dfs"):
            raise ConfigError(f"mode must be joint or dfs, got {self.mode!r}")
        shared = self.beta * self.width
        if abs(shared - round(shared)) > 1e-9 or not (1 <= round(shared) <= self.width - 1):
            raise ConfigError(
                f"beta*width must be an integer in [1, width-1] for exact-count runs, "
                f"got {self.beta} * {self.width} = {shared}"
            )

    def closed_form(self) -> tuple[int, int]:
        return closed_form(self.layers, self.width, self.mode)


def _square_counts(spec: AccountingModel) -> tuple[int, int]:
    """Measured (forward, backward) ops for one step of the square network."""
    n = spec.width
    cfg = dfs_net.ModelConfig(
        widths=(n,) * spec.layers,
        input_dim=n,
        classes=n,
        beta=spec.beta,
        mode=spec.mode,
        bias_enabled=False,
        seed=0,
    )
    model = dfs_net.build(cfg)
    rng = RngStream(0, _VERIFY_STREAM)
    X = rng.normal(n, n)
    Y = rng.integers(0, n, n)
    tape = GradTape()
    out = dfs_net.forward(model, X, tape)
    losses = [cross_entropy(tape, lid, Y) for lid in out.logit_ids]
    backward(tape, losses, list(out.param_ids.values()))
    return macs(tape)


@dataclass
class CountReport:
    layers: int
    width: int
    beta: float
    modes: dict = field(default_factory=dict)  # mode -> counts + match flags

    @property
    def all_match(self) -> bool:
        return all(m["forward_match"] and m["backward_match"] for m in self.modes.values())

    def to_json(self) -> str:
        return json.dumps(
            {"layers": self.layers, "width": self.width, "beta": self.beta, "modes": self.modes},
            indent=2,
            sort_keys=True,
        )


def verify_counts(layers: int, width: int, beta: float = 0.5) -> CountReport:
    """Assert measured == closed-form counts, integer-exactly, for both modes."""
    report = CountReport(layers=layers, width=width, beta=beta)
    for mode in ("joint", "dfs"):
        spec = AccountingModel(layers=layers, width=width, beta=beta, mode=mode)
        spec.validate()
        want_fwd, want_bwd = spec.closed_form()
        got_fwd, got_bwd = _square_counts(spec)
        report.modes[mode] = {
            "closed_forward": want_fwd,
            "measured_forward": got_fwd,
            "forward_match": got_fwd == want_fwd,
            "closed_backward": want_bwd,
            "measured_backward": got_bwd,
            "backward_match": got_bwd == want_bwd,
        }
    if not report.all_match:
        raise AccountingViolation(
            f"operation counts disagree for L={layers}, N={width}, beta={beta}:\n"
            + report.to_json()
        )
    return report


# -- gradient conflict -------------------------------------------------------

@dataclass
class BlockConflict:
    name: str
    sources: list[int]  # 1-based exits whose loss reaches this block
    cosines: dict  # (k, j) 1-based loss pair -> cosine
    negative_pairs: int
    undefined_pairs: int


@dataclass
class ConflictReport:
    mode: str
    blocks: list[BlockConflict] = field(default_factory=list)

    def to_json(self) -> str:
        payload = [
            {
                "name": b.name,
                "sources": b.sources,
                "cosines": {f"{k},{j}": v for (k, j), v in b.cosines.items()},
                "negative_pairs": b.negative_pairs,
                "undefined_pairs": b.undefined_pairs,
            }
            for b in self.blocks
        ]
        return json.dumps({"mode": self.mode, "blocks": payload}, indent=2, sort_keys=True)


def gradient_conflict_report(model: dfs_net.Model, X, Y) -> ConflictReport:
    """Pairwise cosines between per-loss gradients of every weight block.

    Runs one backward pass per exit loss. In dfs mode every exit-specific
    block and every head must have exactly one contributing loss; a second
    source is a routing violation.
    """
    cfg = model.config
    tape = GradTape()
    out = dfs_net.forward(model, X, tape)
    losses = [cross_entropy(tape, lid, Y) for lid in out.logit_ids]
    L = cfg.layer_count
    weight_ids = [out.param_ids[f"layer{i}.w"] for i in range(L)]
    head_ids = [out.param_ids[f"head{i}.w"] for i in range(L)]
    per_loss = [backward(tape, [losses[k]], weight_ids + head_ids) for k in range(L)]

    def block_views(k):
        views = []
        for i in range(L):
            g = per_loss[k][weight_ids[i]]
            split = model.layers[i].split
            if split < g.shape[1]:
                views.append((f"layer{i}.w+", g[:, :split]))
                views.append((f"layer{i}.w-", g[:, split:]))
            else:
                views.append((f"layer{i}.w", g))
        for i in range(L):
            views.append((f"head{i}.w", per_loss[k][head_ids[i]]))
        return views

    views_per_loss = [block_views(k) for k in range(L)]
    names = [name for name, _ in views_per_loss[0]]
    report = ConflictReport(mode=cfg.mode)
    for idx, name in enumerate(names):
        vecs = [views_per_loss[k][idx][1].ravel() for k in range(L)]
        sources = [k + 1 for k, v in enumerate(vecs) if np.any(v != 0.0)]
        cosines, negative, undefined = {}, 0, 0
        for k in range(L):
            for j in range(k + 1, L):
                a, b = vecs[k], vecs[j]
                na, nb = np.linalg.norm(a), np.linalg.norm(b)
                if na == 0.0 or nb == 0.0:
                    undefined += 1
                    continue
                cos = float(a @ b / (na * nb))
                cosines[(k + 1, j + 1)] = cos
                negative += cos < 0.0
        report.blocks.append(
            BlockConflict(name, sources, cosines, negative, undefined)
        )
        if cfg.mode == "dfs" and (name.endswith(".w-") or name.startswith("head")) and len(sources) != 1:
            raise RoutingViolation(
                name, "sources", f"expected exactly one gradient source, got {sources}"
            )
    return report


# -- inference cost and budgeted evaluation ----------------------------------

@dataclass
class CostProfile:
    per_exit: list[int]  # cumulative ops to produce exit i's logits

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.per_exit, self.per_exit[1:])):
            raise ConfigError(f"cost profile must increase strictly: {self.per_exit}")


def inference_cost_profile(config: dfs_net.ModelConfig, batch: int = 1) -> CostProfile:
    """Cumulative forward cost through layer i plus head i, 2*m*k*n per matmul."""
    layer_plans, head_feats = dfs_net.plan_shapes(config)
    costs = []
    cum = 0
    for (in_dim, out_dim, _), feat in zip(layer_plans, head_feats):
        cum += 2 * batch * in_dim * out_dim
        costs.append(cum + 2 * batch * feat * config.classes)
    return CostProfile(per_exit=costs)


@dataclass
class BudgetResult:
    budget: float
    threshold: float
    avg_cost: float
    top1: float
    histogram: list[int]  # samples leaving at each exit


def _exit_choice(confidences: np.ndarray, threshold: float) -> np.ndarray:
    """First exit with confidence >= threshold, else the deepest exit."""
    hits = confidences >= threshold
    first = hits.argmax(axis=1)
    return np.where(hits.any(axis=1), first, confidences.shape[1] - 1)


def _avg_cost(confidences: np.ndarray, costs: np.ndarray, threshold: float) -> float:
    return float(costs[_exit_choice(confidences, threshold)].mean())


def threshold_search(confidences: np.ndarray, costs, budget: float,
                     hi: float = 1.0, iters: int = 64) -> float:
    """Largest confidence threshold in [0, hi] whose average cost fits the budget.

    Average cost is non-decreasing in the threshold, so plain bisection
    converges; 64 halvings pin the boundary to machine resolution.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if _avg_cost(confidences, costs, 0.0) > budget:
        raise BudgetError(f"budget {budget} below the cheapest exit cost {costs[0]}")
    if _avg_cost(confidences, costs, hi) <= budget:
        return hi
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _avg_cost(confidences, costs, mid) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


def _exit_statistics(model: dfs_net.Model, dataset: Dataset):
    out = dfs_net.forward(model, dataset.X, GradTape())
    conf = np.column_stack([softmax_rows(z).max(axis=1) for z in out.logits])
    preds = np.column_stack([z.argmax(axis=1) for z in out.logits])
    return conf, preds


def budgeted_eval(model: dfs_net.Model, calibration: Dataset, evaluation: Dataset,
                  budget: float) -> BudgetResult:
    """Confidence-thresholded early exit under a hard average-cost budget.

    The threshold is calibrated on the calibration split; if the evaluation
    split's measured cost still exceeds the budget (possible when the two
    splits differ), the threshold is tightened against the evaluation costs
    so the reported average cost never breaks the contract.
    """
    costs = np.asarray(inference_cost_profile(model.config).per_exit, dtype=np.float64)
    if budget < costs[0]:
        raise BudgetError(f"budget {budget} below the cheapest exit cost {costs[0]}")
    calib_conf, _ = _exit_statistics(model, calibration)
    threshold = threshold_search(calib_conf, costs, budget)
    eval_conf, eval_preds = _exit_statistics(model, evaluation)
    if _avg_cost(eval_conf, costs, threshold) > budget:
        threshold = threshold_search(eval_conf, costs, budget, hi=threshold)
    exits = _exit_choice(eval_conf, threshold)
    picked = eval_preds[np.arange(evaluation.n), exits]
    histogram = np.bincount(exits, minlength=len(costs)).tolist()
    return BudgetResult(
        budget=float(budget),
        threshold=float(threshold),
        avg_cost=float(costs[exits].mean()),
        top1=float((picked == evaluation.Y).mean()),
        histogram=histogram,
    )
