"""Reverse-mode differentiation over a recorded tape.

The tape records one node per primitive op, each input edge carrying a
stop-gradient flag: a detached edge contributes its value to the forward
pass and exactly zero to the backward pass. Backward prunes dead paths
structurally, so a weight with no live route to any seeded loss receives an
exact zero gradient, never a rounded one.

Operation accounting follows the matrix-multiply-only convention: a product
of an m x k by a k x n matrix costs 2*m*k*n operations (multiply + add per
scalar term); activations, losses, bias adds and data movement cost zero.
Backward charges each computed gradient block at the same rate, and the
slice-aware rule computes only the live column sub-blocks of a gradient when
the producing operand is a concatenation with stop-gradient parts. That
pruning is what the reduced backward totals of the partitioned training mode
come from; it never changes a gradient value, only the count.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .errors import ContractError, DataError, GraphError, ShapeError

GradMap = dict  # parameter node id -> gradient array, same shape as the value


@dataclass(frozen=True)
class Detached:
    """Edge marker: forward value passes through, gradient does not."""

    node_id: int


def detach(node_id: int) -> Detached:
    """Wrap a node id so consumers receive zero gradient through this edge."""
    if isinstance(node_id, Detached):
        return node_id
    return Detached(node_id)


def _as_edge(ref) -> tuple[int, bool]:
    if isinstance(ref, Detached):
        return ref.node_id, True
    return int(ref), False


@dataclass
class TapeNode:
    id: int
    kind: str  # leaf | matmul | concat_cols | slice_cols | relu | add_bias | softmax_ce
    inputs: tuple[tuple[int, bool], ...]  # (node id, detached)
    value: np.ndarray
    requires_grad: bool = False
    meta: dict = field(default_factory=dict)


class GradTape:
    """Append-only operation record with an exact operation counter.

    ``pins`` maps an edge ``(consumer node id, input slot)`` to a baseline
    value; while set, a detached edge at that position feeds the pinned value
    into the forward computation instead of the live one. The finite
    difference oracle uses this to hold stop-gradient inputs constant across
    perturbed re-evaluations. Node ids are assigned densely in record order,
    so a deterministic builder produces identical edge keys on every run.
    """

    def __init__(self, pins: dict | None = None):
        self.nodes: list[TapeNode] = []
        self.forward_ops = 0
        self.backward_ops = 0
        self.pins = pins or {}
        self.op_log: list[tuple[str, int, str, int]] = []  # (phase, node id, kind, ops)

    # -- recording ---------------------------------------------------------

    def record(self, kind: str, inputs, value, requires_grad: bool = False, **meta) -> int:
        """Append a node; charge forward operations per the counting convention."""
        nid = len(self.nodes)
        edges = tuple(_as_edge(ref) for ref in inputs)
        for iid, _ in edges:
            if not (0 <= iid < nid):
                raise GraphError(f"input id {iid} not on tape (recording node {nid})")
        node = TapeNode(nid, kind, edges, value, requires_grad, meta)
        self.nodes.append(node)
        ops = 0
        if kind == "matmul":
            m, k = self.nodes[edges[0][0]].value.shape
            n = self.nodes[edges[1][0]].value.shape[1]
            ops = 2 * m * k * n
        self.forward_ops += ops
        if ops:
            self.op_log.append(("forward", nid, kind, ops))
        return nid

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def _edge_value(self, ref, slot: int) -> np.ndarray:
        iid, detached = _as_edge(ref)
        if detached:
            pinned = self.pins.get((len(self.nodes), slot))
            if pinned is not None:
                return pinned
        return self.nodes[iid].value

    def collect_detached_edge_values(self) -> dict:
        """Baseline values of every detached edge, keyed by (consumer id, slot)."""
        pins = {}
        for node in self.nodes:
            for slot, (iid, detached) in enumerate(node.inputs):
                if detached:
                    pins[(node.id, slot)] = self.nodes[iid].value.copy()
        return pins

    # -- op builders (compute the value, then record) -----------------------

    def leaf(self, value, requires_grad: bool = False) -> int:
        return self.record("leaf", [], tensor.as_tensor(value), requires_grad)

    def matmul(self, a_ref, b_ref) -> int:
        a = self._edge_value(a_ref, 0)
        b = self._edge_value(b_ref, 1)
        return self.record("matmul", [a_ref, b_ref], tensor.matmul(a, b))

    def concat_cols(self, a_ref, b_ref) -> int:
        a = self._edge_value(a_ref, 0)
        b = self._edge_value(b_ref, 1)
        value = tensor.concat_cols(a, b)
        return self.record("concat_cols", [a_ref, b_ref], value, split=a.shape[1])

    def slice_cols(self, t_ref, lo: int, hi: int) -> int:
        t = self._edge_value(t_ref, 0)
        return self.record("slice_cols", [t_ref], tensor.slice_cols(t, lo, hi), lo=lo, hi=hi)

    def relu(self, t_ref) -> int:
        return self.record("relu", [t_ref], tensor.relu(self._edge_value(t_ref, 0)))

    def add_bias(self, t_ref, bias_ref) -> int:
        t = self._edge_value(t_ref, 0)
        bias = self._edge_value(bias_ref, 1)
        if bias.shape != (1, t.shape[1]):
            raise ShapeError(f"bias shape {bias.shape} does not fit {t.shape}")
        return self.record("add_bias", [t_ref, bias_ref], t + bias)

    def softmax_ce(self, logits_ref, labels) -> int:
        """Mean cross-entropy of logits against integer labels (scalar node)."""
        logits = self._edge_value(logits_ref, 0)
        labels = np.asarray(labels)
        m, k = logits.shape
        if labels.shape != (m,):
            raise ShapeError(f"labels shape {labels.shape} does not fit logits {logits.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise DataError(f"labels out of range [0, {k})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        probs = np.exp(shifted - lse)
        nll = lse[:, 0] - shifted[np.arange(m), labels]
        value = np.array([[nll.mean()]])
        return self.record(
            "softmax_ce", [logits_ref], value, labels=labels.copy(), probs=probs
        )


def macs(tape: GradTape) -> tuple[int, int]:
    """(forward, backward) operation counts accumulated so far."""
    return tape.forward_ops, tape.backward_ops


def _live_col_ranges(tape, node, need, prune):
    """Column ranges of ``node``'s gradient worth computing.

    With pruning on and the node a concatenation, only parts reachable
    through non-detached edges from grad-needing inputs are returned.
    """
    cols = node.value.shape[1]
    if prune and node.kind == "concat_cols":
        split = node.meta["split"]
        bounds = [(0, split), (split, cols)]
        ranges = []
        for (iid, edge_detached), (lo, hi) in zip(node.inputs, bounds):
            if not edge_detached and need[iid] and hi > lo:
                ranges.append((lo, hi))
        return ranges
    return [(0, cols)] if cols else []


def backward(tape: GradTape, losses, params, prune: bool = True) -> GradMap:
    """Sum of the selected losses' gradients w.r.t. each parameter node.

    Each loss is seeded with a unit adjoint. Detached edges propagate
    nothing; nodes with no live path both to a seeded loss and from a
    requested parameter get no gradient storage at all. Every computed
    matmul gradient block is charged to the tape's backward counter.
    """
    nodes = tape.nodes
    n = len(nodes)
    loss_ids = list(losses)
    param_ids = list(params)
    for lid in loss_ids:
        if not (0 <= lid < n):
            raise GraphError(f"loss node {lid} not on tape")
        if nodes[lid].value.size != 1:
            raise ContractError(f"loss node {lid} is not scalar: shape {nodes[lid].value.shape}")
    for pid in param_ids:
        if not (0 <= pid < n):
            raise GraphError(f"parameter node {pid} not on tape")

    # Liveness: reached[i] - a seeded loss depends on node i through live
    # edges; useful[i] - node i depends on a requested parameter through
    # live edges. Gradients exist only where both hold.
    reached = [False] * n
    for lid in loss_ids:
        reached[lid] = True
    for node in reversed(nodes):
        if reached[node.id]:
            for iid, edge_detached in node.inputs:
                if not edge_detached:
                    reached[iid] = True
    useful = [False] * n
    param_set = set(param_ids)
    for node in nodes:
        useful[node.id] = node.id in param_set or any(
            not edge_detached and useful[iid] for iid, edge_detached in node.inputs
        )
    need = [reached[i] and useful[i] for i in range(n)]

    grads: dict[int, np.ndarray] = {}

    def accumulate(nid, value, cols=None):
        buf = grads.get(nid)
        if buf is None:
            buf = np.zeros_like(nodes[nid].value)
            grads[nid] = buf
        if cols is None:
            buf += value
        else:
            buf[:, cols[0] : cols[1]] += value

    def charge(nid, ops):
        tape.backward_ops += ops
        tape.op_log.append(("backward", nid, nodes[nid].kind, ops))

    for lid in loss_ids:
        accumulate(lid, np.ones_like(nodes[lid].value))

    for node in reversed(nodes):
        g = grads.get(node.id)
        if g is None:
            continue
        kind = node.kind
        if kind == "leaf":
            continue
        if kind == "matmul":
            (aid, a_det), (bid, b_det) = node.inputs
            a_val = nodes[aid].value
            b_val = nodes[bid].value
            if not a_det and need[aid]:
                for lo, hi in _live_col_ranges(tape, nodes[aid], need, prune):
                    block = tensor.matmul(g, b_val[lo:hi, :].T)
                    accumulate(aid, block, cols=(lo, hi))
                    charge(node.id, 2 * g.shape[0] * (hi - lo) * g.shape[1])
            if not b_det and need[bid]:
                for lo, hi in _live_col_ranges(tape, nodes[bid], need, prune):
                    block = tensor.matmul(a_val.T, g[:, lo:hi])
                    accumulate(bid, block, cols=(lo, hi))
                    charge(node.id, 2 * a_val.shape[1] * a_val.shape[0] * (hi - lo))
        elif kind == "concat_cols":
            split = node.meta["split"]
            bounds = [(0, split), (split, node.value.shape[1])]
            for (iid, edge_detached), (lo, hi) in zip(node.inputs, bounds):
                if not edge_detached and need[iid] and hi > lo:
                    accumulate(iid, g[:, lo:hi])
        elif kind == "slice_cols":
            iid, edge_detached = node.inputs[0]
            if not edge_detached and need[iid]:
                accumulate(iid, g, cols=(node.meta["lo"], node.meta["hi"]))
        elif kind == "relu":
            iid, edge_detached = node.inputs[0]
            if not edge_detached and need[iid]:
                accumulate(iid, g * (nodes[iid].value > 0.0))
        elif kind == "add_bias":
            (tid, t_det), (bid, b_det) = node.inputs
            if not t_det and need[tid]:
                accumulate(tid, g)
            if not b_det and need[bid]:
                accumulate(bid, g.sum(axis=0, keepdims=True))
        elif kind == "softmax_ce":
            iid, edge_detached = node.inputs[0]
            if not edge_detached and need[iid]:
                probs = node.meta["probs"]
                labels = node.meta["labels"]
                m = probs.shape[0]
                dz = probs.copy()
                dz[np.arange(m), labels] -= 1.0
                accumulate(iid, (g[0, 0] / m) * dz)
        else:
            raise GraphError(f"cannot differentiate node kind {kind!r}")

    out: GradMap = {}
    for pid in param_ids:
        out[pid] = grads.get(pid)
        if out[pid] is None:
            out[pid] = np.zeros_like(nodes[pid].value)
    return out


def detach_aware_fd_oracle(forward_fn, param: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient with detached edges pinned to baseline.

    ``forward_fn(tape) -> float`` must rebuild the graph on the given tape
    (reading ``param`` by reference) and return the total selected loss. The
    baseline pass records the value crossing every detached edge; perturbed
    passes replay those values, so the result matches reverse-mode autodiff
    with stop-gradient semantics up to O(step^2) by construction.
    """
    base_tape = GradTape()
    forward_fn(base_tape)
    pins = base_tape.collect_detached_edge_values()

    grad = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        orig = param[idx]
        param[idx] = orig + step
        loss_plus = forward_fn(GradTape(pins=pins))
        param[idx] = orig - step
        loss_minus = forward_fn(GradTape(pins=pins))
        param[idx] = orig
        grad[idx] = (loss_plus - loss_minus) / (2.0 * step)
    return grad
