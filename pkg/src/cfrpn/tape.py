"""Reverse-mode automatic differentiation over a recorded operation tape.

A forward pass appends :class:`TapeNode` entries to a :class:`Tape` in
execution order, so every node's inputs precede it.  Trainable tensors are
:class:`Parameter` objects registered once per tape; a parameter reused at
many tape positions (shared weights across unrolled iterations) receives
the sum of the per-use gradients.  ``backward`` performs one reverse sweep
and returns a gradient per registered parameter.

Backward rules are registered in :data:`VJP_REGISTRY` by the ops module;
each rule computes exact vector-Jacobian products from the node's saved
context without re-running the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class Parameter:
    """A named trainable tensor.  ``decay_exempt`` excludes it from weight decay."""

    name: str
    value: np.ndarray
    decay_exempt: bool = False

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)


@dataclass
class TapeNode:
    idx: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    ctx: dict = field(default_factory=dict)
    requires_grad: bool = False


# op name -> fn(node, grad, tape) -> list[(input idx, grad contribution)]
VJP_REGISTRY: dict[str, Callable] = {}


def register_vjp(op: str):
    def deco(fn):
        VJP_REGISTRY[op] = fn
        return fn

    return deco


class Tape:
    """Append-only operation record for one forward pass."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.params: dict[str, Parameter] = {}
        self._param_nodes: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def record(
        self,
        op: str,
        inputs: tuple[TapeNode, ...],
        value: np.ndarray,
        ctx: dict | None = None,
        requires_grad: bool | None = None,
    ) -> TapeNode:
        for inp in inputs:
            if inp is not self.nodes[inp.idx]:
                raise ValueError(f"input node {inp.idx} is not on this tape")
        if requires_grad is None:
            requires_grad = any(i.requires_grad for i in inputs)
        node = TapeNode(len(self.nodes), op, tuple(i.idx for i in inputs), value,
                        ctx or {}, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, value) -> TapeNode:
        return self.record("const", (), np.asarray(value), requires_grad=False)

    def parameter(self, p: Parameter) -> TapeNode:
        """Leaf node for a trainable tensor; one gradient accumulator per name."""
        if p.name in self.params:
            if self.params[p.name] is not p:
                raise ValueError(f"two distinct parameters named {p.name!r}")
            return self.nodes[self._param_nodes[p.name]]
        node = self.record("param", (), p.value, requires_grad=True)
        self.params[p.name] = p
        self._param_nodes[p.name] = node.idx
        return node


def backward(tape: Tape, loss: TapeNode, seed: float = 1.0) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss node.

    Returns {parameter name: gradient}; parameters not on the loss's
    ancestor path get zeros.  Accumulation order is the fixed reverse tape
    order, so repeated sweeps are bitwise identical.
    """
    if np.ndim(loss.value) != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {np.shape(loss.value)}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.idx] = np.asarray(seed, dtype=np.asarray(loss.value).dtype)
    for node in reversed(tape.nodes[: loss.idx + 1]):
        g = grads[node.idx]
        if g is None or not node.requires_grad or not node.inputs:
            continue
        for in_idx, contrib in VJP_REGISTRY[node.op](node, g, tape):
            if contrib is None or not tape.nodes[in_idx].requires_grad:
                continue
            if grads[in_idx] is None:
                grads[in_idx] = contrib
            else:
                grads[in_idx] = grads[in_idx] + contrib
    out = {}
    for name, p in tape.params.items():
        g = grads[tape._param_nodes[name]]
        out[name] = g if g is not None else np.zeros_like(p.value)
    return out


def grad_check(
    f: Callable[[Tape], TapeNode],
    params: list[Parameter],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` builds a scalar loss on a fresh tape from the current parameter
    values; it must be deterministic (dropout masks frozen).  Error per
    element is |analytic - numeric| / max(1, |numeric|).  Parameters should
    be float64 for the differences to resolve at h=1e-5.
    """
    t1 = Tape()
    loss1 = f(t1)
    t2 = Tape()
    loss2 = f(t2)
    if len(t1) != len(t2) or float(loss1.value) != float(loss2.value):
        raise ValueError("grad_check: f is not deterministic across forward passes")
    analytic = backward(t1, loss1)

    def loss_at() -> float:
        t = Tape()
        return float(f(t).value)

    worst = 0.0
    for p in params:
        a = analytic.get(p.name)
        if a is None:
            raise ValueError(f"grad_check: parameter {p.name!r} unused by f")
        flat = p.value.reshape(-1)
        aflat = np.asarray(a, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at()
            flat[i] = orig - h
            down = loss_at()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
