"""Differentiable operations: tensor kernels recorded as tape nodes.

Each function runs the forward kernel, appends a node carrying whatever
context its backward rule needs (argmax maps, dropout masks, normalization
denominators), and registers the matching VJP in the tape's registry.

``conv2d`` accepts an optional input-channel range of the kernel
parameter.  A layer whose kernel covers concatenated inputs can then be
computed as a sum of per-block convolutions (channel additivity) while the
kernel stays a single parameter; the backward rule scatters the block
gradient into the right slice of the full kernel gradient.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tape import Tape, TapeNode, register_vjp


def _unbroadcast_ones(g: np.ndarray, shape: tuple) -> np.ndarray:
    return np.broadcast_to(g, shape) if np.ndim(g) == 0 else g


# ---------------------------------------------------------------------------
# Arithmetic


def add(tape: Tape, a: TapeNode, b: TapeNode) -> TapeNode:
    if np.shape(a.value) != np.shape(b.value):
        raise T.ShapeError(f"add: shapes {np.shape(a.value)} != {np.shape(b.value)}")
    return tape.record("add", (a, b), a.value + b.value)


@register_vjp("add")
def _add_vjp(node, g, tape):
    return [(node.inputs[0], g), (node.inputs[1], g)]


def mul(tape: Tape, a: TapeNode, b: TapeNode) -> TapeNode:
    if np.shape(a.value) != np.shape(b.value):
        raise T.ShapeError(f"mul: shapes {np.shape(a.value)} != {np.shape(b.value)}")
    return tape.record("mul", (a, b), a.value * b.value)


@register_vjp("mul")
def _mul_vjp(node, g, tape):
    a, b = node.inputs
    return [(a, g * tape.nodes[b].value), (b, g * tape.nodes[a].value)]


def mul_const(tape: Tape, a: TapeNode, c) -> TapeNode:
    c = np.asarray(c)
    return tape.record("mul_const", (a,), a.value * c, {"c": c})


@register_vjp("mul_const")
def _mul_const_vjp(node, g, tape):
    return [(node.inputs[0], g * node.ctx["c"])]


def sum_all(tape: Tape, a: TapeNode) -> TapeNode:
    return tape.record("sum", (a,), np.asarray(a.value).sum())


@register_vjp("sum")
def _sum_vjp(node, g, tape):
    shape = np.shape(tape.nodes[node.inputs[0]].value)
    return [(node.inputs[0], np.full(shape, g, dtype=np.asarray(g).dtype))]


def reshape(tape: Tape, a: TapeNode, shape: tuple) -> TapeNode:
    return tape.record("reshape", (a,), a.value.reshape(shape))


@register_vjp("reshape")
def _reshape_vjp(node, g, tape):
    return [(node.inputs[0], g.reshape(tape.nodes[node.inputs[0]].value.shape))]


# ---------------------------------------------------------------------------
# Activations


def relu(tape: Tape, a: TapeNode) -> TapeNode:
    out = T.relu(a.value)
    return tape.record("relu", (a,), out, {"mask": a.value > 0})


@register_vjp("relu")
def _relu_vjp(node, g, tape):
    return [(node.inputs[0], g * node.ctx["mask"])]


def sigmoid(tape: Tape, a: TapeNode) -> TapeNode:
    out = T.sigmoid(a.value)
    return tape.record("sigmoid", (a,), out)


@register_vjp("sigmoid")
def _sigmoid_vjp(node, g, tape):
    y = node.value
    return [(node.inputs[0], g * y * (1.0 - y))]


def identity(tape: Tape, a: TapeNode) -> TapeNode:
    return a


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "identity": identity}


# ---------------------------------------------------------------------------
# Structure


def concat_channels(tape: Tape, a: TapeNode, b: TapeNode) -> TapeNode:
    out = T.concat_channels(a.value, b.value)
    return tape.record("concat", (a, b), out, {"ca": a.value.shape[1]})


@register_vjp("concat")
def _concat_vjp(node, g, tape):
    ca = node.ctx["ca"]
    return [
        (node.inputs[0], np.ascontiguousarray(g[:, :ca])),
        (node.inputs[1], np.ascontiguousarray(g[:, ca:])),
    ]


def select_samples(tape: Tape, mask: np.ndarray, fresh: TapeNode, prev: TapeNode) -> TapeNode:
    """Per-sample choice: output[n] = fresh[n] where mask[n] else prev[n].

    Freezes converged samples while the rest of the batch keeps iterating;
    backward routes each sample's gradient to the branch it actually took.
    """
    if fresh.value.shape != prev.value.shape:
        raise T.ShapeError(
            f"select_samples: shapes {fresh.value.shape} != {prev.value.shape}"
        )
    m = mask.reshape((-1,) + (1,) * (fresh.value.ndim - 1))
    out = np.where(m, fresh.value, prev.value)
    return tape.record("select", (fresh, prev), out, {"mask": m})


@register_vjp("select")
def _select_vjp(node, g, tape):
    m = node.ctx["mask"]
    return [(node.inputs[0], np.where(m, g, 0)), (node.inputs[1], np.where(m, 0, g))]


# ---------------------------------------------------------------------------
# Layers


def conv2d(
    tape: Tape,
    x: TapeNode,
    kernel: TapeNode,
    bias: TapeNode | None,
    spec: T.ConvSpec,
    in_slice: tuple[int, int] | None = None,
) -> TapeNode:
    """Convolution node.  ``in_slice=(lo, hi)`` consumes only kernel input
    channels [lo, hi); the kernel gradient lands in that slice."""
    k = kernel.value if in_slice is None else np.ascontiguousarray(
        kernel.value[:, in_slice[0] : in_slice[1]]
    )
    b = bias.value if bias is not None else None
    out, col = T.conv2d_forward(x.value, k, b, spec)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return tape.record(
        "conv2d", inputs, out,
        {"spec": spec, "in_slice": in_slice, "has_bias": bias is not None,
         "col": col},
    )


@register_vjp("conv2d")
def _conv2d_vjp(node, g, tape):
    x = tape.nodes[node.inputs[0]]
    kernel = tape.nodes[node.inputs[1]]
    spec, in_slice = node.ctx["spec"], node.ctx["in_slice"]
    k = kernel.value if in_slice is None else np.ascontiguousarray(
        kernel.value[:, in_slice[0] : in_slice[1]]
    )
    has_bias = node.ctx["has_bias"]
    dx, dk, db = T.conv2d_backward(
        g, x.value, k, spec, need_dx=x.requires_grad, need_db=has_bias,
        col=node.ctx["col"],
    )
    if in_slice is not None:
        full = np.zeros_like(kernel.value)
        full[:, in_slice[0] : in_slice[1]] = dk
        dk = full
    out = [(node.inputs[0], dx), (node.inputs[1], dk)]
    if has_bias:
        out.append((node.inputs[2], db))
    return out


def maxpool(tape: Tape, x: TapeNode, spec: T.PoolSpec) -> TapeNode:
    out, argmax = T.maxpool(x.value, spec)
    return tape.record("maxpool", (x,), out, {"spec": spec, "argmax": argmax,
                                              "x_shape": x.value.shape})


@register_vjp("maxpool")
def _maxpool_vjp(node, g, tape):
    dx = T.maxpool_backward(g, node.ctx["argmax"], node.ctx["x_shape"], node.ctx["spec"])
    return [(node.inputs[0], dx)]


def lrn(tape: Tape, x: TapeNode, spec: T.LrnSpec) -> TapeNode:
    out, s = T.lrn(x.value, spec)
    return tape.record("lrn", (x,), out, {"spec": spec, "s": s})


@register_vjp("lrn")
def _lrn_vjp(node, g, tape):
    x = tape.nodes[node.inputs[0]].value
    dx = T.lrn_backward(g, x, node.ctx["s"], node.ctx["spec"])
    return [(node.inputs[0], dx)]


def dropout(
    tape: Tape,
    x: TapeNode,
    rate: float,
    rng: np.random.Generator | None,
    training: bool,
    mask: np.ndarray | None = None,
) -> TapeNode:
    """Inverted dropout node; inference mode returns the input node untouched.

    A precomputed ``mask`` makes the op deterministic for gradient checks.
    """
    if not training or rate == 0.0:
        return x
    if mask is None:
        out, mask = T.dropout(x.value, rate, rng, training=True)
    else:
        out = x.value * (mask.astype(x.value.dtype) / (1.0 - rate))
    return tape.record("dropout", (x,), out, {"mask": mask, "rate": rate})


@register_vjp("dropout")
def _dropout_vjp(node, g, tape):
    scale = 1.0 / (1.0 - node.ctx["rate"])
    return [(node.inputs[0], g * (node.ctx["mask"].astype(g.dtype) * scale))]


def linear(tape: Tape, x: TapeNode, weight: TapeNode, bias: TapeNode | None) -> TapeNode:
    out = T.linear(x.value, weight.value, bias.value if bias is not None else None)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return tape.record("linear", inputs, out, {"has_bias": bias is not None})


@register_vjp("linear")
def _linear_vjp(node, g, tape):
    x = tape.nodes[node.inputs[0]].value
    w = tape.nodes[node.inputs[1]].value
    out = [(node.inputs[0], g @ w), (node.inputs[1], g.T @ x)]
    if node.ctx["has_bias"]:
        out.append((node.inputs[2], g.sum(axis=0)))
    return out


def softmax_cross_entropy(
    tape: Tape, logits: TapeNode, labels: np.ndarray
) -> tuple[TapeNode, np.ndarray]:
    """Scalar mean cross-entropy node; also returns the probabilities."""
    loss, probs = T.softmax_cross_entropy(logits.value, labels)
    node = tape.record(
        "softmax_xent", (logits,),
        np.asarray(loss, dtype=logits.value.dtype),
        {"probs": probs, "labels": np.asarray(labels)},
    )
    return node, probs


@register_vjp("softmax_xent")
def _softmax_xent_vjp(node, g, tape):
    probs, labels = node.ctx["probs"], node.ctx["labels"]
    n = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= np.asarray(g, dtype=probs.dtype) / n
    return [(node.inputs[0], dlogits)]
