"""Finite-difference verification of every differentiable operation.

Each check builds a small double-precision instance, reduces the output
to a scalar through a fixed random weighting, and compares tape gradients
against central differences.  Inputs are drawn away from kinks (distinct
pool candidates, ReLU preactivations off zero) so the differences measure
the smooth branch actually taken.
"""

from __future__ import annotations

import numpy as np

from . import ops
from . import tensor as T
from .recursive import (
    CfrpnConvLayer,
    ConvergenceConfig,
    FrpnDenseLayer,
    cfrpn_conv_forward,
    frpn_dense_forward,
)
from .tape import Parameter, Tape, grad_check

TOLERANCE = 1e-5


def _weighted(tape: Tape, node, weights: np.ndarray):
    return ops.sum_all(tape, ops.mul(tape, node, tape.constant(weights)))


def check_conv2d(rng) -> float:
    x = Parameter("x", rng.normal(size=(2, 2, 5, 5)))
    k = Parameter("k", rng.normal(size=(3, 2, 3, 3)) * 0.5)
    b = Parameter("b", rng.normal(size=3) * 0.1)
    spec = T.ConvSpec.same(3, 3)
    w = rng.normal(size=(2, 3, 5, 5))

    def f(tape):
        out = ops.conv2d(tape, tape.parameter(x), tape.parameter(k), tape.parameter(b), spec)
        return _weighted(tape, out, w)

    return grad_check(f, [x, k, b])


def check_maxpool(rng) -> float:
    # distinct values spaced far beyond the probe step keep the argmax stable
    vals = rng.permutation(np.arange(2 * 2 * 6 * 6, dtype=np.float64)) * 0.05
    x = Parameter("x", vals.reshape(2, 2, 6, 6))
    spec = T.PoolSpec(3, 3, stride=2, padding=1)
    w = rng.normal(size=(2, 2, 3, 3))

    def f(tape):
        return _weighted(tape, ops.maxpool(tape, tape.parameter(x), spec), w)

    return grad_check(f, [x])


def check_relu(rng) -> float:
    mag = rng.uniform(0.2, 1.0, size=(3, 4))
    sign = rng.choice([-1.0, 1.0], size=(3, 4))
    x = Parameter("x", mag * sign)
    w = rng.normal(size=(3, 4))

    def f(tape):
        return _weighted(tape, ops.relu(tape, tape.parameter(x)), w)

    return grad_check(f, [x])


def check_lrn(rng) -> float:
    x = Parameter("x", rng.normal(size=(2, 7, 3, 3)))
    spec = T.LrnSpec()
    w = rng.normal(size=(2, 7, 3, 3))

    def f(tape):
        return _weighted(tape, ops.lrn(tape, tape.parameter(x), spec), w)

    return grad_check(f, [x])


def check_linear(rng) -> float:
    x = Parameter("x", rng.normal(size=(3, 4)))
    wgt = Parameter("w", rng.normal(size=(2, 4)) * 0.5)
    b = Parameter("b", rng.normal(size=2) * 0.1)
    w = rng.normal(size=(3, 2))

    def f(tape):
        out = ops.linear(tape, tape.parameter(x), tape.parameter(wgt), tape.parameter(b))
        return _weighted(tape, out, w)

    return grad_check(f, [x, wgt, b])


def check_softmax_xent(rng) -> float:
    logits = Parameter("logits", rng.normal(size=(4, 5)))
    labels = rng.integers(0, 5, size=4)

    def f(tape):
        node, _ = ops.softmax_cross_entropy(tape, tape.parameter(logits), labels)
        return node

    return grad_check(f, [logits])


def check_dropout(rng) -> float:
    x = Parameter("x", rng.normal(size=(3, 4, 2, 2)))
    mask = rng.random(size=(3, 4, 2, 2)) >= 0.4
    w = rng.normal(size=(3, 4, 2, 2))

    def f(tape):
        out = ops.dropout(tape, tape.parameter(x), 0.4, None, training=True, mask=mask)
        return _weighted(tape, out, w)

    return grad_check(f, [x])


def check_frpn_dense_forward(rng) -> float:
    layer = FrpnDenseLayer.from_arrays(
        rng.normal(size=(3, 2)) * 0.7,
        rng.normal(size=(3, 3)) * 0.5,
        rng.normal(size=3) * 0.3,
        f="sigmoid",
    )
    u = rng.normal(size=2)
    x0 = np.zeros(3)
    cfg = ConvergenceConfig(epsilon=0.0, max_iterations=4)
    w = rng.normal(size=(1, 3))

    def f(tape):
        state, _ = frpn_dense_forward(layer, u, x0, cfg, tape=tape)
        return _weighted(tape, state, w)

    return grad_check(f, layer.parameters())


def _cfrpn_instance(rng):
    layer = CfrpnConvLayer.create("rc", 2, 3, 3, 3, rng, dtype=np.float64)
    u = Parameter("u", rng.normal(size=(2, 2, 5, 5)) * 0.8)
    w = rng.normal(size=(2, 3, 5, 5))
    return layer, u, w


def check_cfrpn_conv_forward(rng) -> float:
    """Depths frozen at the t* the standard stopping rule realizes."""
    layer, u, w = _cfrpn_instance(rng)
    probe = Tape()
    _, trace = cfrpn_conv_forward(layer, probe.constant(u.value), probe)
    schedule = trace.t_star

    def f(tape):
        state, _ = cfrpn_conv_forward(layer, tape.parameter(u), tape,
                                      depth_schedule=schedule)
        return _weighted(tape, state, w)

    return grad_check(f, layer.parameters() + [u])


def check_cfrpn_conv_forward_mixed(rng) -> float:
    """Unequal per-sample depths exercise the freeze/select backward path."""
    layer, u, w = _cfrpn_instance(rng)
    schedule = np.array([2, 4])

    def f(tape):
        state, _ = cfrpn_conv_forward(layer, tape.parameter(u), tape,
                                      depth_schedule=schedule)
        return _weighted(tape, state, w)

    return grad_check(f, layer.parameters() + [u])


CHECKS = (
    ("conv2d", check_conv2d),
    ("maxpool", check_maxpool),
    ("relu", check_relu),
    ("lrn", check_lrn),
    ("linear", check_linear),
    ("softmax_xent", check_softmax_xent),
    ("dropout", check_dropout),
    ("frpn_dense_forward", check_frpn_dense_forward),
    ("cfrpn_conv_forward", check_cfrpn_conv_forward),
    ("cfrpn_conv_forward_mixed", check_cfrpn_conv_forward_mixed),
)


def run_all(seed: int = 0) -> list[tuple[str, float]]:
    return [(name, fn(np.random.default_rng([seed, i])))
            for i, (name, fn) in enumerate(CHECKS)]
