"""Recursive layers iterated to a fixed point with adaptive per-sample depth.

The dense form updates a state vector x(t) = f(alpha @ u + beta @ x(t-1) + b)
until consecutive states are closer than a threshold in Euclidean distance
or a hard iteration cap is hit.  The convolutional form replaces the two
matrices with one kernel over the channel-concatenation of a static input
u and the state: because convolution is linear in its input channels, the
kernel splits into an input block and a state block, and the input block's
contribution is computed once and reused by every iteration.

Stopping is decided per sample.  Samples whose states have converged are
frozen by select nodes while the rest of the batch keeps iterating, so
backward unrolls each sample's gradient to its own realized depth; shared
kernel gradients sum across the unrolled steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from . import tensor as T
from .layers import fan_in_normal
from .tape import Parameter, Tape, TapeNode

STOP_CONVERGED = "converged"
STOP_MAX = "max_reached"
STOP_SCHEDULED = "scheduled"


@dataclass(frozen=True)
class ConvergenceConfig:
    """Stopping rule for the fixed-point iteration.

    epsilon=0 disables early stopping (no distance is ever < 0), giving
    exactly max_iterations steps; that is the fixed-unroll mode.
    per_batch stops the whole batch at the first step where every sample's
    distance is below epsilon, instead of freezing samples one by one.
    normalized divides distances by sqrt(state size), making the threshold
    a root-mean-square criterion instead of a raw one.
    """

    epsilon: float = 0.1
    max_iterations: int = 8
    per_batch: bool = False
    normalized: bool = False

    def __post_init__(self):
        if not (self.epsilon >= 0.0):
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass
class IterationTrace:
    """Realized iteration record, one entry per sample.

    distances[i] holds d(2)..d(t_star[i]): the distance between consecutive
    states at each step sample i was still iterating.  A converged sample's
    last distance is below the threshold; a capped sample's need not be.
    """

    t_star: np.ndarray
    stop_reason: list[str]
    distances: list[list[float]]

    def __len__(self) -> int:
        return len(self.stop_reason)

    @property
    def final_distance(self) -> np.ndarray:
        return np.array(
            [d[-1] if d else math.nan for d in self.distances], dtype=np.float64
        )

    def check(self, config: ConvergenceConfig) -> None:
        """Raise if any entry violates the stopping rule it claims."""
        for i, reason in enumerate(self.stop_reason):
            t = int(self.t_star[i])
            if t > config.max_iterations:
                raise ValueError(f"sample {i}: t*={t} exceeds cap {config.max_iterations}")
            if reason == STOP_CONVERGED:
                if not self.distances[i] or not (self.distances[i][-1] < config.epsilon):
                    raise ValueError(f"sample {i}: marked converged but distance not below threshold")
            elif reason == STOP_MAX:
                if t != config.max_iterations:
                    raise ValueError(f"sample {i}: marked {STOP_MAX} but t*={t}")
            elif reason != STOP_SCHEDULED:
                raise ValueError(f"sample {i}: unknown stop reason {reason!r}")


def _merge_traces(parts: list[IterationTrace]) -> IterationTrace:
    return IterationTrace(
        t_star=np.concatenate([p.t_star for p in parts]),
        stop_reason=[r for p in parts for r in p.stop_reason],
        distances=[d for p in parts for d in p.distances],
    )


# ---------------------------------------------------------------------------
# Dense form


_DENSE_ACT = {"relu": T.relu, "sigmoid": T.sigmoid, "identity": lambda x: x}


@dataclass
class FrpnDenseLayer:
    """State update x(t) = f(alpha @ u + beta @ x(t-1) + b).

    alpha [n, m] maps the static input, beta [n, n] maps the previous
    state, b [n] is the bias; n is the state dimension.
    """

    alpha: Parameter
    beta: Parameter
    b: Parameter
    f: str = "relu"
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)

    def __post_init__(self):
        if self.f not in _DENSE_ACT:
            raise ValueError(f"unknown activation {self.f!r}")
        n, m = self.alpha.value.shape
        if self.beta.value.shape != (n, n):
            raise T.ShapeError(f"beta must be [{n}, {n}], got {self.beta.value.shape}")
        if self.b.value.shape != (n,):
            raise T.ShapeError(f"b must be [{n}], got {self.b.value.shape}")

    @classmethod
    def from_arrays(cls, alpha, beta, b, f: str = "relu", name: str = "frpn", **kw) -> "FrpnDenseLayer":
        return cls(
            Parameter(f"{name}.alpha", np.asarray(alpha, dtype=np.float64)),
            Parameter(f"{name}.beta", np.asarray(beta, dtype=np.float64)),
            Parameter(f"{name}.b", np.asarray(b, dtype=np.float64)),
            f,
            **kw,
        )

    @classmethod
    def create(cls, m: int, n: int, rng: np.random.Generator, f: str = "relu",
               name: str = "frpn", dtype=np.float64, **kw) -> "FrpnDenseLayer":
        return cls(
            Parameter(f"{name}.alpha", fan_in_normal(rng, (n, m), m, dtype=dtype)),
            Parameter(f"{name}.beta", fan_in_normal(rng, (n, n), n, dtype=dtype)),
            Parameter(f"{name}.b", np.zeros(n, dtype=dtype), decay_exempt=True),
            f,
            **kw,
        )

    def parameters(self) -> list[Parameter]:
        return [self.alpha, self.beta, self.b]


def frpn_dense_step(layer: FrpnDenseLayer, u: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
    """One state update on plain arrays."""
    u = np.asarray(u, dtype=np.float64)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    n, m = layer.alpha.value.shape
    if u.shape != (m,):
        raise T.ShapeError(f"input must be [{m}], got {u.shape}")
    if x_prev.shape != (n,):
        raise T.ShapeError(f"state must be [{n}], got {x_prev.shape}")
    pre = layer.alpha.value @ u + layer.beta.value @ x_prev + layer.b.value
    return _DENSE_ACT[layer.f](pre)


def frpn_dense_forward(
    layer: FrpnDenseLayer,
    u: np.ndarray,
    x0: np.ndarray,
    config: ConvergenceConfig | None = None,
    tape: Tape | None = None,
    collect: list | None = None,
):
    """Iterate the state from x0 until converged or capped.

    Distances are measured between consecutive states from step 2 on, so
    the earliest stop is t*=2.  With a tape, every step is recorded so the
    gradient unrolls through all realized iterations; the returned state is
    then a tape node instead of an array.
    """
    if config is None:
        config = layer.convergence

    if tape is None:
        x = np.asarray(x0, dtype=np.float64)
        step = lambda xp: frpn_dense_step(layer, u, xp)
        extract = lambda x: x
    else:
        u_node = tape.constant(np.asarray(u, dtype=np.float64)[None, :])
        x = tape.constant(np.asarray(x0, dtype=np.float64)[None, :])
        a_node = tape.parameter(layer.alpha)
        b_node = tape.parameter(layer.beta)
        bias_node = tape.parameter(layer.b)
        act = ops.ACTIVATIONS[layer.f]

        def step(xp):
            pre = ops.add(
                tape,
                ops.linear(tape, u_node, a_node, bias_node),
                ops.linear(tape, xp, b_node, None),
            )
            return act(tape, pre)

        extract = lambda node: node.value[0]

    dists: list[float] = []
    reason = STOP_MAX
    t = 1
    x = step(x)
    if collect is not None:
        collect.append(x)
    while t < config.max_iterations:
        t += 1
        x_new = step(x)
        if collect is not None:
            collect.append(x_new)
        d = T.euclidean_distance(extract(x_new), extract(x))
        if config.normalized:
            d /= math.sqrt(extract(x_new).size)
        dists.append(d)
        x = x_new
        if d < config.epsilon:
            reason = STOP_CONVERGED
            break
    trace = IterationTrace(np.array([t], dtype=np.int64), [reason], [dists])
    return x, trace


# ---------------------------------------------------------------------------
# Convolutional form


@dataclass
class CfrpnConvLayer:
    """Recursive convolution over concat(u, state) input channels.

    kernel is [c_state, c_in + c_state, kh, kw]: input channels [0, c_in)
    read the static input, [c_in, c_in + c_state) read the state.  The
    output channel count equals c_state, so the state shape never changes
    across iterations.  Activation then across-channel normalization are
    applied inside every iteration; distances are measured on the state as
    it is fed to the next iteration.
    """

    kernel: Parameter
    bias: Parameter
    c_in: int
    c_state: int
    spec: T.ConvSpec
    lrn: T.LrnSpec = field(default_factory=T.LrnSpec)
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)

    def __post_init__(self):
        expect = (self.c_state, self.c_in + self.c_state, self.spec.kernel_h, self.spec.kernel_w)
        if self.kernel.value.shape != expect:
            raise T.ShapeError(f"kernel must be {expect}, got {self.kernel.value.shape}")
        if self.bias.value.shape != (self.c_state,):
            raise T.ShapeError(f"bias must be [{self.c_state}], got {self.bias.value.shape}")
        if self.spec.stride != 1:
            raise ValueError("recursive convolution requires stride 1")

    @classmethod
    def create(
        cls,
        name: str,
        c_in: int,
        c_state: int,
        kernel_h: int,
        kernel_w: int,
        rng: np.random.Generator,
        lrn: T.LrnSpec | None = None,
        convergence: ConvergenceConfig | None = None,
        dtype=np.float32,
        gain: float = 1.0,
    ) -> "CfrpnConvLayer":
        if c_in < 1 or c_state < 1:
            raise ValueError(f"{name}: channel counts must be positive, got {c_in}, {c_state}")
        c_total = c_in + c_state
        kernel = fan_in_normal(
            rng, (c_state, c_total, kernel_h, kernel_w), c_total * kernel_h * kernel_w, gain, dtype
        )
        return cls(
            Parameter(f"{name}.kernel", kernel),
            Parameter(f"{name}.bias", np.zeros(c_state, dtype=dtype), decay_exempt=True),
            c_in,
            c_state,
            T.ConvSpec.same(kernel_h, kernel_w),
            lrn if lrn is not None else T.LrnSpec(),
            convergence if convergence is not None else ConvergenceConfig(),
        )

    def parameters(self) -> list[Parameter]:
        return [self.kernel, self.bias]


def cfrpn_conv_forward(
    layer: CfrpnConvLayer,
    u: TapeNode,
    tape: Tape,
    config: ConvergenceConfig | None = None,
    depth_schedule: np.ndarray | None = None,
    collect: list[TapeNode] | None = None,
    training: bool = False,
    iteration_dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[TapeNode, IterationTrace]:
    """Iterate x(t) = lrn(relu(conv(concat(u, x(t-1))))) from a zero state.

    The zero initial state makes step 1 a plain convolution of u; the input
    block's contribution is therefore computed once (with the bias) and
    added to the state block's convolution at every later step.  Sample i
    stops at the first step t >= 2 whose consecutive-state distance falls
    below config.epsilon, or at config.max_iterations; its state is frozen
    from then on while other samples continue.

    depth_schedule (per-sample positive step counts) replaces the distance
    rule with fixed realized depths, which makes the forward pass a fixed
    differentiable function of the parameters for gradient checking.
    iteration_dropout applies fresh dropout masks inside every step when
    training; default off so one forward pass is a deterministic map.
    """
    if config is None:
        config = layer.convergence
    n_batch, c_u = u.value.shape[0], u.value.shape[1]
    if c_u != layer.c_in:
        raise T.ShapeError(f"input has {c_u} channels, layer expects {layer.c_in}")
    k_node = tape.parameter(layer.kernel)
    b_node = tape.parameter(layer.bias)
    state_elems = layer.c_state * u.value.shape[2] * u.value.shape[3]

    if depth_schedule is not None:
        depth_schedule = np.asarray(depth_schedule, dtype=np.int64)
        if depth_schedule.shape != (n_batch,) or np.any(depth_schedule < 1):
            raise ValueError("depth_schedule needs one positive count per sample")
        max_t = int(depth_schedule.max())
    else:
        max_t = config.max_iterations

    def iterate(x: TapeNode | None) -> TapeNode:
        # state contribution; step 1 has a zero state so only the input block acts
        pre = ops.conv2d(tape, x, k_node, None, layer.spec,
                         in_slice=(layer.c_in, layer.c_in + layer.c_state)) if x is not None else None
        pre = pre_u if pre is None else ops.add(tape, pre_u, pre)
        out = ops.lrn(tape, ops.relu(tape, pre), layer.lrn)
        if iteration_dropout > 0.0:
            out = ops.dropout(tape, out, iteration_dropout, rng, training)
        return out

    pre_u = ops.conv2d(tape, u, k_node, b_node, layer.spec, in_slice=(0, layer.c_in))
    x = iterate(None)
    if collect is not None:
        collect.append(x)

    t_star = np.full(n_batch, max_t, dtype=np.int64)
    reasons = [STOP_SCHEDULED if depth_schedule is not None else STOP_MAX] * n_batch
    dists: list[list[float]] = [[] for _ in range(n_batch)]
    active = np.ones(n_batch, dtype=bool)
    if depth_schedule is not None:
        t_star = depth_schedule.copy()
        active = depth_schedule > 1

    t = 1
    while t < max_t and active.any():
        t += 1
        fresh = iterate(x)
        d = T.per_sample_distance(fresh.value, x.value)
        if config.normalized:
            d = d / math.sqrt(state_elems)
        for i in np.flatnonzero(active):
            dists[i].append(float(d[i]))
        if depth_schedule is not None:
            still = active & (depth_schedule > t)
        elif config.per_batch:
            if np.all(d < config.epsilon):
                t_star[:] = t
                reasons = [STOP_CONVERGED] * n_batch
                still = np.zeros(n_batch, dtype=bool)
            else:
                still = active
        else:
            done = active & (d < config.epsilon)
            for i in np.flatnonzero(done):
                t_star[i] = t
                reasons[i] = STOP_CONVERGED
            still = active & ~done
        x = fresh if active.all() else ops.select_samples(tape, active, fresh, x)
        if collect is not None:
            collect.append(x)
        active = still

    return x, IterationTrace(t_star, reasons, dists)


def unroll_explicit(layer: CfrpnConvLayer, u: TapeNode, depth: int, tape: Tape) -> TapeNode:
    """Exactly ``depth`` iterations, no convergence test (fixed-unroll mode)."""
    cfg = ConvergenceConfig(epsilon=0.0, max_iterations=depth,
                            per_batch=layer.convergence.per_batch,
                            normalized=layer.convergence.normalized)
    state, _ = cfrpn_conv_forward(layer, u, tape, config=cfg)
    return state
