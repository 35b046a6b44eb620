"""Adam with weight decay, the training and evaluation loops, run metrics.

Decay is coupled by default (added to the gradient before the moment
updates) and never touches decay-exempt parameters (biases); a decoupled
variant is available behind a flag.  All updates are in-place and
sequential over parameters in registration order, so a whole run is
bitwise reproducible given the seed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from . import tensor as T
from .data import AugmentPolicy, Dataset, Normalizer, batches
from .models import Model, mean_depths
from .recursive import IterationTrace, _merge_traces
from .tape import Parameter, Tape, backward


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    decoupled: bool = False


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: list[Parameter]):
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}
        self.t = 0

    @classmethod
    def from_tables(cls, m: dict, v: dict, t: int) -> "AdamState":
        state = cls([])
        state.m, state.v, state.t = m, v, t
        return state


def adam_step(
    state: AdamState,
    params: list[Parameter],
    grads: dict[str, np.ndarray],
    config: AdamConfig,
) -> None:
    state.t += 1
    bc1 = 1.0 - config.beta1 ** state.t
    bc2 = 1.0 - config.beta2 ** state.t
    for p in params:
        g = np.asarray(grads[p.name])
        if not np.all(np.isfinite(g)):
            raise T.NumericError(f"non-finite gradient for parameter {p.name!r}")
        if g.shape != p.value.shape:
            raise T.ShapeError(
                f"gradient for {p.name!r} has shape {g.shape}, parameter {p.value.shape}"
            )
        if config.weight_decay != 0.0 and not p.decay_exempt:
            if config.decoupled:
                p.value -= (config.lr * config.weight_decay) * p.value
            else:
                g = g + config.weight_decay * p.value
        m, v = state.m[p.name], state.v[p.name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * np.square(g)
        p.value -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 10
    decoupled_decay: bool = False
    augment: AugmentPolicy | None = None


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    mean_depth: dict[int, float]
    wall_s: float


@dataclass
class RunMetrics:
    seed: int
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def final_val_acc(self) -> float:
        return self.history[-1].val_acc

    @property
    def best_train_acc(self) -> float:
        return max(r.train_acc for r in self.history)


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    mean_depth: dict[int, float]
    traces: dict[int, IterationTrace] | None = None


def _snapshot(params: list[Parameter]) -> dict[str, np.ndarray]:
    return {p.name: p.value.copy() for p in params}


def _restore(params: list[Parameter], snap: dict[str, np.ndarray]) -> None:
    for p in params:
        p.value[...] = snap[p.name]


def evaluate(
    model: Model,
    dataset: Dataset,
    batch_size: int = 256,
    normalizer: Normalizer | None = None,
    collect_traces: bool = False,
) -> EvalResult:
    """Inference-mode accuracy, mean loss, and per-stage depth statistics."""
    correct = 0
    loss_sum = 0.0
    stage_traces: dict[int, list[IterationTrace]] = {}
    for x, y in batches(dataset, batch_size, normalizer=normalizer):
        tape = Tape()
        logits, traces = model.forward(tape, x, training=False)
        loss, probs = T.softmax_cross_entropy(logits.value, y)
        loss_sum += loss * len(y)
        correct += int((probs.argmax(axis=1) == y).sum())
        for idx, tr in traces.items():
            stage_traces.setdefault(idx, []).append(tr)
    merged = {idx: _merge_traces(parts) for idx, parts in stage_traces.items()}
    return EvalResult(
        accuracy=correct / len(dataset),
        loss=loss_sum / len(dataset),
        mean_depth=mean_depths(merged),
        traces=merged if collect_traces else None,
    )


def train(
    model: Model,
    train_set: Dataset,
    val_set: Dataset,
    config: TrainConfig,
    seed: int,
    adam: AdamConfig | None = None,
    adam_state: AdamState | None = None,
    normalizer: Normalizer | None = None,
) -> RunMetrics:
    """Epoch loop: seeded shuffle, forward, backward, Adam, then evaluation.

    Normalization statistics come from the training split only.  A
    non-finite loss or gradient aborts the run with parameters rolled back
    to the end of the last completed epoch.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    shuffle_rng, dropout_rng, augment_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    ]
    if normalizer is None:
        normalizer = Normalizer.fit(train_set)
    params = model.parameters()
    if adam is None:
        adam = AdamConfig(lr=config.lr, weight_decay=config.weight_decay,
                          decoupled=config.decoupled_decay)
    state = adam_state if adam_state is not None else AdamState(params)
    metrics = RunMetrics(seed)
    last_good = _snapshot(params)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        loss_sum = 0.0
        correct = 0
        try:
            for x, y in batches(train_set, config.batch_size, rng=shuffle_rng,
                                shuffle=True, normalizer=normalizer,
                                augment=config.augment, augment_rng=augment_rng):
                tape = Tape()
                logits, _ = model.forward(tape, x, training=True, rng=dropout_rng)
                loss_node, probs = ops.softmax_cross_entropy(tape, logits, y)
                loss = float(loss_node.value)
                if not math.isfinite(loss):
                    raise T.NumericError(f"loss diverged to {loss} in epoch {epoch}")
                grads = backward(tape, loss_node)
                adam_step(state, params, grads, adam)
                loss_sum += loss * len(y)
                correct += int((probs.argmax(axis=1) == y).sum())
        except T.NumericError:
            _restore(params, last_good)
            raise
        val = evaluate(model, val_set, max(config.batch_size, 256), normalizer)
        metrics.history.append(EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / len(train_set),
            train_acc=correct / len(train_set),
            val_acc=val.accuracy,
            mean_depth=val.mean_depth,
            wall_s=time.perf_counter() - t0,
        ))
        last_good = _snapshot(params)
    return metrics
