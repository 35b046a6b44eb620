"""Network assembly: baseline, recursive, and fixed-unroll variants.

All three share one family: four convolutional stages (5x5 then 3x3
kernels, stride 1, same padding), each followed by activation, across-
channel normalization, 3x3 stride-2 overlapping max pooling, and dropout
after stages 1-3, with a single linear classifier head.  In the recursive
modes, stages 2-4 feed their own output back as extra input channels;
stage 1 stays a plain convolution by default, which is what lets a width-m
recursive network carry the same parameter count as a width-n baseline
near n = sqrt(2)*m (the 3x3 stages dominate: 18m^2 vs 9n^2 weights).

``count_parameters`` is the closed form; ``match_width`` searches it
exhaustively to pair comparable widths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from . import tensor as T
from .layers import ConvLayer, LinearLayer
from .recursive import (
    CfrpnConvLayer,
    ConvergenceConfig,
    IterationTrace,
    cfrpn_conv_forward,
)
from .tape import Parameter, Tape, TapeNode

MODES = ("baseline", "cfrpn", "fixed_unroll")
KERNEL_SIZES = (5, 3, 3, 3)
POOL = T.PoolSpec(3, 3, stride=2, padding=1)


@dataclass(frozen=True)
class ArchitectureConfig:
    mode: str = "baseline"
    widths: tuple[int, int, int, int] = (21, 21, 21, 21)
    num_classes: int = 10
    in_channels: int = 3
    image_hw: tuple[int, int] = (32, 32)
    unroll_depth: int = 3
    first_stage_recursive: bool = False
    dropout_rate: float = 0.5
    iteration_dropout: float = 0.0
    epsilon: float = 0.1
    max_iterations: int = 8
    per_batch: bool = False
    normalized_distance: bool = False
    lrn: T.LrnSpec = field(default_factory=T.LrnSpec)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "image_hw", tuple(int(s) for s in self.image_hw))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.widths) != len(KERNEL_SIZES):
            raise ValueError(f"exactly {len(KERNEL_SIZES)} stage widths required, got {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"stage widths must be positive, got {self.widths}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.mode == "fixed_unroll" and self.unroll_depth < 1:
            raise ValueError(f"unroll_depth must be >= 1, got {self.unroll_depth}")
        self.final_hw()  # trips on images too small for the pooling cascade

    @classmethod
    def uniform(cls, mode: str, width: int, **kw) -> "ArchitectureConfig":
        return cls(mode=mode, widths=(width,) * 4, **kw)

    def stage_is_recursive(self, index: int) -> bool:
        """index is 0-based."""
        if self.mode == "baseline":
            return False
        return index > 0 or self.first_stage_recursive

    def convergence(self) -> ConvergenceConfig:
        if self.mode == "fixed_unroll":
            return ConvergenceConfig(0.0, self.unroll_depth, self.per_batch,
                                     self.normalized_distance)
        return ConvergenceConfig(self.epsilon, self.max_iterations, self.per_batch,
                                 self.normalized_distance)

    def final_hw(self) -> tuple[int, int]:
        h, w = self.image_hw
        for _ in KERNEL_SIZES:
            h, w = POOL.out_hw(h, w)
            if h < 1 or w < 1:
                raise ValueError(f"image {self.image_hw} too small for 4 pooling stages")
        return h, w


@dataclass
class Stage:
    index: int  # 1-based
    conv: ConvLayer | CfrpnConvLayer
    dropout_rate: float

    @property
    def recursive(self) -> bool:
        return isinstance(self.conv, CfrpnConvLayer)


@dataclass
class Model:
    config: ArchitectureConfig
    stages: list[Stage]
    head: LinearLayer

    def parameters(self) -> list[Parameter]:
        out = []
        for stage in self.stages:
            out.extend(stage.conv.parameters())
        out.extend(self.head.parameters())
        return out

    def param_dict(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def forward(
        self,
        tape: Tape,
        x,
        training: bool = False,
        rng: np.random.Generator | None = None,
        depth_schedules: dict[int, np.ndarray] | None = None,
    ) -> tuple[TapeNode, dict[int, IterationTrace]]:
        """Returns (logits node, {stage index: trace}) for recursive stages."""
        cfg = self.config
        if training and rng is None and (cfg.dropout_rate > 0 or cfg.iteration_dropout > 0):
            raise ValueError("training forward with dropout needs an rng")
        h = x if isinstance(x, TapeNode) else tape.constant(T.as_feature_map(x))
        traces: dict[int, IterationTrace] = {}
        for stage in self.stages:
            if stage.recursive:
                schedule = depth_schedules.get(stage.index) if depth_schedules else None
                h, trace = cfrpn_conv_forward(
                    stage.conv, h, tape,
                    depth_schedule=schedule,
                    training=training,
                    iteration_dropout=cfg.iteration_dropout if training else 0.0,
                    rng=rng,
                )
                traces[stage.index] = trace
            else:
                h = ops.lrn(tape, ops.relu(tape, stage.conv.forward(tape, h)), cfg.lrn)
            h = ops.maxpool(tape, h, POOL)
            if training and stage.dropout_rate > 0.0:
                h = ops.dropout(tape, h, stage.dropout_rate, rng, training=True)
        n = h.value.shape[0]
        flat = ops.reshape(tape, h, (n, -1))
        return self.head.forward(tape, flat), traces


def build(config: ArchitectureConfig, seed: int, dtype=np.float32) -> Model:
    """Deterministic given (config, seed): one rng consumed in stage order."""
    rng = np.random.default_rng(seed)
    stages = []
    c_prev = config.in_channels
    for i, (width, k) in enumerate(zip(config.widths, KERNEL_SIZES)):
        name = f"stage{i + 1}"
        if config.stage_is_recursive(i):
            conv = CfrpnConvLayer.create(
                name, c_prev, width, k, k, rng,
                lrn=config.lrn, convergence=config.convergence(), dtype=dtype,
            )
        else:
            conv = ConvLayer.create(name, c_prev, width, k, k, rng, dtype=dtype)
        dropout = config.dropout_rate if i < len(config.widths) - 1 else 0.0
        stages.append(Stage(i + 1, conv, dropout))
        c_prev = width
    fh, fw = config.final_hw()
    head = LinearLayer.create("head", config.widths[-1] * fh * fw, config.num_classes,
                              rng, dtype=dtype)
    return Model(config, stages, head)


def count_parameters(config: ArchitectureConfig) -> int:
    """Closed-form trainable scalar count; matches tensor enumeration exactly."""
    total = 0
    c_prev = config.in_channels
    for i, (width, k) in enumerate(zip(config.widths, KERNEL_SIZES)):
        c_eff = c_prev + (width if config.stage_is_recursive(i) else 0)
        total += k * k * c_eff * width + width
        c_prev = width
    fh, fw = config.final_hw()
    total += config.num_classes * (config.widths[-1] * fh * fw) + config.num_classes
    return total


def match_width(baseline_width: int, template: ArchitectureConfig | None = None) -> int:
    """Recursive-mode width whose parameter count is nearest the baseline's.

    Exhaustive over [1, baseline_width]; ties go to the smaller width.
    """
    if baseline_width < 2:
        raise ValueError(f"baseline width must be >= 2, got {baseline_width}")
    template = template if template is not None else ArchitectureConfig()
    target = count_parameters(
        ArchitectureConfig.uniform("baseline", baseline_width,
                                   num_classes=template.num_classes,
                                   in_channels=template.in_channels,
                                   image_hw=template.image_hw)
    )
    best_m, best_diff = 1, None
    for m in range(1, baseline_width + 1):
        cfg = ArchitectureConfig.uniform("cfrpn", m,
                                         num_classes=template.num_classes,
                                         in_channels=template.in_channels,
                                         image_hw=template.image_hw,
                                         first_stage_recursive=template.first_stage_recursive)
        diff = abs(count_parameters(cfg) - target)
        if best_diff is None or diff < best_diff:
            best_m, best_diff = m, diff
    return best_m


# width pairs used throughout the benchmark study: (baseline n, recursive m)
REFERENCE_WIDTH_PAIRS = ((135, 96), (120, 85), (104, 74), (85, 60), (42, 30), (21, 15))


def mean_depths(traces: dict[int, IterationTrace]) -> dict[int, float]:
    return {idx: float(tr.t_star.mean()) for idx, tr in traces.items()}
