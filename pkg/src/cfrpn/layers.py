"""Parameter-bearing layers: convolution and linear head, with fan-in init.

Kernels are drawn from a zero-mean normal with std = gain * sqrt(2 / fan_in)
(fan_in = c_in * kh * kw for conv kernels, in_features for linear weights);
biases start at zero and are exempt from weight decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from . import tensor as T
from .tape import Parameter, Tape, TapeNode


def fan_in_normal(
    rng: np.random.Generator,
    shape: tuple,
    fan_in: int,
    gain: float = 1.0,
    dtype=np.float32,
) -> np.ndarray:
    std = gain * math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype, copy=False)


@dataclass
class ConvLayer:
    """Same-padding stride-1 convolution; kernel [c_out, c_in, kh, kw]."""

    kernel: Parameter
    bias: Parameter
    spec: T.ConvSpec

    @classmethod
    def create(
        cls,
        name: str,
        c_in: int,
        c_out: int,
        kernel_h: int,
        kernel_w: int,
        rng: np.random.Generator,
        dtype=np.float32,
        gain: float = 1.0,
    ) -> "ConvLayer":
        if c_in < 1 or c_out < 1:
            raise ValueError(f"{name}: channel counts must be positive, got {c_in}, {c_out}")
        kernel = fan_in_normal(
            rng, (c_out, c_in, kernel_h, kernel_w), c_in * kernel_h * kernel_w, gain, dtype
        )
        bias = np.zeros(c_out, dtype=dtype)
        return cls(
            Parameter(f"{name}.kernel", kernel),
            Parameter(f"{name}.bias", bias, decay_exempt=True),
            T.ConvSpec.same(kernel_h, kernel_w),
        )

    def parameters(self) -> list[Parameter]:
        return [self.kernel, self.bias]

    def forward(self, tape: Tape, x: TapeNode) -> TapeNode:
        return ops.conv2d(
            tape, x, tape.parameter(self.kernel), tape.parameter(self.bias), self.spec
        )


@dataclass
class LinearLayer:
    """Dense layer; weight [out_features, in_features]."""

    weight: Parameter
    bias: Parameter

    @classmethod
    def create(
        cls,
        name: str,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        dtype=np.float32,
        gain: float = 1.0,
    ) -> "LinearLayer":
        if in_features < 1 or out_features < 1:
            raise ValueError(
                f"{name}: feature counts must be positive, got {in_features}, {out_features}"
            )
        weight = fan_in_normal(rng, (out_features, in_features), in_features, gain, dtype)
        bias = np.zeros(out_features, dtype=dtype)
        return cls(
            Parameter(f"{name}.weight", weight),
            Parameter(f"{name}.bias", bias, decay_exempt=True),
        )

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, tape: Tape, x: TapeNode) -> TapeNode:
        return ops.linear(tape, x, tape.parameter(self.weight), tape.parameter(self.bias))
