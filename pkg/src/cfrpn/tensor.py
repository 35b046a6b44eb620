"""Dense NCHW tensor kernels: convolution, pooling, activation, normalization.

Feature maps are plain numpy arrays in [batch, channels, height, width]
layout, C-contiguous (row-major over (n, c, h, w)), dtype float32 or
float64.  Every kernel is a pure function: it never mutates its inputs and
returns freshly allocated arrays of the same dtype.  Operations that can
produce overflow (convolution, linear, LRN, softmax) verify the result is
finite and raise :class:`NumericError` otherwise.

Each forward kernel that needs one has a matching ``*_backward`` computing
the exact vector-Jacobian product from saved forward context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent; the message names the offending axis."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    # a float64 sum of finite float32 data cannot overflow, while any NaN or
    # Inf propagates into it; one pass beats scanning with isfinite twice
    if not math.isfinite(float(arr.sum(dtype=np.float64))):
        raise NumericError(f"{name}: non-finite values in result")
    return arr


def as_feature_map(x, dtype=None) -> np.ndarray:
    """Validate/convert ``x`` to a C-contiguous rank-4 [N,C,H,W] array."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 [N,C,H,W] array, got rank {arr.ndim}")
    return arr


# ---------------------------------------------------------------------------
# Operation specs


@dataclass(frozen=True)
class ConvSpec:
    """Kernel extents, stride and symmetric per-axis zero padding."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad_h: int = 0
    pad_w: int = 0

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError("ConvSpec: kernel extents must be positive")
        if self.stride < 1:
            raise ShapeError("ConvSpec: stride must be positive")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ShapeError("ConvSpec: padding must be non-negative")

    @classmethod
    def same(cls, kernel_h: int, kernel_w: int) -> "ConvSpec":
        """Stride-1 spatial-preserving padding; requires odd kernel extents."""
        if kernel_h % 2 == 0 or kernel_w % 2 == 0:
            raise ShapeError("same padding requires odd kernel extents")
        return cls(kernel_h, kernel_w, 1, (kernel_h - 1) // 2, (kernel_w - 1) // 2)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.pad_h - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.pad_w - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output extent < 1 for input {h}x{w} with {self}"
            )
        return oh, ow


@dataclass(frozen=True)
class PoolSpec:
    """Max-pooling window, stride and symmetric padding."""

    window_h: int
    window_w: int
    stride: int
    padding: int = 0

    def __post_init__(self):
        if self.window_h < 1 or self.window_w < 1:
            raise ShapeError("PoolSpec: window extents must be positive")
        if self.stride < 1:
            raise ShapeError("PoolSpec: stride must be positive")
        if self.padding < 0:
            raise ShapeError("PoolSpec: padding must be non-negative")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.window_h > h + 2 * self.padding or self.window_w > w + 2 * self.padding:
            raise ShapeError(
                f"pool window {self.window_h}x{self.window_w} larger than padded "
                f"input {h + 2 * self.padding}x{w + 2 * self.padding}"
            )
        oh = (h + 2 * self.padding - self.window_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.window_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"pool output extent < 1 for input {h}x{w} with {self}")
        return oh, ow


@dataclass(frozen=True)
class LrnSpec:
    """Across-channel local response normalization constants.

    out(c) = in(c) / (k + (alpha/n) * sum of in(c')^2 over the window)^beta
    with the window of ``n`` channels centered on ``c`` and clipped at the
    channel boundaries.  ``k > 0`` keeps the denominator away from zero.
    """

    n: int = 5
    k: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if self.n < 1 or self.n % 2 == 0:
            raise ShapeError("LrnSpec: neighborhood n must be a positive odd integer")
        if self.k <= 0:
            raise ShapeError("LrnSpec: k must be > 0")


# ---------------------------------------------------------------------------
# im2col plumbing


def im2col(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, int, int]:
    """Unfold [N,C,H,W] into patch columns [N, C*kh*kw, OH*OW].

    The feature axis is ordered (c, kh, kw) row-major, so columns for
    channel c occupy a contiguous block -- channel-concatenated inputs
    unfold into concatenated column blocks.
    """
    n, c, h, w = x.shape
    oh, ow = spec.out_hw(h, w)
    s, kh, kw = spec.stride, spec.kernel_h, spec.kernel_w
    if spec.pad_h or spec.pad_w:
        xp = np.pad(x, ((0, 0), (0, 0), (spec.pad_h, spec.pad_h), (spec.pad_w, spec.pad_w)))
    else:
        xp = x
    col = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for y in range(kh):
        for xx in range(kw):
            col[:, :, y, xx] = xp[:, :, y : y + s * oh : s, xx : xx + s * ow : s]
    return col.reshape(n, c * kh * kw, oh * ow), oh, ow


def col2im_add(dcol: np.ndarray, x_shape: tuple, spec: ConvSpec) -> np.ndarray:
    """Fold patch-column gradients [N, C*kh*kw, OH*OW] back, summing overlaps."""
    n, c, h, w = x_shape
    oh, ow = spec.out_hw(h, w)
    s, kh, kw = spec.stride, spec.kernel_h, spec.kernel_w
    dcol = dcol.reshape(n, c, kh, kw, oh, ow)
    dxp = np.zeros((n, c, h + 2 * spec.pad_h, w + 2 * spec.pad_w), dtype=dcol.dtype)
    for y in range(kh):
        for xx in range(kw):
            dxp[:, :, y : y + s * oh : s, xx : xx + s * ow : s] += dcol[:, :, y, xx]
    if spec.pad_h or spec.pad_w:
        return np.ascontiguousarray(
            dxp[:, :, spec.pad_h : spec.pad_h + h, spec.pad_w : spec.pad_w + w]
        )
    return dxp


# ---------------------------------------------------------------------------
# Convolution


def conv2d_forward(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None,
    spec: ConvSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Cross-correlation of [N,C,H,W] with kernel [c_out, c_in, kh, kw].

    Padding is zero-fill; no kernel flip.  The reduction order over one
    output element is fixed, so results are reproducible bit for bit.
    Returns (output, patch columns); the columns can be fed back to
    ``conv2d_backward`` to avoid unfolding the input twice.
    """
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input channels {c} != kernel c_in {c_in}")
    if (kh, kw) != (spec.kernel_h, spec.kernel_w):
        raise ShapeError(
            f"conv2d: kernel spatial {kh}x{kw} != spec {spec.kernel_h}x{spec.kernel_w}"
        )
    if kernel.dtype != x.dtype:
        raise ShapeError(f"conv2d: kernel dtype {kernel.dtype} != input dtype {x.dtype}")
    col, oh, ow = im2col(x, spec)
    kmat = kernel.reshape(c_out, c_in * kh * kw)
    out = np.matmul(kmat, col).reshape(n, c_out, oh, ow)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        out += bias[None, :, None, None]
    return check_finite("conv2d", out), col


def conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None,
    spec: ConvSpec,
) -> np.ndarray:
    return conv2d_forward(x, kernel, bias, spec)[0]


def conv2d_backward(
    g: np.ndarray,
    x: np.ndarray,
    kernel: np.ndarray,
    spec: ConvSpec,
    need_dx: bool = True,
    need_db: bool = True,
    col: np.ndarray | None = None,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray | None]:
    """VJP of conv2d: returns (dx, dkernel, dbias).

    ``col`` accepts the patch columns saved from the forward pass; without
    them the input is unfolded again.
    """
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    if col is None:
        col, oh, ow = im2col(x, spec)
    else:
        oh, ow = spec.out_hw(h, w)
    gmat = g.reshape(n, c_out, oh * ow)
    # batched gemm against the transposed columns, then reduce over batch
    dkernel = np.matmul(gmat, col.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    db = gmat.sum(axis=(0, 2)) if need_db else None
    dx = None
    if need_dx:
        kmat = kernel.reshape(c_out, c_in * kh * kw)
        dcol = np.matmul(kmat.T, gmat)
        dx = col2im_add(dcol, x.shape, spec)
    return dx, dkernel, db


# ---------------------------------------------------------------------------
# Pooling


def maxpool(x: np.ndarray, spec: PoolSpec) -> tuple[np.ndarray, np.ndarray]:
    """Max over sliding windows; returns (output, argmax map).

    Padded positions are -inf so they never win.  Ties resolve to the first
    window position in (h, w) scan order; the argmax map indexes window
    cells and drives the backward routing.
    """
    n, c, h, w = x.shape
    oh, ow = spec.out_hw(h, w)
    s, wh, ww, p = spec.stride, spec.window_h, spec.window_w, spec.padding
    if p:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    else:
        xp = x
    win = np.empty((n, c, oh, ow, wh, ww), dtype=x.dtype)
    for y in range(wh):
        for xx in range(ww):
            win[:, :, :, :, y, xx] = xp[:, :, y : y + s * oh : s, xx : xx + s * ow : s]
    flat = win.reshape(n, c, oh, ow, wh * ww)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    if not np.isfinite(out).all():
        raise ShapeError("maxpool: a window contained only padded positions")
    return out, argmax


def maxpool_backward(
    g: np.ndarray, argmax: np.ndarray, x_shape: tuple, spec: PoolSpec
) -> np.ndarray:
    """Route each output gradient to its recorded argmax input position."""
    n, c, h, w = x_shape
    oh, ow = spec.out_hw(h, w)
    s, wh, ww, p = spec.stride, spec.window_h, spec.window_w, spec.padding
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
    for idx in range(wh * ww):
        y, xx = divmod(idx, ww)
        contrib = np.where(argmax == idx, g, 0)
        dxp[:, :, y : y + s * oh : s, xx : xx + s * ow : s] += contrib
    if p:
        return np.ascontiguousarray(dxp[:, :, p : p + h, p : p + w])
    return dxp


# ---------------------------------------------------------------------------
# Elementwise / normalization


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _channel_window_sum(x: np.ndarray, n: int) -> np.ndarray:
    """Sum over the size-n channel window centered per channel, clipped."""
    c = x.shape[1]
    half = n // 2
    out = x.copy()
    for d in range(1, half + 1):
        out[:, d:] += x[:, : c - d]
        out[:, : c - d] += x[:, d:]
    return out


def lrn(x: np.ndarray, spec: LrnSpec) -> tuple[np.ndarray, np.ndarray]:
    """Across-channel divisive normalization; returns (output, denominator base).

    The denominator base s = k + (alpha/n) * windowed sum of squares is the
    saved context for the backward pass.
    """
    sq = _channel_window_sum(x * x, spec.n)
    s = spec.k + (spec.alpha / spec.n) * sq
    out = x * np.power(s, -spec.beta)
    return check_finite("lrn", out), s


def lrn_backward(g: np.ndarray, x: np.ndarray, s: np.ndarray, spec: LrnSpec) -> np.ndarray:
    # d out_c / d x_j = delta_cj * s_c^-b - 2b(alpha/n) x_c x_j s_c^-(b+1) [j in win(c)];
    # the window is symmetric so the cross term is the same clipped window sum.
    sb = np.power(s, -spec.beta)
    cross = _channel_window_sum(g * x * sb / s, spec.n)
    return g * sb - (2.0 * spec.beta * spec.alpha / spec.n) * x * cross


def dropout(
    x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: zero with probability ``rate``, scale survivors by
    1/(1-rate) so inference is the identity.  Returns (output, keep mask)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode requires an rng")
    mask = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    return x * (mask.astype(x.dtype) * scale), mask


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack along the channel axis; a occupies [0, Ca), b occupies [Ca, Ca+Cb)."""
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_channels: batch {a.shape[0]} != {b.shape[0]}")
    if a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: spatial {a.shape[2:]} != {b.shape[2:]}")
    return np.concatenate([a, b], axis=1)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """Affine map of rows: [N,F] x [K,F] -> [N,K]."""
    if x.ndim != 2:
        raise ShapeError(f"linear: expected rank-2 input, got rank {x.ndim}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight F {weight.shape[1]}")
    out = x @ weight.T
    if bias is not None:
        out += bias
    return check_finite("linear", out)


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood with max-subtracted softmax.

    Returns (loss, probabilities [N,K]).
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    probs = ex / ex.sum(axis=1, keepdims=True)
    logp = shifted[np.arange(n), labels] - np.log(ex.sum(axis=1))
    loss = float(-logp.mean(dtype=np.float64))
    check_finite("softmax_cross_entropy", probs)
    return loss, probs


# ---------------------------------------------------------------------------
# Distances


def euclidean_distance(a: np.ndarray, b: np.ndarray) -> float:
    """sqrt of the sum of squared differences over all elements (unnormalized)."""
    if a.shape != b.shape:
        raise ShapeError(f"euclidean_distance: shapes {a.shape} != {b.shape}")
    d = (a.astype(np.float64) - b.astype(np.float64)).ravel()
    return float(np.sqrt(np.dot(d, d)))


def per_sample_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance per batch element over its full feature stack."""
    if a.shape != b.shape:
        raise ShapeError(f"per_sample_distance: shapes {a.shape} != {b.shape}")
    d = (a.astype(np.float64) - b.astype(np.float64)).reshape(a.shape[0], -1)
    return np.sqrt(np.einsum("nk,nk->n", d, d))
