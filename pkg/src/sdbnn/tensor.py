"""Dense real-valued tensors and the reference numeric operations.

A "tensor" here is a plain numpy ndarray in NCHW layout (row-major,
W fastest), float32 by default. Gradient checking switches to float64;
every op preserves the dtype of its inputs.

The convolution in this module is the deliberately naive correctness
anchor for the bit-packed kernels, not a fast path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the requested operation."""


def _debug_checks_enabled() -> bool:
    return os.environ.get("SDBNN_DEBUG", "") not in ("", "0")


def check_finite(x: Tensor, where: str) -> Tensor:
    if _debug_checks_enabled() and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced in {where}")
    return x


@dataclass(frozen=True)
class ConvGeometry:
    """Square-kernel 2-d convolution geometry with symmetric padding."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = False

    def __post_init__(self):
        if self.kernel < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"conv geometry {self} yields empty output for input {h}x{w}"
            )
        return ho, wo


def pad2d(x: Tensor, padding: int, value: float = 0.0) -> Tensor:
    """Pad H and W symmetrically with a constant."""
    if padding == 0:
        return x
    return np.pad(
        x,
        ((0, 0), (0, 0), (padding, padding), (padding, padding)),
        constant_values=value,
    )


def conv2d_ref(x: Tensor, w: Tensor, geom: ConvGeometry, pad_value: float = 0.0) -> Tensor:
    """Direct (naive loop) cross-correlation; the oracle for bitconv2d.

    x: [N, Cin, H, W], w: [Cout, Cin, K, K] -> [N, Cout, H', W'].

    Binary layers call this with pad_value=+1.0 so the padded region is a
    legal {-1,+1} value and float/bit equivalence is exact.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_ref expects 4-d input/weights, got {x.shape}/{w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if kh != kw or kh != geom.kernel:
        raise ShapeError(f"weight kernel {kh}x{kw} does not match geometry K={geom.kernel}")
    if cin != geom.in_channels or wcin != geom.in_channels or cout != geom.out_channels:
        raise ShapeError(
            f"channels mismatch: input Cin={cin}, weight Cin={wcin}, "
            f"geometry ({geom.in_channels} -> {geom.out_channels})"
        )
    ho, wo = geom.out_hw(h, wd)
    s, k = geom.stride, geom.kernel
    xp = pad2d(x, geom.padding, pad_value)
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for co in range(cout):
        for ci in range(cin):
            for i in range(k):
                for j in range(k):
                    patch = xp[:, ci, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s]
                    out[:, co] += w[co, ci, i, j] * patch
    return check_finite(out, "conv2d_ref")


def conv2d_fast(x: Tensor, w: Tensor, geom: ConvGeometry, pad_value: float = 0.0) -> Tensor:
    """Direct convolution vectorized per kernel position (BLAS contractions).

    Same arithmetic as conv2d_ref; this is the forward used by the training
    tape and by full-precision layers on the packed path, so the two
    execution paths stay bitwise identical. conv2d_ref remains the oracle.
    """
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    if cin != geom.in_channels or w.shape != (cout, cin, geom.kernel, geom.kernel):
        raise ShapeError(f"conv2d_fast: input {x.shape} / weights {w.shape} vs geometry {geom}")
    ho, wo = geom.out_hw(h, wd)
    s, k = geom.stride, geom.kernel
    xp = pad2d(x, geom.padding, pad_value)
    acc = np.zeros((n, ho, wo, cout), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            xs = xp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s]
            acc += np.tensordot(xs, w[:, :, i, j], axes=([1], [1]))
    return check_finite(np.ascontiguousarray(np.moveaxis(acc, 3, 1)), "conv2d_fast")


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: x [N, F] @ w [G, F]^T (+ bias [G])."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shapes incompatible: x {x.shape}, w {w.shape}")
    out = x @ w.T
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({w.shape[0]},)")
        out = out + bias
    return check_finite(out, "linear")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta_bn: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    eps: float = 1e-5,
    momentum: float = 0.1,
    mode: str = "eval",
) -> tuple[Tensor, Tensor, Tensor]:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by batch statistics (biased variance) and returns
    updated running stats; eval mode uses the running stats unchanged.
    Returns (output, running_mean, running_var).
    """
    c = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta_bn), ("running_mean", running_mean), ("running_var", running_var)):
        if p.shape != (c,):
            raise ShapeError(f"batchnorm {name} has shape {p.shape}, expected ({c},)")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean = (1 - momentum) * running_mean + momentum * mean
        running_var = (1 - momentum) * running_var + momentum * var
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta_bn[None, :, None, None]
    return check_finite(out, "batchnorm2d"), running_mean, running_var


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims: [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    return x.mean(axis=(2, 3))


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling (H, W must divide by k)."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by k={k}")
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def hardtanh(x: Tensor, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    return np.clip(x, lo, hi)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x: Tensor) -> Tensor:
    return np.tanh(x)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean cross-entropy over the batch, log-sum-exp stabilized.

    Returns (loss, gradient w.r.t. logits). Gradient rows sum to zero.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [N, Cls], got {logits.shape}")
    n, ncls = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= ncls:
        raise ValueError(f"label out of range [0, {ncls})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - lse[:, None])
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)
