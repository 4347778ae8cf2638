"""Self-distribution binarization: additive learnable shifts applied to
activations (static and input-dependent) and weights before the sign
function, plus the multiplicative scaling-factor baseline they replace and
diagnostics for sign-distribution pathologies.

Each transform exists in two forms: a pure numpy function (the contract,
used directly by diagnostics and as the oracle in tests) and a tape builder
(`*_node`) that composes autograd primitives for training. The two are
cross-checked in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from math import ceil, sqrt

import numpy as np

from . import autograd as ag
from . import tensor as T
from .autograd import Parameter, SteKind, Var
from .tensor import ConvGeometry, ShapeError, Tensor
from . import opcount


class AsdForm(Enum):
    """Constraint applied to the raw activation-shift parameter."""

    Original = "original"  # unconstrained
    Tanh = "tanh"          # shift in [-1, 1]
    Sigmoid = "sigmoid"    # shift in [0, 1]; sign constrained too


def sign01(x: Tensor) -> Tensor:
    """Exact sign with sign(0) = +1, as float +-1."""
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype)


# ---------------------------------------------------------------------------
# activation self-distribution (static)


class AsdFactor:
    """Per-channel learnable activation shift, applied before the sign."""

    def __init__(self, channels: int, form: AsdForm = AsdForm.Sigmoid,
                 name: str = "asd", dtype=np.float32):
        self.form = form
        self.raw = Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.raw", kind="asd_raw")

    @property
    def channels(self) -> int:
        return self.raw.data.shape[0]

    def effective(self) -> np.ndarray:
        return asd_effective(self.raw.data, self.form)

    def effective_node(self) -> Var:
        if self.form is AsdForm.Original:
            return self.raw
        if self.form is AsdForm.Tanh:
            return ag.tanh(self.raw)
        return ag.sigmoid(self.raw)


def asd_effective(raw: np.ndarray, form: AsdForm) -> np.ndarray:
    if form is AsdForm.Original:
        return raw
    if form is AsdForm.Tanh:
        return np.tanh(raw)
    return T.sigmoid(raw)


def asd_apply(a_r: Tensor, f: AsdFactor) -> tuple[Tensor, Tensor]:
    """Shift activations channel-wise and binarize: returns (A_r + shift, sign).

    The shift is computed fresh from the latent parameter on every call;
    nothing is accumulated in place.
    """
    if a_r.ndim != 4 or a_r.shape[1] != f.channels:
        raise ShapeError(f"asd_apply: input {a_r.shape} vs factor channels {f.channels}")
    shifted = a_r + f.effective().astype(a_r.dtype)[None, :, None, None]
    return shifted, sign01(shifted)


def asd_node(x: Var, f: AsdFactor, kind: SteKind, smooth: bool = False) -> tuple[Var, Var]:
    """Tape version of asd_apply (shifted pre-activation, sign output)."""
    beta = ag.reshape(f.effective_node(), (1, f.channels, 1, 1))
    shifted = ag.add(x, beta)
    return shifted, ag.sign_ste(shifted, kind, smooth=smooth)


# ---------------------------------------------------------------------------
# dynamic activation self-distribution


class DasdHead:
    """Input-conditioned shift head: gap -> linear -> relu -> linear -> sigmoid.

    `re` is the reduction ratio controlling the hidden width ceil(C / re).
    Output is one shift per (sample, channel), always in (0, 1).
    """

    def __init__(self, channels: int, re: int = 16, name: str = "dasd",
                 dtype=np.float32, rng: np.random.Generator | None = None):
        if re < 1:
            raise ValueError(f"re must be >= 1, got {re}")
        self.re = re
        self.channels = channels
        hidden = max(1, ceil(channels / re))
        self.hidden = hidden
        rng = rng or np.random.default_rng(0)
        b1 = 1.0 / sqrt(channels)
        b2 = 1.0 / sqrt(hidden)
        self.w1 = Parameter(rng.uniform(-b1, b1, (hidden, channels)).astype(dtype),
                            name=f"{name}.w1", kind="psi_w")
        self.b1 = Parameter(np.zeros(hidden, dtype=dtype), name=f"{name}.b1", kind="psi_b")
        self.w2 = Parameter(rng.uniform(-b2, b2, (channels, hidden)).astype(dtype),
                            name=f"{name}.w2", kind="psi_w")
        self.b2 = Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.b2", kind="psi_b")

    def params(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    def shift(self, a_r: Tensor) -> Tensor:
        """Per-sample, per-channel shift in (0, 1); shape [N, C]."""
        pooled = T.global_avg_pool(a_r)
        h = T.relu(T.linear(pooled, self.w1.data, self.b1.data))
        return T.sigmoid(T.linear(h, self.w2.data, self.b2.data))

    def shift_node(self, x: Var) -> Var:
        pooled = ag.global_avg_pool(x)
        h = ag.relu(ag.linear(pooled, self.w1, self.b1))
        return ag.sigmoid(ag.linear(h, self.w2, self.b2))


def dasd_apply(a_r: Tensor, head: DasdHead) -> tuple[Tensor, Tensor]:
    """Input-dependent shift then binarize: returns (A_r + beta[n,c], sign)."""
    if a_r.ndim != 4 or a_r.shape[1] != head.channels:
        raise ShapeError(f"dasd_apply: input {a_r.shape} vs head channels {head.channels}")
    beta = head.shift(a_r).astype(a_r.dtype)
    shifted = a_r + beta[:, :, None, None]
    return shifted, sign01(shifted)


def dasd_node(x: Var, head: DasdHead, kind: SteKind, smooth: bool = False) -> tuple[Var, Var]:
    n = x.data.shape[0]
    beta = ag.reshape(head.shift_node(x), (n, head.channels, 1, 1))
    shifted = ag.add(x, beta)
    return shifted, ag.sign_ste(shifted, kind, smooth=smooth)


# ---------------------------------------------------------------------------
# weight self-distribution


class WsdFactor:
    """Per-output-channel weight shift, bounded by the channel weight mean."""

    def __init__(self, out_channels: int, name: str = "wsd", dtype=np.float32):
        self.raw = Parameter(np.zeros(out_channels, dtype=dtype), name=f"{name}.raw", kind="wsd_raw")

    @property
    def out_channels(self) -> int:
        return self.raw.data.shape[0]


def wsd_shift(w_r: Tensor, raw: np.ndarray) -> Tensor:
    """shift_c = sigmoid(raw_c) * mean(w_r[c]); |shift_c| <= |mean_c| always."""
    mean = w_r.reshape(w_r.shape[0], -1).mean(axis=1)
    return (T.sigmoid(raw.astype(w_r.dtype)) * mean).astype(w_r.dtype)


def wsd_apply(w_r: Tensor, f: WsdFactor) -> tuple[Tensor, Tensor]:
    """Shift weights by sigmoid(raw) * channel mean and binarize.

    The latent weights are never modified; the shifted tensor is a fresh
    array. A zero-mean channel gets shift 0 (no-op on that channel).
    """
    if w_r.shape[0] != f.out_channels:
        raise ShapeError(f"wsd_apply: weights {w_r.shape} vs factor Cout {f.out_channels}")
    shift = wsd_shift(w_r, f.raw.data)
    shape = (-1,) + (1,) * (w_r.ndim - 1)
    shifted = w_r + shift.reshape(shape)
    return shifted, sign01(shifted)


def wsd_node(w: Parameter, f: WsdFactor, kind: SteKind, smooth: bool = False) -> Var:
    """Tape version: sign(w + sigmoid(raw) * mean(w)) with gradients flowing
    to both the raw factor and, through the mean, the latent weights."""
    axes = tuple(range(1, w.data.ndim))
    mean = ag.mean_over(w, axes)
    shift = ag.mul(ag.sigmoid(f.raw), mean)
    shape = (w.data.shape[0],) + (1,) * (w.data.ndim - 1)
    shifted = ag.add(w, ag.reshape(shift, shape))
    return ag.sign_ste(shifted, kind, smooth=smooth)


# ---------------------------------------------------------------------------
# multiplicative scaling-factor baseline


@dataclass
class ScalingFactors:
    """Channel-wise multiplicative scales applied after binarization.

    The baseline this engine replaces: binary conv output times per-output
    weight scale alpha_s and per-input activation scale beta_s. In analytic
    mode both are means of absolute values.
    """

    alpha_s: np.ndarray  # [Cout]
    beta_s: np.ndarray   # [Cin]
    mode: str = "analytic"

    @staticmethod
    def analytic(w_r: Tensor, a_r: Tensor) -> "ScalingFactors":
        alpha = np.abs(w_r.reshape(w_r.shape[0], -1)).mean(axis=1)
        beta = np.abs(a_r).mean(axis=(0, 2, 3))
        return ScalingFactors(alpha_s=alpha.astype(w_r.dtype), beta_s=beta.astype(a_r.dtype))


def scale_binarize_baseline(w_r: Tensor, a_r: Tensor, factors: ScalingFactors,
                            geom: ConvGeometry) -> Tensor:
    """Binary conv rescaled channel-wise: alpha_s * mean(beta_s) * (w_b (x) a_b).

    Exists as the comparison baseline; the per-element multiplies it performs
    on the conv output are recorded on the instrumentation counter.
    """
    if factors.alpha_s.shape != (geom.out_channels,):
        raise ShapeError(f"alpha_s shape {factors.alpha_s.shape} != ({geom.out_channels},)")
    if factors.beta_s.shape != (geom.in_channels,):
        raise ShapeError(f"beta_s shape {factors.beta_s.shape} != ({geom.in_channels},)")
    out = T.conv2d_ref(sign01(a_r), sign01(w_r), geom, pad_value=1.0)
    # the input-channel scale collapses to a scalar once channels are mixed
    beta_eff = float(factors.beta_s.mean())
    out = out * factors.alpha_s[None, :, None, None]
    out = out * beta_eff
    opcount.add_post_conv_muls(2 * out.size)
    return out


# ---------------------------------------------------------------------------
# sign-distribution diagnostics


@dataclass
class SignStats:
    """Distribution health of a pre-binarization tensor.

    degeneration: every value has the same sign; saturation: fraction with
    |v| > 1; mismatch: fraction with |v| < 1. saturation + mismatch +
    boundary == 1.
    """

    fraction_positive: np.ndarray  # per channel, or length-1 when pooled
    degeneration: bool
    saturation: float
    mismatch: float
    boundary: float

    def as_kv(self, prefix: str = "") -> str:
        fp = " ".join(f"{v:.4f}" for v in np.atleast_1d(self.fraction_positive))
        return (
            f"{prefix}degeneration={int(self.degeneration)} "
            f"{prefix}saturation={self.saturation:.4f} "
            f"{prefix}mismatch={self.mismatch:.4f} "
            f"{prefix}boundary={self.boundary:.4f} "
            f"{prefix}fraction_positive={fp}"
        )


def sign_stats(x: Tensor, per_channel: bool = True) -> SignStats:
    if x.size == 0:
        raise ValueError("sign_stats of an empty tensor")
    pos = x >= 0
    if per_channel and x.ndim >= 2:
        axes = tuple(i for i in range(x.ndim) if i != 1)
        frac_pos = pos.mean(axis=axes)
    else:
        frac_pos = np.array([pos.mean()])
    absx = np.abs(x)
    sat = float((absx > 1).mean())
    mis = float((absx < 1).mean())
    return SignStats(
        fraction_positive=frac_pos,
        degeneration=bool(np.all(pos) or not np.any(pos)),
        saturation=sat,
        mismatch=mis,
        boundary=1.0 - sat - mis,
    )
