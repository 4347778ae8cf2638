"""Reverse-mode differentiation tape and straight-through sign estimators.

Ops executed inside a `with Tape():` block are recorded eagerly; record
order is execution order, which is a topological order of the graph, so
`Tape.backward` simply walks the record in reverse. Outside a tape, ops
compute values only (inference mode).

The sign layer is the one non-differentiable op: its forward is the exact
sign function (sign(0) = +1) and its backward multiplies the upstream
gradient by a surrogate derivative (clip-STE or the piecewise-linear
approximate sign). `smooth mode` swaps the sign forward for the surrogate's
own antiderivative so the whole network becomes finite-difference checkable;
the backward code path is shared between the two modes.
"""

from __future__ import annotations

import enum
import threading

import numpy as np

from .tensor import ConvGeometry, ShapeError, pad2d
from . import tensor as T


class TapeStateError(RuntimeError):
    """Backward requested for a value that was never recorded on the tape."""


class SteKind(enum.Enum):
    ClipSte = "clip"
    ApproxSign = "approxsign"


def ste_grad(x: np.ndarray, kind: SteKind) -> np.ndarray:
    """Surrogate derivative of sign at pre-activation x."""
    if kind is SteKind.ClipSte:
        return (np.abs(x) <= 1.0).astype(x.dtype)
    g = np.zeros_like(x)
    neg = (x >= -1.0) & (x < 0.0)
    pos = (x >= 0.0) & (x <= 1.0)
    g[neg] = 2.0 + 2.0 * x[neg]
    g[pos] = 2.0 - 2.0 * x[pos]
    return g


def ste_smooth_forward(x: np.ndarray, kind: SteKind) -> np.ndarray:
    """Continuous antiderivative of `ste_grad`; used only by gradcheck."""
    if kind is SteKind.ClipSte:
        return np.clip(x, -1.0, 1.0)
    out = np.where(x < 0, -1.0 + (x + 1.0) ** 2, 2.0 * x - x * x)
    out[x < -1.0] = -1.0
    out[x > 1.0] = 1.0
    return out.astype(x.dtype)


_TLS = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_TLS, "tape", None)


class Var:
    """A value in the computation graph.

    `data` is a numpy array; `grad` is populated for leaves (parameters and
    inputs) by `Tape.backward`. Interior gradients live only inside the
    backward walk.
    """

    __slots__ = ("data", "grad", "_parents", "_back", "_tape", "name")

    def __init__(self, data, name: str = ""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Var, ...] = ()
        self._back = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul_const(as_var(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul_const(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, name={self.name!r})"


class Parameter(Var):
    """Learnable leaf. `kind` tags drive optimizer policy (decay, clipping)."""

    __slots__ = ("learnable", "kind", "binary_latent")

    def __init__(self, data, name: str, kind: str = "weight", learnable: bool = True,
                 binary_latent: bool = False):
        super().__init__(np.array(data), name=name)
        self.learnable = learnable
        self.kind = kind
        self.binary_latent = binary_latent


class Tape:
    """Execution-ordered record of ops for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __enter__(self):
        if active_tape() is not None:
            raise TapeStateError("tapes do not nest; one tape per training step")
        _TLS.tape = self
        return self

    def __exit__(self, *exc):
        _TLS.tape = None
        return False

    def backward(self, loss: Var):
        """Populate leaf gradients for `loss`, accumulating with +=."""
        if loss._tape is not self:
            raise TapeStateError("backward before forward: loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node._back is None:
                continue

            def sink(parent: Var, contribution: np.ndarray):
                if parent._tape is self:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + contribution
                    else:
                        grads[key] = contribution
                else:  # leaf: parameter or input
                    if parent.grad is None:
                        parent.grad = np.array(contribution, dtype=parent.data.dtype)
                    else:
                        parent.grad += contribution

            node._back(g, sink)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _make(data: np.ndarray, parents: tuple[Var, ...], back) -> Var:
    """Create an op output; record it only when a tape is active."""
    out = Var(data)
    tape = active_tape()
    if tape is not None:
        out._parents = parents
        out._back = back
        out._tape = tape
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out_data = a.data + b.data

    def back(g, sink):
        sink(a, _unbroadcast(g, a.data.shape))
        sink(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), back)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out_data = a.data * b.data

    def back(g, sink):
        sink(a, _unbroadcast(g * b.data, a.data.shape))
        sink(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), back)


def mul_const(a: Var, c: float) -> Var:
    def back(g, sink):
        sink(a, g * c)

    return _make(a.data * c, (a,), back)


def reshape(a: Var, shape) -> Var:
    orig = a.data.shape

    def back(g, sink):
        sink(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), back)


def mean_over(a: Var, axes: tuple[int, ...]) -> Var:
    """Mean over `axes`, dims dropped. Backward spreads uniformly."""
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out_data = a.data.mean(axis=axes)

    def back(g, sink):
        gg = np.expand_dims(g, axes) if axes else g
        sink(a, np.broadcast_to(gg / count, a.data.shape).astype(a.data.dtype))

    return _make(out_data, (a,), back)


def sum_all(a: Var) -> Var:
    def back(g, sink):
        sink(a, np.full_like(a.data, g))

    return _make(np.asarray(a.data.sum()), (a,), back)


def relu(a: Var) -> Var:
    mask = a.data > 0

    def back(g, sink):
        sink(a, g * mask)

    return _make(a.data * mask, (a,), back)


def hardtanh(a: Var, lo: float = -1.0, hi: float = 1.0) -> Var:
    inside = (a.data > lo) & (a.data < hi)

    def back(g, sink):
        sink(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), back)


def sigmoid(a: Var) -> Var:
    s = T.sigmoid(a.data)

    def back(g, sink):
        sink(a, g * s * (1.0 - s))

    return _make(s, (a,), back)


def tanh(a: Var) -> Var:
    t = np.tanh(a.data)

    def back(g, sink):
        sink(a, g * (1.0 - t * t))

    return _make(t, (a,), back)


def sign_ste(a: Var, kind: SteKind = SteKind.ClipSte, smooth: bool = False) -> Var:
    """Exact sign forward (sign(0) = +1); STE surrogate backward.

    With smooth=True the forward is the estimator's antiderivative instead,
    turning the op into a genuinely differentiable function for gradcheck.
    """
    if smooth:
        data = ste_smooth_forward(a.data, kind)
    else:
        data = np.where(a.data >= 0, 1.0, -1.0).astype(a.data.dtype)
    x_saved = a.data

    def back(g, sink):
        sink(a, g * ste_grad(x_saved, kind))

    return _make(data, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra / NN ops


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear shapes incompatible: x {x.data.shape}, w {w.data.shape}")
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data

    def back(g, sink):
        sink(x, g @ w.data)
        sink(w, g.T @ x.data)
        if b is not None:
            sink(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, back)


def conv2d(x: Var, w: Var, geom: ConvGeometry, pad_value: float = 0.0) -> Var:
    """Training-path convolution: kernel-position loop over BLAS contractions.

    Matches conv2d_ref elementwise (same arithmetic, different loop order).
    """
    n, cin, h, wd = x.data.shape
    cout = w.data.shape[0]
    if cin != geom.in_channels or w.data.shape != (cout, cin, geom.kernel, geom.kernel):
        raise ShapeError(
            f"conv2d: input {x.data.shape} / weights {w.data.shape} "
            f"inconsistent with geometry {geom}"
        )
    ho, wo = geom.out_hw(h, wd)
    s, k = geom.stride, geom.kernel
    xp = pad2d(x.data, geom.padding, pad_value)
    out_data = T.conv2d_fast(x.data, w.data, geom, pad_value)

    def back(g, sink):
        gp = np.moveaxis(g, 1, 3)  # [N, Ho, Wo, Cout]
        dw = np.zeros_like(w.data)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                xs = xp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s]
                dw[:, :, i, j] = np.tensordot(gp, xs, axes=([0, 1, 2], [0, 2, 3]))
                dxs = np.tensordot(gp, w.data[:, :, i, j], axes=([3], [0]))
                dxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += (
                    np.moveaxis(dxs, 3, 1)
                )
        p = geom.padding
        dx = dxp if p == 0 else dxp[:, :, p:-p, p:-p]
        sink(x, dx)
        sink(w, dw)

    return _make(out_data, (x, w), back)


def avg_pool2d(x: Var, k: int) -> Var:
    n, c, h, wd = x.data.shape
    if h % k or wd % k:
        raise ShapeError(f"avg_pool2d: {h}x{wd} not divisible by k={k}")
    out_data = x.data.reshape(n, c, h // k, k, wd // k, k).mean(axis=(3, 5))

    def back(g, sink):
        gg = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        sink(x, gg.astype(x.data.dtype))

    return _make(out_data, (x,), back)


def downsample_pad(x: Var, stride: int, out_channels: int) -> Var:
    """Parameter-free shortcut: spatial subsample then zero-pad channels."""
    n, cin, h, wd = x.data.shape
    if out_channels < cin:
        raise ShapeError(f"downsample_pad cannot shrink channels {cin} -> {out_channels}")
    sub = x.data[:, :, ::stride, ::stride]
    out_data = np.zeros((n, out_channels) + sub.shape[2:], dtype=x.data.dtype)
    out_data[:, :cin] = sub

    def back(g, sink):
        dx = np.zeros_like(x.data)
        dx[:, :, ::stride, ::stride] = g[:, :cin]
        sink(x, dx)

    return _make(out_data, (x,), back)


def global_avg_pool(x: Var) -> Var:
    n, c, h, wd = x.data.shape
    out_data = x.data.mean(axis=(2, 3))

    def back(g, sink):
        sink(x, np.broadcast_to(g[:, :, None, None] / (h * wd), x.data.shape).astype(x.data.dtype))

    return _make(out_data, (x,), back)


class BatchNormState:
    """Running statistics owned by a batchnorm layer."""

    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum


def batchnorm2d(x: Var, gamma: Var, beta: Var, state: BatchNormState, training: bool) -> Var:
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm params sized {gamma.data.shape}, input C={c}")
    eps = state.eps
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out_data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    if training:
        nelem = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        xc = x.data - mean[None, :, None, None]

        def back(g, sink):
            sink(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            sink(beta, g.sum(axis=(0, 2, 3)))
            dxhat = g * gamma.data[None, :, None, None]
            dvar = (dxhat * xc).sum(axis=(0, 2, 3)) * (-0.5) * inv**3
            dmean = -(dxhat.sum(axis=(0, 2, 3))) * inv + dvar * (-2.0 / nelem) * xc.sum(axis=(0, 2, 3))
            dx = (
                dxhat * inv[None, :, None, None]
                + (2.0 / nelem) * xc * dvar[None, :, None, None]
                + dmean[None, :, None, None] / nelem
            )
            sink(x, dx.astype(x.data.dtype))

    else:

        def back(g, sink):
            sink(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            sink(beta, g.sum(axis=(0, 2, 3)))
            sink(x, (g * (gamma.data * inv)[None, :, None, None]).astype(x.data.dtype))

    return _make(out_data, (x, gamma, beta), back)


def softmax_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    loss, grad = T.softmax_cross_entropy(logits.data, labels)

    def back(g, sink):
        sink(logits, grad * g)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), back)


# ---------------------------------------------------------------------------
# gradient checking


def fd_gradient(loss_fn, arr: np.ndarray, coords, eps: float) -> np.ndarray:
    """Central finite differences of loss_fn at the given flat coordinates."""
    flat = arr.reshape(-1)
    out = np.zeros(len(coords))
    for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + eps
        lp = loss_fn()
        flat[c] = orig - eps
        lm = loss_fn()
        flat[c] = orig
        out[i] = (lp - lm) / (2 * eps)
    return out


class GradCheckReport:
    """Max relative analytic-vs-numeric error per parameter."""

    def __init__(self):
        self.per_param: dict[str, float] = {}

    def record(self, name: str, rel_err: float):
        self.per_param[name] = max(rel_err, self.per_param.get(name, 0.0))

    def max_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def passed(self, tol: float) -> bool:
        return self.max_error() <= tol

    def lines(self, tol: float) -> list[str]:
        out = []
        for name, err in sorted(self.per_param.items()):
            status = "ok" if err <= tol else "FAIL"
            out.append(f"param={name} max_rel_err={err:.3e} status={status}")
        return out


def finite_diff_check(loss_fn, params: dict[str, Parameter], param_subset=None,
                      eps: float = 1e-5, max_coords: int = 8, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    loss_fn() must run a forward pass over `params` WITHOUT opening a tape
    itself and return the scalar loss Var. Parameters should be float64;
    a deterministic sample of coordinates is checked per parameter.
    """
    names = sorted(params) if param_subset is None else [n for n in sorted(params) if n in param_subset]
    rng = np.random.default_rng(seed)
    report = GradCheckReport()

    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)

    def loss_value():
        return float(loss_fn().data)

    for name in names:
        p = params[name]
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        size = p.data.size
        coords = np.arange(size) if size <= max_coords else rng.choice(size, size=max_coords, replace=False)
        numeric = fd_gradient(loss_value, p.data, coords, eps)
        ana = analytic.reshape(-1)[coords]
        denom = np.maximum(np.abs(numeric), 1e-8)
        rel = float(np.max(np.abs(ana - numeric) / denom)) if len(coords) else 0.0
        report.record(name, rel)
    for p in params.values():
        p.zero_grad()
    return report
