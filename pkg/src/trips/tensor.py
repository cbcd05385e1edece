"""Small numeric core: the differentiable ops used by the decoder and shading,
a parameter registry with Adam state, and a finite-difference checker.

Arrays are plain ``numpy.ndarray`` objects in ``(C, H, W)`` layout. Every op
comes as a ``forward``/``backward`` pair; there is no tape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

# Per-group default learning rates (position rate is multiplied by the scene extent).
DEFAULT_LEARNING_RATES = {
    "network": 1e-3,
    "tonemap": 1e-3,
    "features": 5e-3,
    "opacity": 1e-3,
    "size": 1e-3,
    "position": 1e-4,
    "pose": 1e-5,
    "environment": 5e-3,
    "exposure": 1e-3,
}


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__("non-finite gradient in: " + ", ".join(self.names))


def _check_ndim(name, arr, ndim):
    if arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim} dims, got shape {arr.shape}")


# ---------------------------------------------------------------------------
# conv2d

def _im2col(x, k):
    p = (k - 1) // 2
    c, h, w = x.shape
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # C, H, W, k, k
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, h * w)


def _check_conv(x, kernel, bias):
    _check_ndim("input", x, 3)
    _check_ndim("kernel", kernel, 4)
    _check_ndim("bias", bias, 1)
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"kernel: height {kh} != width {kw}")
    if kh % 2 == 0:
        raise ShapeError(f"kernel: size {kh} must be odd")
    if x.shape[0] != c_in:
        raise ShapeError(f"channel axis: input has {x.shape[0]} channels, kernel expects {c_in}")
    if bias.shape[0] != c_out:
        raise ShapeError(f"output-channel axis: bias has {bias.shape[0]}, kernel has {c_out}")


def conv2d(x, kernel, bias):
    """Same-size cross-correlation with zero padding. ``x``: (C_in, H, W)."""
    _check_conv(x, kernel, bias)
    c_out, c_in, k, _ = kernel.shape
    _, h, w = x.shape
    wmat = kernel.reshape(c_out, -1)
    if k == 1:
        out = wmat @ x.reshape(c_in, h * w)
    else:
        out = wmat @ _im2col(x, k)
    out += bias[:, None]
    return out.reshape(c_out, h, w)


def conv2d_backward(grad, x, kernel):
    """Return ``(grad_input, grad_kernel, grad_bias)`` for :func:`conv2d`."""
    c_out, c_in, k, _ = kernel.shape
    _, h, w = x.shape
    if grad.shape != (c_out, h, w):
        raise ShapeError(f"grad: expected {(c_out, h, w)}, got {grad.shape}")
    g = grad.reshape(c_out, h * w)
    wmat = kernel.reshape(c_out, -1)
    grad_bias = g.sum(axis=1)
    if k == 1:
        cols = x.reshape(c_in, h * w)
        grad_kernel = (g @ cols.T).reshape(kernel.shape)
        grad_x = (wmat.T @ g).reshape(c_in, h, w)
        return grad_x, grad_kernel, grad_bias
    cols = _im2col(x, k)
    grad_kernel = (g @ cols.T).reshape(kernel.shape)
    gcols = (wmat.T @ g).reshape(c_in, k, k, h, w)
    p = (k - 1) // 2
    gpad = np.zeros((c_in, h + 2 * p, w + 2 * p), dtype=grad.dtype)
    for dy in range(k):
        for dx in range(k):
            gpad[:, dy:dy + h, dx:dx + w] += gcols[:, dy, dx]
    return gpad[:, p:p + h, p:p + w], grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# bilinear 2x upsampling, sample centers at (i + 0.5) / 2 - 0.5, edges clamped

def _up_axis(x, axis):
    n = x.shape[axis]
    idx = np.arange(n)
    prev = np.take(x, np.maximum(idx - 1, 0), axis=axis)
    nxt = np.take(x, np.minimum(idx + 1, n - 1), axis=axis)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up_axis_backward(g, axis):
    n2 = g.shape[axis]
    n = n2 // 2
    shape = list(g.shape)
    shape[axis:axis + 1] = [n, 2]
    g = g.reshape(shape)
    even = np.take(g, 0, axis=axis + 1)
    odd = np.take(g, 1, axis=axis + 1)
    out = 0.75 * (even + odd)
    # transpose of prev[i] = x[max(i-1, 0)] and nxt[i] = x[min(i+1, n-1)]
    lead = (slice(None),) * axis
    out[lead + (slice(0, n - 1),)] += 0.25 * even[lead + (slice(1, n),)]
    out[lead + (slice(0, 1),)] += 0.25 * even[lead + (slice(0, 1),)]
    out[lead + (slice(1, n),)] += 0.25 * odd[lead + (slice(0, n - 1),)]
    out[lead + (slice(n - 1, n),)] += 0.25 * odd[lead + (slice(n - 1, n),)]
    return out


def upsample2x(x):
    """Bilinear 2x upsampling of a (C, H, W) array."""
    _check_ndim("input", x, 3)
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"input: spatial extents must be >= 1, got {x.shape}")
    return _up_axis(_up_axis(x, 1), 2)


def upsample2x_backward(grad):
    """Adjoint of :func:`upsample2x`."""
    _check_ndim("grad", grad, 3)
    if grad.shape[1] % 2 or grad.shape[2] % 2:
        raise ShapeError(f"grad: spatial extents must be even, got {grad.shape}")
    return _up_axis_backward(_up_axis_backward(grad, 2), 1)


# ---------------------------------------------------------------------------
# pointwise

def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_backward(grad, x):
    return grad * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0))).astype(x.dtype, copy=False)


def sigmoid(x):
    # split branches so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x):
    return np.logaddexp(0, x).astype(np.asarray(x).dtype, copy=False)


# ---------------------------------------------------------------------------
# parameters and Adam

@dataclass
class Parameter:
    name: str
    value: np.ndarray
    group: str
    enabled: bool = True
    grad: np.ndarray = field(init=False, repr=False)
    m: np.ndarray = field(init=False, repr=False)
    v: np.ndarray = field(init=False, repr=False)
    step: int = 0
    touched: bool = False

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


class ParameterStore:
    """Flat registry of optimizable arrays.

    Every entry belongs to a learning-rate group. Gradients are accumulated with
    :meth:`accumulate`; an entry whose gradient was never touched since the last
    :meth:`zero_grad` is skipped by :func:`adam_step`.
    """

    def __init__(self, learning_rates=None, dtype=DEFAULT_DTYPE):
        self.learning_rates = dict(DEFAULT_LEARNING_RATES)
        if learning_rates:
            self.learning_rates.update(learning_rates)
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, Parameter] = {}

    def add(self, name, value, group):
        if name in self._entries:
            raise KeyError(f"duplicate parameter {name!r}")
        if group not in self.learning_rates:
            raise KeyError(f"unknown learning-rate group {group!r}")
        value = np.array(value, dtype=self.dtype)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {name!r} has non-finite values")
        p = Parameter(name, value, group)
        self._entries[name] = p
        return p

    def __getitem__(self, name) -> Parameter:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def value(self, name):
        return self._entries[name].value

    def accumulate(self, name, grad):
        p = self._entries[name]
        if grad.shape != p.value.shape:
            raise ShapeError(f"{name}: grad shape {grad.shape} != value shape {p.value.shape}")
        p.grad += grad
        p.touched = True

    def zero_grad(self):
        for p in self._entries.values():
            p.grad[...] = 0
            p.touched = False

    def set_enabled(self, groups: Iterable[str] | None = None, enabled=True, names=None):
        """Enable/disable every entry in ``groups`` (or in ``names``)."""
        groups = set(groups or ())
        names = set(names or ())
        for p in self._entries.values():
            if p.group in groups or p.name in names:
                p.enabled = enabled

    def only(self, groups):
        groups = set(groups)
        for p in self._entries.values():
            p.enabled = p.group in groups

    def astype(self, dtype):
        """Convert all values (and optimizer state) in place."""
        self.dtype = np.dtype(dtype)
        for p in self._entries.values():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
            p.m = p.m.astype(dtype)
            p.v = p.v.astype(dtype)
        return self

    def global_grad_norm(self):
        total = 0.0
        for p in self._entries.values():
            if p.enabled and p.touched:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        return math.sqrt(total)

    def state_arrays(self):
        return {p.name: p.value for p in self._entries.values()}


def adam_step(store: ParameterStore, lr_scale=1.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update on every enabled, touched entry; gradients are zeroed after.

    Raises :class:`NonFiniteGradientError` (before changing anything) when a
    gradient contains NaN or Inf.
    """
    active = [p for p in store if p.enabled and p.touched]
    bad = [p.name for p in active if not np.all(np.isfinite(p.grad))]
    if bad:
        store.zero_grad()
        raise NonFiniteGradientError(bad)
    for p in active:
        lr = store.learning_rates[p.group] * lr_scale
        p.step += 1
        g = p.grad
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * g * g
        m_hat = p.m / (1 - beta1 ** p.step)
        v_hat = p.v / (1 - beta2 ** p.step)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype, copy=False)
    store.zero_grad()


# ---------------------------------------------------------------------------
# finite differences

def relative_error(analytic, numeric, floor=0.0):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``; 0 where both are 0."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    diff = np.abs(a - n)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, diff / np.where(denom > 0, denom, 1), 0.0)
    return out


def finite_diff_check(f: Callable[..., float], store: ParameterStore, name: str, h=1e-3,
                      samples=None, rng=None, exclude=None, floor_ratio=1e-3, floor=None,
                      return_details=False):
    """Compare analytic gradients of ``f`` w.r.t. ``store[name]`` with central differences.

    ``f(store, grad=True)`` must return the scalar loss and, when ``grad`` is
    true, accumulate gradients into ``store``. The step is ``h * max(1, |v|)``.
    ``samples`` limits the check to a random subset of coordinates;
    ``exclude(index, step) -> bool`` drops coordinates sitting on a kink.
    Relative errors use ``max(|a|, |n|, floor)`` as denominator; by default the
    floor is ``floor_ratio`` times the largest gradient magnitude in the sample,
    so near-zero coordinates are judged against the scale of the whole entry.
    """
    param = store[name]
    if param.value.dtype != np.float64:
        raise TypeError("finite_diff_check requires float64 parameters; call store.astype(np.float64)")
    store.zero_grad()
    base = f(store, grad=True)
    analytic = param.grad.copy()
    store.zero_grad()
    again = f(store, grad=False)
    if base != again:
        raise ValueError(f"f is not deterministic: {base!r} != {again!r}")

    flat = param.value.reshape(-1)
    n = flat.size
    if samples is not None and samples < n:
        rng = np.random.default_rng(0) if rng is None else rng
        coords = np.sort(rng.choice(n, size=samples, replace=False))
    else:
        coords = np.arange(n)

    used, numeric = [], []
    for i in coords:
        old = flat[i]
        step = h * max(1.0, abs(old))
        if exclude is not None and exclude(int(i), step):
            continue
        flat[i] = old + step
        fp = f(store, grad=False)
        flat[i] = old - step
        fm = f(store, grad=False)
        flat[i] = old
        used.append(i)
        numeric.append((fp - fm) / (2 * step))
    store.zero_grad()
    if not used:
        err = 0.0
        details = (np.zeros(0), np.zeros(0), np.zeros(0, dtype=int))
    else:
        used = np.asarray(used)
        numeric = np.asarray(numeric)
        a = analytic.reshape(-1)[used]
        if floor is None:
            floor = floor_ratio * max(np.max(np.abs(a)), np.max(np.abs(numeric)))
        err = float(np.max(relative_error(a, numeric, floor=floor + 1e-300)))
        details = (a, numeric, used)
    if return_details:
        return err, details
    return err
