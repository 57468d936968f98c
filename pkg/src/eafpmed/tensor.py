"""Dense NCHW tensors with reverse-mode gradients.

Only the operators needed by the feature-processing module, the backbone and
the classifier head are provided. Every operator validates shapes eagerly and
records a backward closure when any input requires a gradient.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)
_GUIDED = contextvars.ContextVar("guided_backprop", default=False)
_KINKS = contextvars.ContextVar("kink_margin", default=None)

DEFAULT_SLOPE = 0.01


class Tensor:
    """A real array of rank <= 4 with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ValueError(f"tensor rank must be <= 4, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._retain = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after ``backward``."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self), -1.0))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=like.dtype)
    if arr.ndim == 0:
        arr = np.full(like.shape, arr, dtype=like.dtype)
    return Tensor(arr)


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


@contextlib.contextmanager
def no_grad():
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


@contextlib.contextmanager
def guided_backprop():
    """Switch every leaky-ReLU backward rule to the guided rule.

    Applies to ``backward`` calls made inside the block. The upstream gradient
    is zeroed wherever the forward input or the upstream gradient is negative.
    """
    token = _GUIDED.set(True)
    try:
        yield
    finally:
        _GUIDED.reset(token)


@contextlib.contextmanager
def kink_margin():
    """Collect, per leaky-ReLU call inside the block, the smallest |input|.

    Finite differences are only meaningful away from the kink at 0, so
    gradient checks use this to reject instances that sit too close to it.
    """
    seen: list[float] = []
    token = _KINKS.set(seen)
    try:
        yield seen
    finally:
        _KINKS.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf that requires it.

    Non-leaf tensors keep their gradient only if ``retain_grad`` was called.
    Calling twice without clearing the leaves accumulates.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------------------
# elementwise and structural ops


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    return _result(a.data * f, (a,), lambda g: (g * f,))


def tsum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return _result(np.asarray(a.data.sum(), dtype=dtype), (a,),
                   lambda g: (np.full(shape, g, dtype=dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], int(np.prod(a.shape[1:]))))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects NCHW tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ValueError(f"concat_channels: N,H,W mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _result(np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :ca], g[:, ca:]))


def leaky_relu(x: Tensor, slope: float = DEFAULT_SLOPE) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    xd = x.data
    watch = _KINKS.get()
    if watch is not None and xd.size:
        watch.append(float(np.abs(xd).min()))
    pos = xd >= 0
    s = xd.dtype.type(slope)
    out = np.where(pos, xd, xd * s)

    def _bw(g):
        if _GUIDED.get():
            return (np.where(pos & (g >= 0), g, 0).astype(g.dtype),)
        return (np.where(pos, g, g * s),)

    return _result(out, (x,), _bw)


# --------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    dilation: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be positive")
        if self.padding is None:
            object.__setattr__(self, "padding", self.dilation * (self.kernel - 1) // 2)
        if self.padding < 0:
            raise ValueError("padding must be nonnegative")

    @property
    def span(self) -> int:
        return self.dilation * (self.kernel - 1) + 1

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        p, s = self.padding, self.stride
        ho = (h + 2 * p - self.span) // s + 1
        wo = (w + 2 * p - self.span) // s + 1
        return ho, wo


def _im2col(xp: np.ndarray, k: int, d: int, s: int, ho: int, wo: int) -> np.ndarray:
    # (C*k*k, N*Ho*Wo); rows ordered (c, i, j) to match weight.reshape(O, -1)
    n, c = xp.shape[:2]
    span = d * (k - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(2, 3))
    win = win[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s, ::d, ::d]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, xp_shape, k: int, d: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = xp_shape
    dxp = np.zeros(xp_shape, dtype=cols.dtype)
    view = cols.reshape(c, k, k, n, ho, wo)
    for i in range(k):
        r0 = i * d
        for j in range(k):
            c0 = j * d
            dxp[:, :, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s] += \
                view[:, i, j].transpose(1, 0, 2, 3)
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation of an NCHW input with an OIKK weight, plus bias."""
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    k = spec.kernel
    if c != spec.in_channels:
        raise ValueError(f"conv2d: input channel dim is {c}, expected in_channels={spec.in_channels}")
    expected = (spec.out_channels, spec.in_channels, k, k)
    if weight.shape != expected:
        for name, got, want in zip(("out_channels", "in_channels", "kernel height", "kernel width"),
                                   weight.shape, expected):
            if got != want:
                raise ValueError(f"conv2d: weight {name} is {got}, expected {want}")
        raise ValueError(f"conv2d: weight shape {weight.shape}, expected {expected}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"conv2d: bias length is {bias.shape}, expected ({spec.out_channels},)")
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {h}x{w} too small for kernel span {spec.span}")

    p, s, d = spec.padding, spec.stride, spec.dilation
    if p:
        xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p : p + h, p : p + w] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, k, d, s, ho, wo)
    w2 = weight.data.reshape(spec.out_channels, -1)
    out = (w2 @ cols).reshape(spec.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    xp_shape = xp.shape
    need_x = x.requires_grad

    def _bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(spec.out_channels, -1)
        dw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        dx = None
        if need_x:
            dxp = _col2im(w2.T @ g2, xp_shape, k, d, s, ho, wo)
            dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        return dx, dw, db

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, _bw)


# --------------------------------------------------------------------------
# batch normalisation


@dataclass
class BnState:
    """Per-channel affine parameters and running statistics.

    ``mode`` is ``"training"`` (batch statistics, running stats updated in
    place) or ``"inference"`` (running statistics only).
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "training"

    @classmethod
    def create(cls, channels: int, dtype=np.float32, **kw) -> "BnState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must be in (0, 1)")
        if self.mode not in ("training", "inference"):
            raise ValueError(f"unknown batch-norm mode {self.mode!r}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be nonnegative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm2d(x: Tensor, state: BnState) -> Tensor:
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ValueError(f"batch_norm2d: input {x.shape} does not match {state.channels} channels")
    xd = x.data
    dtype = xd.dtype
    gamma = state.gamma.data.astype(dtype, copy=False)[None, :, None, None]
    beta = state.beta.data.astype(dtype, copy=False)[None, :, None, None]
    eps = dtype.type(state.eps)

    if state.mode == "training":
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        mom = state.momentum
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)[None, :, None, None]
        xhat = centered * inv_std

        def _bw(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gamma
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = inv_std / m * (m * dxhat - s1 - xhat * s2)
            return dx, dgamma.astype(state.gamma.dtype), dbeta.astype(state.beta.dtype)
    else:
        rm = state.running_mean.astype(dtype, copy=False)[None, :, None, None]
        inv_std = (1.0 / np.sqrt(state.running_var.astype(dtype) + eps))[None, :, None, None]
        xhat = (xd - rm) * inv_std

        def _bw(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return g * (gamma * inv_std), dgamma.astype(state.gamma.dtype), dbeta.astype(state.beta.dtype)

    out = gamma * xhat + beta
    return _result(out, (x, state.gamma, state.beta), _bw)


# --------------------------------------------------------------------------
# classifier head


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    area = h * w

    def _bw(g):
        return (np.broadcast_to(g / area, x.shape).astype(x.dtype),)

    return _result(x.data.mean(axis=(2, 3), keepdims=True), (x,), _bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.ndim != 2:
        raise ValueError(f"linear expects (N, C), got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"linear: weight {weight.shape} does not accept {x.shape[1]} features")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        dx = g @ wd if x.requires_grad else None
        dw = g.T @ xd if weight.requires_grad else None
        db = g.sum(axis=0) if bias is not None else None
        return dx, dw, db

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, _bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood over the batch and per-sample probabilities."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    if n == 0:
        raise ValueError("softmax_cross_entropy: empty batch")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"got {labels.shape[0]} labels for {n} samples")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    probs = np.exp(logp)
    dtype = logits.dtype

    def _bw(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return ((d * (float(g) / n)).astype(dtype),)

    return _result(np.asarray(loss, dtype=dtype), (logits,), _bw), probs


def pick(logits: Tensor, categories) -> Tensor:
    """Sum over the batch of ``logits[n, categories[n]]``, a scalar target."""
    n, k = logits.shape
    cats = np.broadcast_to(np.asarray(categories, dtype=np.int64), (n,))
    mask = np.zeros(logits.shape, dtype=logits.dtype)
    mask[np.arange(n), cats] = 1
    return tsum(mul(logits, Tensor(mask)))


# --------------------------------------------------------------------------
# initialisation and gradient checking


def leaky_gain(slope: float = DEFAULT_SLOPE) -> float:
    return float(np.sqrt(2.0 / (1.0 + slope * slope)))


def kaiming_normal(shape: Sequence[int], rng: np.random.Generator, slope: float = DEFAULT_SLOPE,
                   dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    std = leaky_gain(slope) / np.sqrt(fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def finite_difference_check(fn: Callable[[], Tensor], params: Iterable[Tensor],
                            eps: float = 1e-5) -> float:
    """Worst relative disagreement between backprop and central differences.

    ``fn`` recomputes a scalar loss from the current contents of ``params``.
    The error for one scalar is ``|a - fd| / max(1, |a|)``.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    params = list(params)
    for p in params:
        p.grad = None
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(fn().data)
                flat[i] = orig - eps
                f_minus = float(fn().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                a = float(a_flat[i])
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
