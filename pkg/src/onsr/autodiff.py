"""Minimal reverse-mode autodiff on numpy arrays.

A ``Tensor`` wraps a float32 (or float64, for high-precision gradient
checks) numpy array.  Differentiable ops build a graph of parent links and
backward closures; ``Tensor.backward()`` walks it in reverse topological
order and accumulates gradients into every grad-enabled leaf.  Gradients
sum across repeated backward calls; callers zero them explicitly.

Everything is single-threaded and deterministic: the same inputs produce
bit-identical outputs and gradients on one platform.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


_grad_enabled = True
_finite_checks = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype == np.float64:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=np.float32)


class Tensor:
    """Shaped float array with an optional gradient record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        if _finite_checks and not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor constructed with non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    # -- grad bookkeeping ---------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        return out

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Accumulates into ``.grad`` of every grad-enabled ancestor and
        consumes the tape (parent links of interior nodes are dropped).
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                if _finite_checks and not np.all(np.isfinite(pg)):
                    raise NonFiniteError("non-finite gradient during backward")
                key = id(parent)
                if key in grads:
                    grads[key] += pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(other) -> Tensor:
    if isinstance(other, Tensor):
        return other
    return Tensor(np.asarray(other))


def _make(data: np.ndarray, parents, backward) -> Tensor:
    """Build an op output node; records the tape only when grads are live."""
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- elementwise suite ------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    # scalar broadcast only
    return g.sum().reshape(shape) if np.prod(shape) == 1 else g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: ((a, _reduce_to(g, a.shape)), (b, _reduce_to(g, b.shape))))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: ((a, _reduce_to(g, a.shape)), (b, _reduce_to(-g, b.shape))))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: ((a, _reduce_to(g * b.data, a.shape)),
                            (b, _reduce_to(g * a.data, b.shape))))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: ((a, g * c),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=a.data.dtype)).reshape(())
    return _make(out, (a,), lambda g: ((a, np.full_like(a.data, g.reshape(()) / n)),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, a.data * a.data.dtype.type(slope))
    return _make(out, (a,),
                 lambda g: ((a, np.where(mask, g, g * a.data.dtype.type(slope))),))


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """mean(|a - b|); subgradient 0 at ties."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray(np.abs(diff).mean(dtype=a.data.dtype)).reshape(())
    n = diff.size

    def backward(g):
        s = np.sign(diff) * (g.reshape(()) / n)
        return ((a, s), (b, -s))

    return _make(out, (a, b), backward)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on raw logits, log-sum-exp stabilized.

    ``target`` is a constant 0/1 array (or scalar); no gradient flows to it.
    """
    logits = _wrap(logits)
    t = np.asarray(target, dtype=logits.data.dtype)
    if t.shape not in ((), logits.shape):
        raise ValueError(f"target shape {t.shape} incompatible with logits {logits.shape}")
    x = logits.data
    out = np.asarray((np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean(
        dtype=x.dtype)).reshape(())
    n = x.size

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return ((logits, ((sig - t) * (g.reshape(()) / n)).astype(x.dtype)),)

    return _make(out, (logits,), backward)


# -- shape ops --------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: ((a, g.reshape(old)),))


def crop2d(x: Tensor, margin: int) -> Tensor:
    """Trim ``margin`` pixels from every spatial edge of [...,H,W]."""
    x = _wrap(x)
    m = int(margin)
    if m == 0:
        return x
    H, W = x.shape[-2], x.shape[-1]
    if m < 0 or 2 * m >= H or 2 * m >= W:
        raise ValueError(f"margin {m} too large for extents {H}x{W}")
    out = np.ascontiguousarray(x.data[..., m:-m, m:-m])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., m:-m, m:-m] = g
        return ((x, gx),)

    return _make(out, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, parts))

    return _make(out, tuple(tensors), backward)


# -- conv2d -----------------------------------------------------------------


def _pad2d(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    spec = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    if mode == "zero":
        return np.pad(x, spec)
    if mode == "reflect":
        return np.pad(x, spec, mode="reflect")
    raise ValueError(f"unknown padding mode {mode!r}")


def _pad2d_adjoint(gp: np.ndarray, ph: int, pw: int, mode: str, H: int, W: int) -> np.ndarray:
    """Adjoint of _pad2d: fold padded-region gradients back onto the source."""
    if ph == 0 and pw == 0:
        return gp
    if mode == "zero":
        return gp[:, :, ph:ph + H, pw:pw + W]
    g = gp[:, :, ph:ph + H, :].copy()
    if ph:
        g[:, :, 1:ph + 1, :] += gp[:, :, ph - 1::-1, :]
        g[:, :, H - ph - 1:H - 1, :] += gp[:, :, :ph + H - 1:-1, :]
    out = g[:, :, :, pw:pw + W].copy()
    if pw:
        out[:, :, :, 1:pw + 1] += g[:, :, :, pw - 1::-1]
        out[:, :, :, W - pw - 1:W - 1] += g[:, :, :, :pw + W - 1:-1]
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    return win  # [N, C, Ho, Wo, kh, kw]


def _corr2d(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    win = _windows(xp, w.shape[2], w.shape[3], stride)
    # [N,C,Ho,Wo,u,v] x [O,C,u,v] -> [N,Ho,Wo,O]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: str = "zero", stride: int = 1) -> Tensor:
    """Same-padded 2-D cross-correlation (no kernel flip).

    ``x`` is [C,H,W] or [N,C,H,W]; ``weight`` is [C_out,C_in,kh,kw] with odd
    spatial extents.  With stride 1 the spatial extent is preserved.
    """
    x, weight = _wrap(x), _wrap(weight)
    squeeze = x.data.ndim == 3
    if x.data.ndim not in (3, 4) or weight.data.ndim != 4:
        raise ValueError(f"conv2d: bad ranks {x.shape} / {weight.shape}")
    co, ci, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    xd = x.data[None] if squeeze else x.data
    if xd.shape[1] != ci:
        raise ValueError(f"conv2d: input channels {xd.shape[1]} != weight in-channels {ci}")
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (co,):
            raise ValueError(f"conv2d: bias shape {bias.shape} != ({co},)")
    N, _, H, W = xd.shape
    ph, pw = kh // 2, kw // 2
    xp = _pad2d(xd, ph, pw, padding)
    out = _corr2d(xp, weight.data, stride)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    # capture grad flags now so a later un-freeze cannot re-enable paths
    # that were excluded from the tape
    need_w, need_x = weight.requires_grad, x.requires_grad
    need_b = bias is not None and bias.requires_grad

    def backward(g):
        if squeeze:
            g = g[None]
        Ho, Wo = g.shape[2], g.shape[3]
        grads = []
        if need_w:
            win = _windows(xp, kh, kw, stride)
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [O,C,u,v]
            grads.append((weight, np.ascontiguousarray(gw)))
        if need_x:
            # transposed conv: dilate by stride, full-correlate with the
            # spatially flipped, channel-transposed weight
            Hp, Wp = xp.shape[2], xp.shape[3]
            gd = np.zeros((N, co, Hp + kh - 1, Wp + kw - 1), dtype=g.dtype)
            gd[:, :, kh - 1:kh - 1 + (Ho - 1) * stride + 1:stride,
               kw - 1:kw - 1 + (Wo - 1) * stride + 1:stride] = g
            wt = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gxp = _corr2d(gd, wt, 1)
            gx = _pad2d_adjoint(gxp, ph, pw, padding, H, W)
            grads.append((x, gx[0] if squeeze else gx))
        if need_b:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return grads

    out = np.ascontiguousarray(out[0]) if squeeze else out
    return _make(out, tuple(p for p in (x, weight, bias) if p is not None), backward)


# -- dense (affine) layer ---------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """[N,F] @ [O,F]^T + [O]."""
    x, weight = _wrap(x), _wrap(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: shapes {x.shape} / {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data[None, :]
    need_x, need_w = x.requires_grad, weight.requires_grad
    need_b = bias is not None and bias.requires_grad

    def backward(g):
        grads = []
        if need_x:
            grads.append((x, g @ weight.data))
        if need_w:
            grads.append((weight, g.T @ x.data))
        if need_b:
            grads.append((bias, g.sum(axis=0)))
        return grads

    return _make(out, tuple(p for p in (x, weight, bias) if p is not None), backward)


# -- nearest-neighbor upsampling -------------------------------------------


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ValueError("nearest_upsample expects [N,C,H,W]")
    f = int(factor)
    out = x.data.repeat(f, axis=2).repeat(f, axis=3)
    N, C, H, W = x.shape

    def backward(g):
        gx = g.reshape(N, C, H, f, W, f).sum(axis=(3, 5))
        return ((x, gx),)

    return _make(out, (x,), backward)


# -- bicubic resampling -----------------------------------------------------


def _keys_cubic(t: np.ndarray) -> np.ndarray:
    """Keys cubic-convolution kernel, a = -0.5."""
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    return np.where(t <= 1.0, 1.5 * t3 - 2.5 * t2 + 1.0,
                    np.where(t < 2.0, -0.5 * t3 + 2.5 * t2 - 4.0 * t + 2.0, 0.0))


@lru_cache(maxsize=256)
def _resample_matrix(n_in: int, s: int, direction: str) -> np.ndarray:
    """Dense 1-D cubic resampling operator [n_out, n_in], float64.

    Downsampling widens the kernel by s (antialiasing); edges clamp.  Rows
    sum to exactly 1, so constants are preserved.
    """
    if direction == "down":
        n_out = n_in // s
        support, scale = 2.0 * s, float(s)
    else:
        n_out = n_in * s
        support, scale = 2.0, 1.0
    M = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * (n_in / n_out) - 0.5
        lo = int(np.ceil(center - support))
        hi = int(np.floor(center + support))
        taps = np.arange(lo, hi + 1)
        w = _keys_cubic((center - taps) / scale) / scale
        idx = np.clip(taps, 0, n_in - 1)
        np.add.at(M[i], idx, w)
        M[i] /= M[i].sum()
    return M


def bicubic_resample(x: Tensor, scale: int, direction: str) -> Tensor:
    """Separable cubic resampling by an integer factor, up or down.

    Linear operator; the gradient is the transpose map.  Internally applied
    in float64 and rounded back to the input dtype.
    """
    x = _wrap(x)
    s = int(scale)
    if direction not in ("up", "down"):
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    if s < 1:
        raise ValueError("scale must be a positive integer")
    if x.data.ndim not in (3, 4):
        raise ValueError("bicubic_resample expects [C,H,W] or [N,C,H,W]")
    H, W = x.shape[-2], x.shape[-1]
    if direction == "down" and (H % s or W % s):
        raise ValueError(f"extents {H}x{W} not divisible by downscale factor {s}")
    if s == 1:
        return _make(x.data.copy(), (x,), lambda g: ((x, g),))
    Mh = _resample_matrix(H, s, direction)
    Mw = _resample_matrix(W, s, direction)
    out = np.einsum("oh,...hw,pw->...op", Mh, x.data.astype(np.float64), Mw,
                    optimize=True).astype(x.data.dtype)

    def backward(g):
        gx = np.einsum("oh,...op,pw->...hw", Mh, g.astype(np.float64), Mw,
                       optimize=True).astype(x.data.dtype)
        return ((x, gx),)

    return _make(out, (x,), backward)


# -- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter Adam moments with bias correction."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)


def adam_step(param: Tensor, state: AdamState) -> None:
    """One in-place Adam update; the caller zeroes ``param.grad``."""
    if param.grad is None:
        raise ValueError("adam_step: parameter has no gradient")
    g = param.grad
    if state.m is None:
        state.m = np.zeros_like(param.data)
        state.v = np.zeros_like(param.data)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    param.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(param.data.dtype)


class Adam:
    """Convenience wrapper stepping a named set of parameters together."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.states = [AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
                       for _ in self.params]

    def step(self):
        for p, s in zip(self.params, self.states):
            if p.grad is not None:
                adam_step(p, s)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
