"""Reverse-mode autodiff on NumPy arrays, NHWC layout.

A `Tensor` wraps an ndarray and records enough of the op graph to run
backprop from a scalar. Only the operations the segmentation models need
are implemented; all of them are verified against central finite
differences in the test suite. Arrays keep whatever float dtype they were
created with (float32 for training, float64 for gradient checks), and
every op is deterministic for fixed inputs.
"""

from __future__ import annotations

import zlib
from contextlib import contextmanager

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from . import _kernels
from .errors import ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording, e.g. for inference or evaluation."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    __array_priority__ = 100  # ndarray <op> Tensor defers to Tensor.__r<op>__

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flags = " grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flags})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backprop from this tensor; without `grad` it must be a scalar."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _needs_tape(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not _needs_tape(t):
        return
    t.grad = g if t.grad is None else t.grad + g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(_needs_tape(p) for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` to undo NumPy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops ---------------------------------------------------------


def add(a, b):
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, s = (a, b) if isinstance(a, Tensor) else (b, a)
        out = _make(t.data + s, (t,), None)
        if out._parents:
            out._backward = lambda g: _accum(t, g)
        return out
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    if isinstance(b, (int, float)):
        return add(a, -b)
    if isinstance(a, (int, float)):
        t = as_tensor(b)
        out = _make(a - t.data, (t,), None)
        if out._parents:
            out._backward = lambda g: _accum(t, -g)
        return out
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, s = (a, b) if isinstance(a, Tensor) else (b, a)
        out = _make(t.data * s, (t,), None)
        if out._parents:
            out._backward = lambda g: _accum(t, g * s)
        return out
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    a = as_tensor(a) if not isinstance(a, (int, float)) else a
    b = as_tensor(b)
    a_data = a.data if isinstance(a, Tensor) else a
    inv = 1.0 / b.data
    if isinstance(a, Tensor):

        def backward(g):
            _accum(a, _unbroadcast(g * inv, a.data.shape))
            _accum(b, _unbroadcast(-g * a.data * inv * inv, b.data.shape))

        return _make(a_data * inv, (a, b), backward)

    def backward_scalar(g):
        _accum(b, _unbroadcast(-g * a_data * inv * inv, b.data.shape))

    return _make(a_data * inv, (b,), backward_scalar)


def power(a: Tensor, k) -> Tensor:
    if not isinstance(k, (int, float)):
        raise TypeError("only scalar exponents are supported")
    out_data = a.data**k

    def backward(g):
        _accum(a, g * k * a.data ** (k - 1))

    return _make(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = expit(a.data)

    def backward(g):
        _accum(a, g * out_data * (1 - out_data))

    return _make(out_data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accum(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


# -- shape / reduction ops ---------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    inv = 1.0 / count

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g * inv, a.data.shape))

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose2d expects a 2-D tensor")

    def backward(g):
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), backward)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    sizes = [t.data.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=ax)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


# -- spatial ops (NHWC) ------------------------------------------------------


def _require_4d(x: Tensor, op: str) -> tuple[int, int, int, int]:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects a (n, h, w, c) tensor, got shape {x.data.shape}")
    return x.data.shape


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Dense 2-D convolution, odd kernel, 'same' padding at stride 1.

    Kernel layout (kh, kw, c_in, c_out).
    """
    n, h, wd, c = _require_4d(x, "conv2d")
    kh, kw, cin, cout = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d requires odd kernel sizes")
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {cin}")
    p = (kh - 1) // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = win.shape[1], win.shape[2]
    cols = win.reshape(n * oh * ow, c * kh * kw)  # (c, kh, kw) index order
    wmat = w.data.transpose(2, 0, 1, 3).reshape(c * kh * kw, cout)
    out = cols @ wmat
    if b is not None:
        out = out + b.data
    out = out.reshape(n, oh, ow, cout)

    def backward(g):
        gflat = g.reshape(n * oh * ow, cout)
        gw = (cols.T @ gflat).reshape(c, kh, kw, cout).transpose(1, 2, 0, 3)
        _accum(w, gw)
        if b is not None:
            _accum(b, gflat.sum(axis=0))
        if _needs_tape(x):
            gcols = (gflat @ wmat.T).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += gcols[
                        :, :, :, :, i, j
                    ]
            _accum(x, gxp[:, p : p + h, p : p + wd, :] if p else gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def depthwise_conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 2-D convolution, odd kernel, 'same' padding, stride 1.

    Kernel layout (kh, kw, c). Inner loops are jitted; see _kernels.
    """
    n, h, wd, c = _require_4d(x, "depthwise_conv2d")
    kh, kw, ck = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("depthwise_conv2d requires odd kernel sizes")
    if ck != c:
        raise ShapeError(f"depthwise channel mismatch: input has {c}, kernel expects {ck}")
    p = (kh - 1) // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else np.ascontiguousarray(x.data)
    out = np.zeros_like(x.data)
    _kernels.depthwise_forward(xp, w.data, out)

    def backward(g):
        g = np.ascontiguousarray(g)
        gw = np.zeros_like(w.data)
        _kernels.depthwise_grad_weight(xp, g, gw)
        _accum(w, gw)
        if _needs_tape(x):
            gxp = np.zeros_like(xp)
            _kernels.depthwise_grad_input(g, w.data, gxp)
            _accum(x, gxp[:, p : p + h, p : p + wd, :] if p else gxp)

    return _make(out, (x, w), backward)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2; ties break toward the first element."""
    n, h, w, c = _require_4d(x, "max_pool2x2")
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    xr = x.data.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gz = np.zeros((n, h2, w2, c, 4), dtype=g.dtype)
        np.put_along_axis(gz, idx[..., None], g[..., None], axis=-1)
        _accum(x, gz.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c))

    return _make(out, (x,), backward)


def max_pool3x3_same(x: Tensor) -> Tensor:
    """3x3 max pool, stride 1, 'same' padding (for inception pool branches)."""
    n, h, w, c = _require_4d(x, "max_pool3x3_same")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)), constant_values=-np.inf)
    win = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(n, h, w, c, 9)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros((n, h + 2, w + 2, c), dtype=g.dtype)
        for k in range(9):
            i, j = divmod(k, 3)
            gxp[:, i : i + h, j : j + w, :] += g * (idx == k)
        _accum(x, gxp[:, 1 : 1 + h, 1 : 1 + w, :])

    return _make(out, (x,), backward)


def spectral_pool_half(x: Tensor) -> Tensor:
    """Frequency-domain low-pass to half resolution.

    2-D DFT, keep the centered low-frequency block of size (h/2, w/2),
    inverse DFT, real part. `norm='forward'` scaling preserves constants.
    """
    n, h, w, c = _require_4d(x, "spectral_pool_half")
    if h % 2 or w % 2:
        raise ShapeError(f"spectral_pool_half needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    r0 = h // 2 - h // 4  # centered window start that always keeps the DC bin
    c0 = w // 2 - w // 4
    spec = scipy.fft.fft2(x.data, axes=(1, 2), norm="forward")
    spec = np.fft.fftshift(spec, axes=(1, 2))[:, r0 : r0 + h2, c0 : c0 + w2, :]
    out = scipy.fft.ifft2(np.fft.ifftshift(spec, axes=(1, 2)), axes=(1, 2), norm="forward").real

    def backward(g):
        gs = np.fft.fftshift(scipy.fft.ifft2(g, axes=(1, 2), norm="forward"), axes=(1, 2))
        pad = np.zeros((n, h, w, c), dtype=gs.dtype)
        pad[:, r0 : r0 + h2, c0 : c0 + w2, :] = gs
        gx = scipy.fft.fft2(np.fft.ifftshift(pad, axes=(1, 2)), axes=(1, 2), norm="forward").real
        _accum(x, np.ascontiguousarray(gx, dtype=g.dtype))

    return _make(np.ascontiguousarray(out, dtype=x.data.dtype), (x,), backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    n, h, w, c = _require_4d(x, "upsample_nearest2")

    def backward(g):
        _accum(x, g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)))

    return _make(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2), (x,), backward)


def subsample2(x: Tensor) -> Tensor:
    """Keep every second pixel in both spatial dims (stride-2 identity)."""
    n, h, w, c = _require_4d(x, "subsample2")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, ::2, ::2, :] = g
        _accum(x, gx)

    return _make(np.ascontiguousarray(x.data[:, ::2, ::2, :]), (x,), backward)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Fused training-mode batch normalization over all axes but the last.

    Returns (out, batch_mean, batch_var); the biased batch variance also
    feeds the caller's running-statistics update. Fusing the backward pass
    avoids a long chain of broadcast temporaries in the hot path.
    """
    axes = tuple(range(x.data.ndim - 1))
    channels = x.data.shape[-1]
    count = x.data.size // channels
    mu = x.data.mean(axis=axes)
    centered = x.data - mu
    cflat = centered.reshape(-1, channels)
    var = np.einsum("nc,nc->c", cflat, cflat) / count
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        xf = xhat.reshape(-1, channels)
        _accum(beta, g.sum(axis=axes))
        _accum(gamma, np.einsum("nc,nc->c", np.ascontiguousarray(g).reshape(-1, channels), xf))
        if _needs_tape(x):
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=axes)
            s2 = np.einsum("nc,nc->c", dxhat.reshape(-1, channels), xf)
            _accum(x, (inv_std / count) * (count * dxhat - s1 - xhat * s2))

    return _make(out, (x, gamma, beta), backward), mu, var


class Module:
    """Base for layers and models: tracks named parameters and buffers.

    Assigning a Tensor attribute registers it as a trainable parameter if
    it requires grad and as a buffer otherwise; Module/ModuleList
    attributes become children. State names join attribute paths with '/'.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        for reg in (self._params, self._buffers, self._children):
            reg.pop(name, None)
        if isinstance(value, Tensor):
            (self._params if value.requires_grad else self._buffers)[name] = value
        elif isinstance(value, (Module, ModuleList)):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_state(self, prefix: str = ""):
        for name, t in self._params.items():
            yield prefix + name, t
        for name, t in self._buffers.items():
            yield prefix + name, t
        for name, child in self._children.items():
            yield from child.named_state(prefix + name + "/")

    def state(self) -> dict[str, Tensor]:
        return dict(self.named_state())

    def parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_state() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Copy of every state array, for snapshots and checkpoints."""
        return {k: t.data.copy() for k, t in self.named_state()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        state = self.state()
        if strict:
            missing = sorted(set(state) - set(arrays))
            extra = sorted(set(arrays) - set(state))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing}, unexpected={extra}")
        for k, arr in arrays.items():
            t = state[k]
            if t.data.shape != arr.shape:
                raise ShapeError(f"shape mismatch for '{k}': {t.data.shape} vs {arr.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)


class ModuleList:
    """Sequence of child modules addressed by index in state names."""

    def __init__(self, modules=()):
        self._items = list(modules)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def append(self, m) -> None:
        self._items.append(m)

    def named_state(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_state(f"{prefix}{i}/")


def param_count(module: Module) -> int:
    return sum(t.data.size for t in module.parameters().values())


# -- initialization ----------------------------------------------------------


def rng_for(seed: int, *tags: str) -> np.random.Generator:
    """Independent, reproducible stream for (seed, tags)."""
    keys = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(t.encode()) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(keys))


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / max(1, fan_in))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise ValueError(f"{what} contains NaN or Inf")
