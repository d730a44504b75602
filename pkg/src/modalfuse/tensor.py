"""Dense [B, C, H, W] tensors with tape-based reverse-mode differentiation.

Operations are plain functions over :class:`Tensor`. When a :class:`GradTape` is
active and at least one input requires a gradient, the operation appends its
adjoint to the tape; :func:`backward` replays the tape in reverse.

Data is float32 by default. Wrap gradient checks and oracle comparisons in
``with precision(np.float64):`` so new tensors are created in 64-bit.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError, StateError

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "precision",
    "no_grad",
    "default_dtype",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "tensor_sum",
    "sum_channels",
    "global_avg_pool",
    "channel_mean",
    "channel_max",
    "concat_channels",
    "relu",
    "sigmoid",
    "softmax_channel",
    "log",
    "conv2d",
    "bilinear_upsample",
    "upsample_matrix",
    "select_channel",
]

_DTYPE: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "modalfuse_dtype", default=np.dtype(np.float32)
)
_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "modalfuse_tape", default=None
)


def default_dtype() -> np.dtype:
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    token = _DTYPE.set(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording onto the active tape."""
    token = _TAPE.set(None)
    try:
        yield
    finally:
        _TAPE.reset(token)


class Tensor:
    """A real array plus a flag saying whether gradients should flow to it.

    Tensors compare by identity so they can key gradient dictionaries.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype(), copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("out", "inputs", "adjoint")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], adjoint: Callable):
        self.out = out
        self.inputs = inputs
        self.adjoint = adjoint


class GradTape:
    """Ordered record of the differentiable operations executed inside ``with tape:``.

    A tape may be replayed once; call :meth:`reset` before recording again.
    Tapes are not shared between threads (the active tape is a context variable).
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._replayed = False
        self._token = None

    def __enter__(self) -> "GradTape":
        if self._replayed:
            raise StateError("tape was already replayed; call reset() before recording again")
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        self._nodes.clear()
        self._replayed = False

    def _push(self, node: _Node) -> None:
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(self, loss)


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` in reverse and return ``{leaf tensor: gradient}``.

    Leaves are tensors with ``requires_grad`` that were consumed by recorded
    operations without being produced by one. Every such leaf gets an entry
    (zeros if the loss does not depend on it).
    """
    if tape._replayed:
        raise StateError("tape replayed twice without reset()")
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(n.out) for n in tape._nodes}
    if id(loss) not in produced:
        raise StateError("loss was not produced by an operation recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves.setdefault(id(t), t)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.adjoint(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    tape._replayed = True
    return {t: grads.get(k, np.zeros_like(t.data)) for k, t in leaves.items()}


# --------------------------------------------------------------------------- helpers


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite value in result")
    return arr


def _emit(arr: np.ndarray, inputs: Sequence[Tensor], adjoint: Callable, op: str) -> Tensor:
    _finite(arr, op)
    req = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, req)
    tape = _TAPE.get()
    if req and tape is not None:
        tape._push(_Node(out, tuple(inputs), adjoint))
    return out


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a [B, C, H, W] tensor, got shape {x.shape}")


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise ShapeError(f"cannot broadcast {a} with {b}: rank differs")
    out = []
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"cannot broadcast {a} with {b}: only extent-1 axes expand")
        out.append(max(x, y) if min(x, y) != 0 else 0)
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# --------------------------------------------------------------------------- arithmetic


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def neg(x: Tensor) -> Tensor:
    return _emit(-x.data, (x,), lambda g: (-g,), "neg")


# --------------------------------------------------------------------------- reductions


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of every entry, as a 0-d tensor."""
    shape, dt = x.shape, x.dtype
    return _emit(
        np.asarray(x.data.sum(), dtype=dt),
        (x,),
        lambda g: (np.broadcast_to(g, shape).astype(dt, copy=True),),
        "sum",
    )


def sum_channels(x: Tensor) -> Tensor:
    """Sum over the channel axis, keeping it as extent 1."""
    _require_4d(x, "sum_channels")
    shape = x.shape
    return _emit(
        x.data.sum(axis=1, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
        "sum_channels",
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over each H x W plane -> [B, C, 1, 1]."""
    _require_4d(x, "global_avg_pool")
    B, C, H, W = x.shape
    if H * W == 0:
        raise ShapeError("global_avg_pool: empty spatial plane")
    shape = x.shape
    inv = 1.0 / (H * W)
    return _emit(
        x.data.mean(axis=(2, 3), keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g * inv, shape).copy(),),
        "global_avg_pool",
    )


def channel_mean(x: Tensor) -> Tensor:
    _require_4d(x, "channel_mean")
    shape = x.shape
    if shape[1] == 0:
        raise ShapeError("channel_mean: no channels")
    inv = 1.0 / shape[1]
    return _emit(
        x.data.mean(axis=1, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g * inv, shape).copy(),),
        "channel_mean",
    )


def channel_max(x: Tensor) -> Tensor:
    """Max over channels; the gradient goes to the first maximal channel."""
    _require_4d(x, "channel_max")
    if x.shape[1] == 0:
        raise ShapeError("channel_max: no channels")
    idx = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)
    shape, dt = x.shape, x.dtype

    def adjoint(g):
        gx = np.zeros(shape, dtype=dt)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _emit(out, (x,), adjoint, "channel_max")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    for p in parts:
        _require_4d(p, "concat_channels")
    base = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ShapeError(f"concat_channels: {p.shape} incompatible with {base}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def adjoint(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=1), parts, adjoint, "concat_channels")


# --------------------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, evaluated without overflow for large |x|.

    Values lie in (0, 1) for moderate inputs; at |x| beyond roughly 17 (float32)
    or 37 (float64) the result rounds to an endpoint.
    """
    s = _sigmoid_np(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softmax_channel(x: Tensor) -> Tensor:
    _require_4d(x, "softmax_channel")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _emit(s, (x,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),), "softmax_channel")


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log. With ``floor``, inputs below it are clamped (zero gradient there)."""
    d = x.data
    if floor is None:
        if (d <= 0).any():
            raise NumericError("log of non-positive input")
        return _emit(np.log(d), (x,), lambda g: (g / d,), "log")
    if (d < 0).any():
        raise NumericError("log of negative input")
    keep = d > floor
    safe = np.where(keep, d, floor)
    return _emit(np.log(safe), (x,), lambda g: (np.where(keep, g / safe, 0).astype(d.dtype),), "log")


# --------------------------------------------------------------------------- convolution


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``weight`` is [C_out, C_in / groups, k, k] with odd k; ``bias`` has length C_out.
    """
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D, got {weight.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if stride < 1 or padding < 0 or groups < 1:
        raise ShapeError("conv2d: stride >= 1, padding >= 0, groups >= 1 required")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd extent, got {kh}x{kw}")
    if C % groups or O % groups or Cg != C // groups:
        raise ShapeError(f"conv2d: {C} input channels do not match weight {weight.shape} with groups={groups}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
    k, s, p = kh, stride, padding
    if H + 2 * p < k or W + 2 * p < k:
        raise ShapeError("conv2d: padded input smaller than kernel")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]  # B,C,Ho,Wo,k,k
    Ho, Wo = win.shape[2], win.shape[3]
    Og = O // groups
    wd = weight.data
    outs = []
    for gi in range(groups):
        wg = wd[gi * Og : (gi + 1) * Og]
        xg = win[:, gi * Cg : (gi + 1) * Cg]
        outs.append(np.tensordot(xg, wg, axes=([1, 4, 5], [1, 2, 3])))  # B,Ho,Wo,Og
    out = np.concatenate(outs, axis=3) if groups > 1 else outs[0]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    xshape, xpshape = x.shape, xp.shape

    def adjoint(g):
        gw = np.empty_like(wd)
        gxp = np.zeros(xpshape, dtype=g.dtype)
        for gi in range(groups):
            gg = g[:, gi * Og : (gi + 1) * Og]
            xg = win[:, gi * Cg : (gi + 1) * Cg]
            gw[gi * Og : (gi + 1) * Og] = np.tensordot(gg, xg, axes=([0, 2, 3], [0, 2, 3]))
            cols = np.tensordot(gg, wd[gi * Og : (gi + 1) * Og], axes=([1], [0]))  # B,Ho,Wo,Cg,k,k
            cols = cols.transpose(0, 3, 1, 2, 4, 5)
            dst = gxp[:, gi * Cg : (gi + 1) * Cg]
            for i in range(k):
                for j in range(k):
                    dst[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += cols[..., i, j]
        gx = gxp[:, :, p : p + xshape[2], p : p + xshape[3]] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, adjoint, "conv2d")


# --------------------------------------------------------------------------- resampling


def upsample_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """[n_in * factor, n_in] half-pixel-centred linear interpolation matrix."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    for o in range(n_out):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample H and W by an integer factor (half-pixel centres, edge clamped)."""
    _require_4d(x, "bilinear_upsample")
    if int(factor) != factor or factor < 1:
        raise ShapeError(f"bilinear_upsample: factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return _emit(x.data.copy(), (x,), lambda g: (g,), "bilinear_upsample")
    uh = upsample_matrix(x.shape[2], factor, x.dtype)
    uw = upsample_matrix(x.shape[3], factor, x.dtype)
    out = np.einsum("oh,bchw,pw->bcop", uh, x.data, uw, optimize=True)
    return _emit(out, (x,), lambda g: (np.einsum("oh,bcop,pw->bchw", uh, g, uw, optimize=True),), "bilinear_upsample")


def select_channel(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[b, index[b, h, w], h, w]`` into a [B, 1, H, W] tensor."""
    _require_4d(x, "select_channel")
    index = np.asarray(index)
    if index.shape != (x.shape[0],) + x.shape[2:]:
        raise ShapeError(f"select_channel: index shape {index.shape} does not match {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise ShapeError("select_channel: channel index out of range")
    idx = index[:, None].astype(np.intp)
    shape, dt = x.shape, x.dtype

    def adjoint(g):
        gx = np.zeros(shape, dtype=dt)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _emit(np.take_along_axis(x.data, idx, axis=1), (x,), adjoint, "select_channel")
