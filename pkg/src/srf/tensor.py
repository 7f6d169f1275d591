"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations needed by the radiance-field graph are provided. Every
operation records a closure on a dynamic tape; ``Tensor.backward`` walks the
tape in reverse topological order, accumulates gradients into leaf tensors and
then releases the tape. A released graph cannot be differentiated a second
time.

Precision is a process-wide setting (``set_default_dtype`` / ``precision``):
float32 for training, float64 for gradient checking.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "GraphError",
    "tensor",
    "zeros",
    "get_default_dtype",
    "set_default_dtype",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "sigmoid",
    "relu",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take",
    "cumsum",
    "linear",
    "conv2d",
    "max_pool_rows",
    "bilinear_sample",
    "mean_squared_error",
]


class GraphError(RuntimeError):
    """Raised for invalid use of the differentiation tape."""


_state = threading.local()
_default_dtype = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating point precision."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    """Dense array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_released", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        target = np.dtype(dtype) if dtype is not None else _default_dtype
        if arr.dtype != target:
            arr = arr.astype(target)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._released = False
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- gradient handling ---------------------------------------------
    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def backward(self, grad=None) -> None:
        """Back-propagate from this tensor and release the recorded graph."""
        if self._released:
            raise GraphError("backward called twice on the same graph")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise GraphError(f"grad shape {grad.shape} does not match {self.data.shape}")

        order = _topological_order(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    node._accumulate(g)
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg
            node._backward = None
            node._parents = ()
            node._released = True

    # -- operator sugar ------------------------------------------------
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

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def _topological_order(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._released:
            raise GraphError("graph has already been released by a previous backward")
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._released = False
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), backward)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    shape = a.shape
    out = np.asarray(a.data.mean())
    return _make(out, (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g) if _has_advanced(index) else full.__setitem__(index, g)
        return (full,)

    return _make(out, (a,), backward)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ValueError(
                f"concat shape mismatch along non-concat axes: {[t.shape for t in tensors]}"
            )
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(out, tensors, backward)


def take(a, indices, axis: int) -> Tensor:
    """Gather ``indices`` along ``axis`` (integer array, no gradient)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    shape = a.shape
    out = np.take(a.data, idx, axis=ax)
    unique = np.unique(idx).size == idx.size

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        sel = (slice(None),) * ax + (idx,)
        if unique:
            full[sel] = g
        else:
            np.add.at(full, sel, g)
        return (full,)

    return _make(out, (a,), backward)


def cumsum(a, axis: int = -1, exclusive: bool = False) -> Tensor:
    """Cumulative sum; the exclusive variant starts every run at zero."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    out = np.cumsum(a.data, axis=ax)
    if exclusive:
        out = out - a.data

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax)
        if exclusive:
            rev = rev - g
        return (rev,)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the trailing axis: ``x @ weight.T + bias``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2:
        raise ValueError(f"linear weight must be 2-D, got shape {weight.shape}")
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ValueError(f"linear: input trailing dimension {x.shape[-1]} != weight D_in {d_in}")
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (d_out,):
            raise ValueError(f"linear: bias shape {bias.shape} != ({d_out},)")
        parents.append(bias)
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, d_in)
    out = x2 @ wd.T
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ wd).reshape(lead + (d_in,)) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out.reshape(lead + (d_out,)), parents, backward)


def _pair(v) -> tuple:
    if isinstance(v, int):
        return (v, v)
    v = tuple(v)
    if len(v) != 2 or min(v) < 1:
        raise ValueError(f"stride must be a positive int pair, got {v}")
    return v


def conv2d(x, kernel, bias=None, stride=1, padding: str = "valid") -> Tensor:
    """2-D cross-correlation of ``[C_in,H,W]`` or ``[B,C_in,H,W]`` inputs.

    ``padding`` is ``"valid"`` or ``"same"`` (zero padding of ``(k-1)//2`` on
    the leading side and ``k//2`` on the trailing side). Output extents follow
    ``floor((H + pad - kh) / sh) + 1``.

    The kernel is applied one kernel row at a time, so the unfolded input is
    never materialised in full.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ValueError(f"conv2d input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be [C_out,C_in,kh,kw], got {kernel.shape}")
    xd = x.data if batched else x.data[None]
    B, C, H, W = xd.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ValueError(f"conv2d: input has {C} channels but kernel expects {Ck}")
    sh, sw = _pair(stride)
    if padding == "same":
        pads = ((kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2)
    elif padding == "valid":
        pads = (0, 0, 0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    Hp, Wp = H + pads[0] + pads[1], W + pads[2] + pads[3]
    if kh > Hp or kw > Wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kh) // sh + 1, (Wp - kw) // sw + 1
    if any(pads):
        xp = np.zeros((B, C, Hp, Wp), dtype=xd.dtype)
        xp[:, :, pads[0] : pads[0] + H, pads[2] : pads[2] + W] = xd
    else:
        xp = xd
    kd = kernel.data
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (O,):
            raise ValueError(f"conv2d: bias shape {bias.shape} != ({O},)")
        parents.append(bias)

    if Wo == 1 and kw == Wp:
        return _conv2d_full_width(x, kernel, bias, xp, batched, pads, (B, C, H, W), (O, kh, kw), sh, Ho, parents)

    def unfold_row(i):
        rows = xp[:, :, i : i + sh * (Ho - 1) + 1 : sh, :]
        win = np.lib.stride_tricks.sliding_window_view(rows, kw, axis=3)[:, :, :, : sw * (Wo - 1) + 1 : sw]
        # [B, C, Ho, Wo, kw] -> [B*Ho*Wo, C*kw]
        return win.transpose(0, 2, 3, 1, 4).reshape(B * Ho * Wo, C * kw)

    out = np.zeros((B * Ho * Wo, O), dtype=xd.dtype)
    for i in range(kh):
        out += unfold_row(i) @ kd[:, :, i, :].reshape(O, C * kw).T
    if bias is not None:
        out += bias.data
    result = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    result = np.ascontiguousarray(result if batched else result[0])

    def backward(g):
        g4 = g if batched else g[None]
        g2 = g4.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gk = np.zeros_like(kd) if kernel.requires_grad else None
        gxp = np.zeros((B, C, Hp, Wp), dtype=xd.dtype) if x.requires_grad else None
        for i in range(kh):
            kmat = kd[:, :, i, :].reshape(O, C * kw)
            if gk is not None:
                gk[:, :, i, :] = (g2.T @ unfold_row(i)).reshape(O, C, kw)
            if gxp is None:
                continue
            gcol = (g2 @ kmat).reshape(B, Ho, Wo, C, kw)
            rsl = slice(i, i + sh * (Ho - 1) + 1, sh)
            if Wo <= kw:
                for o in range(Wo):
                    gxp[:, :, rsl, o * sw : o * sw + kw] += gcol[:, :, o].transpose(0, 2, 1, 3)
            else:
                for j in range(kw):
                    gxp[:, :, rsl, j : j + sw * (Wo - 1) + 1 : sw] += gcol[..., j].transpose(0, 3, 1, 2)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, pads[0] : pads[0] + H, pads[2] : pads[2] + W]
            gx = np.ascontiguousarray(gx if batched else gx[0])
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return _make(result, parents, backward)


def _conv2d_full_width(x, kernel, bias, xp, batched, pads, in_shape, k_shape, sh, Ho, parents):
    # The kernel spans the whole padded width, so each kernel row contracts a
    # full input row: one contiguous GEMM per kernel row, outputs shifted.
    B, C, H, W = in_shape
    O, kh, kw = k_shape
    Hp = xp.shape[2]
    kd = kernel.data
    xrow = (xp[:, 0] if C == 1 else xp.transpose(0, 2, 1, 3)).reshape(B, Hp, C * kw)
    out = np.zeros((B, Ho, O), dtype=xp.dtype)
    last = sh * (Ho - 1) + 1
    for i in range(kh):
        kmat = kd[:, :, i, :].reshape(O, C * kw)
        full = (xrow.reshape(B * Hp, C * kw) @ kmat.T).reshape(B, Hp, O)
        out += full[:, i : i + last : sh]
    if bias is not None:
        out += bias.data
    result = np.ascontiguousarray(out.transpose(0, 2, 1)[..., None])
    if not batched:
        result = result[0]

    def backward(g):
        g4 = g if batched else g[None]
        g3 = np.ascontiguousarray(g4[..., 0].transpose(0, 2, 1))  # [B, Ho, O]
        gk = np.zeros_like(kd) if kernel.requires_grad else None
        grow = np.zeros((B, Hp, C * kw), dtype=xp.dtype) if x.requires_grad else None
        for i in range(kh):
            kmat = kd[:, :, i, :].reshape(O, C * kw)
            rows = slice(i, i + last, sh)
            if gk is not None:
                gk[:, :, i, :] = (g3.reshape(-1, O).T @ xrow[:, rows].reshape(-1, C * kw)).reshape(O, C, kw)
            if grow is not None:
                grow[:, rows] += g3 @ kmat
        gx = None
        if grow is not None:
            gxp = grow[:, :, None, :] if C == 1 else grow.reshape(B, Hp, C, kw).transpose(0, 2, 1, 3)
            gxp = gxp.reshape(B, C, Hp, kw) if C == 1 else gxp
            gx = gxp[:, :, pads[0] : pads[0] + H, pads[2] : pads[2] + W]
            gx = np.ascontiguousarray(gx if batched else gx[0])
        if bias is None:
            return gx, gk
        return gx, gk, g3.reshape(-1, O).sum(axis=0)

    return _make(result, parents, backward)


def max_pool_rows(x) -> Tensor:
    """Column-wise maximum over the row axis of ``[..., R, K]``.

    Gradient routes to the first maximal row of every column.
    """
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"max_pool_rows expects [..., R, K], got {x.shape}")
    if x.shape[-2] == 0:
        raise ValueError("max_pool_rows: need at least one row")
    xd = x.data
    arg = np.argmax(xd, axis=-2)  # first occurrence on ties
    out = np.take_along_axis(xd, arg[..., None, :], axis=-2)[..., 0, :]
    shape = xd.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, arg[..., None, :], g[..., None, :], axis=-2)
        return (full,)

    return _make(out, (x,), backward)


def _bilinear_matrix(u, v, H, W, mask, n_maps, dtype):
    """Sparse interpolation matrix mapping texels of ``n_maps`` stacked maps."""
    # u, v: [M, n_maps] continuous pixel coordinates (texel centres at integers)
    M = u.shape[0]
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = u - u0
    fv = v - v0
    u0 = u0.astype(np.int64)
    v0 = v0.astype(np.int64)
    view = np.broadcast_to(np.arange(n_maps), u.shape)
    rows = np.broadcast_to(np.arange(M)[:, None] * n_maps, u.shape) + view
    rr, cc, ww = [], [], []
    for du, dv, w in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)), (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        uu = u0 + du
        vv = v0 + dv
        ok = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
        if mask is not None:
            ok &= mask
        ok &= w != 0
        rr.append(rows[ok])
        cc.append(view[ok] * (H * W) + vv[ok] * W + uu[ok])
        ww.append(w[ok])
    rr = np.concatenate(rr)
    cc = np.concatenate(cc)
    ww = np.concatenate(ww).astype(dtype)
    return sp.csr_matrix((ww, (rr, cc)), shape=(M * n_maps, n_maps * H * W))


def bilinear_sample(featmap, u, v, mask=None) -> Tensor:
    """Bilinear lookup with zero padding outside the map.

    ``featmap`` is ``[C,H,W]`` (``u``/``v`` of any shape ``S``, result
    ``S + [C]``) or a stack ``[N,C,H,W]`` (``u``/``v`` of shape ``S + [N]``,
    result ``S + [N, C]``, map ``n`` sampled at ``u[..., n]``). Integer
    coordinates address texel centres. ``mask`` (same shape as ``u``) zeroes
    selected lookups. Differentiable with respect to ``featmap`` only.
    """
    featmap = _as_tensor(featmap)
    stacked = featmap.ndim == 4
    if featmap.ndim not in (3, 4):
        raise ValueError(f"bilinear_sample expects [C,H,W] or [N,C,H,W], got {featmap.shape}")
    fd = featmap.data if stacked else featmap.data[None]
    N, C, H, W = fd.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"u and v shapes differ: {u.shape} vs {v.shape}")
    if stacked:
        if u.ndim == 0 or u.shape[-1] != N:
            raise ValueError(f"coordinates must end with the map count {N}, got {u.shape}")
        lead = u.shape[:-1]
    else:
        lead = u.shape
        u, v = u[..., None], v[..., None]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1, N)
    # non-finite coordinates are treated as outside the image
    bad = ~(np.isfinite(u) & np.isfinite(v))
    if bad.any():
        u = np.where(bad, -2.0, u)
        v = np.where(bad, -2.0, v)
    S = _bilinear_matrix(u.reshape(-1, N), v.reshape(-1, N), H, W, mask, N, fd.dtype)
    flat = np.ascontiguousarray(fd.transpose(0, 2, 3, 1)).reshape(N * H * W, C)
    out = np.asarray(S @ flat)
    out = out.reshape(lead + ((N, C) if stacked else (C,)))

    def backward(g):
        gflat = np.asarray(S.T @ g.reshape(-1, C))
        gmap = gflat.reshape(N, H, W, C).transpose(0, 3, 1, 2)
        return (np.ascontiguousarray(gmap if stacked else gmap[0]),)

    return _make(out, (featmap,), backward)


def mean_squared_error(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mean_squared_error shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff))

    def backward(g):
        scale = 2.0 * g / n
        return diff * scale, -diff * scale

    return _make(out.astype(a.dtype), (a, b), backward)


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
