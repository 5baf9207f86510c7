"""Dense NHWC tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs is tracked (either a ``requires_grad`` leaf or the output of an
earlier recorded op). Gradients are obtained with :func:`backward`, which
replays the tape in reverse without mutating it, so the same tape can be
differentiated from several roots.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (w * w).sum()
    >>> backward(tape, y, [w])[0]
    array([2., 2., 2.])
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand extents are inconsistent for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    """Immutable dense array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "_tape", "_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype)  # own copy: freezing must not touch the caller's array
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor constructed from non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_nonscalar():
    raise ShapeError("item() requires a single-element tensor")


class Tape:
    """Ordered record of primitive operations.

    Node ids are assigned in creation order, so every input id precedes the
    node consuming it and a reverse sweep is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._next = 0
        self._leaf_ids: dict[int, int] = {}
        self._leaves: list[Tensor] = []

    def __enter__(self) -> Tape:
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def _new_id(self) -> int:
        i = self._next
        self._next += 1
        return i

    def _input_id(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._id
        if not t.requires_grad:
            return None
        key = id(t)
        i = self._leaf_ids.get(key)
        if i is None:
            i = self._new_id()
            self._leaf_ids[key] = i
            self._leaves.append(t)
        return i

    def id_of(self, t: Tensor) -> int | None:
        """Node id of ``t`` on this tape, or None if it was never recorded."""
        if t._tape is self:
            return t._id
        return self._leaf_ids.get(id(t))


_ACTIVE: list[Tape] = []


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable, name: str) -> Tensor:
    out = np.asarray(out)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    t = Tensor.__new__(Tensor)
    out.flags.writeable = False
    t.data = out
    t.requires_grad = False
    t._tape = None
    t._id = None
    if _ACTIVE:
        tape = _ACTIVE[-1]
        ids = tuple(tape._input_id(x) for x in inputs)
        if any(i is not None for i in ids):
            t._tape = tape
            t._id = tape._new_id()
            tape.nodes.append((t._id, ids, grad_fn))
    return t


def backward(tape: Tape, root: Tensor, wrt: Sequence[Tensor] | Mapping[str, Tensor]):
    """Differentiate a scalar ``root`` with respect to ``wrt``.

    Returns a list aligned with ``wrt`` (or a dict with the same keys when a
    mapping is given). Tensors that do not influence ``root`` get exact zeros.
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    named = isinstance(wrt, Mapping)
    targets = list(wrt.values()) if named else list(wrt)
    grads: dict[int, np.ndarray] = {}
    root_id = tape.id_of(root)
    if root_id is not None:
        grads[root_id] = np.ones_like(root.data)
        wanted = {tape.id_of(t) for t in targets} - {None}
        for out_id, in_ids, fn in reversed(tape.nodes):
            g = grads.get(out_id)
            if g is None:
                continue
            if out_id not in wanted:
                del grads[out_id]
            for i, gi in zip(in_ids, fn(g)):
                if i is None or gi is None:
                    continue
                prev = grads.get(i)
                grads[i] = gi if prev is None else prev + gi
    result = []
    for t in targets:
        i = tape.id_of(t)
        g = grads.get(i) if i is not None else None
        result.append(np.zeros_like(t.data) if g is None else np.array(g, dtype=t.dtype).reshape(t.shape))
    if named:
        return dict(zip(wrt.keys(), result))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._tape is not None


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{name}: cannot combine shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def grad(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), grad, "mul")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd).astype(xd.dtype, copy=False)

    def grad(g):
        return (g * (0.5 * (1.0 + np.tanh(0.5 * xd))),)

    return _make(out, (x,), grad, "softplus")


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) evaluated as -softplus(-x)."""
    return neg(softplus(neg(x)))


def elu(x: Tensor) -> Tensor:
    xd = x.data
    neg_part = np.expm1(np.minimum(xd, 0.0))
    out = np.where(xd > 0, xd, neg_part)
    return _make(out, (x,), lambda g: (g * np.where(xd > 0, 1.0, neg_part + 1.0),), "elu")


def log1mexp(x: Tensor) -> Tensor:
    """log(1 - exp(-x)) for x > 0, accurate for both small and large x."""
    xd = x.data
    if (xd <= 0).any():
        raise NonFiniteError("log1mexp requires strictly positive input")
    small = xd < np.log(2.0)
    out = np.where(small, np.log(-np.expm1(-np.where(small, xd, 1.0))), np.log1p(-np.exp(-np.where(small, 1.0, xd))))
    return _make(out.astype(xd.dtype, copy=False), (x,), lambda g: (g / np.expm1(xd),), "log1mexp")


def maximum(x: Tensor, floor: float) -> Tensor:
    """Clamp from below by a constant; gradient passes only where x > floor."""
    xd = x.data
    return _make(np.maximum(xd, floor), (x,), lambda g: (g * (xd > floor),), "maximum")


def where(cond, a, b) -> Tensor:
    """Select elementwise; ``cond`` is a constant boolean array."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    try:
        out_shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"where: incompatible shapes {cond.shape}, {a.shape}, {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def grad(g):
        g = np.broadcast_to(g, out_shape)
        return _unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)

    return _make(np.where(cond, a.data, b.data), (a, b), grad, "where")


def dropout_mask_apply(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a precomputed (already rescaled) dropout mask."""
    mask = np.asarray(mask, dtype=x.dtype)
    if mask.shape != x.shape:
        raise ShapeError(f"dropout mask shape {mask.shape} does not match {x.shape}")
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (x,), grad, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = m + np.log(s)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * (e / s),)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (x,), grad, "logsumexp")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return sub(x, logsumexp(x, axis=axis, keepdims=True))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def split(x: Tensor, sections, axis: int = -1) -> list[Tensor]:
    """Split into equal parts (int) or at the given part sizes (sequence)."""
    n = x.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise ShapeError(f"cannot split extent {n} into {sections} equal parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise ShapeError(f"split sizes {sizes} do not sum to {n}")
    parts, start = [], 0
    ax = axis % x.ndim
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + s)
        parts.append(slice_(x, tuple(idx)))
        start += s
    return parts


def slice_(x: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    shape, dtype = x.shape, x.dtype
    out = np.array(x.data[idx])

    def grad(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(out, (x,), grad, "slice")


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad; ``widths`` holds one (before, after) pair per axis."""
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim or any(a < 0 or b < 0 for a, b in widths):
        raise ShapeError(f"invalid pad widths {widths} for shape {x.shape}")
    idx = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[idx],), "pad")


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x @ w + b."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[-1]} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    need_x = _tracked(x)

    def grad(g):
        x2 = xd.reshape(-1, xd.shape[-1])
        g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if need_x else None
        gw = x2.T @ g2
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, grad, "dense")


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(in_hw, k_hw, stride, padding):
    (h, w), (kh, kw), (sh, sw) = in_hw, k_hw, stride
    pt, pb, pl, pr = padding
    hp, wp = h + pt + pb, w + pl + pr
    if sh < 1 or sw < 1 or min(padding) < 0:
        raise ShapeError(f"invalid stride {stride} or padding {padding}")
    if hp < kh or wp < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    return (hp - kh) // sh + 1, (wp - kw) // sw + 1


def _im2col(xp: np.ndarray, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, :, a, b, :] = xp[:, a : a + sh * (ho - 1) + 1 : sh, b : b + sw * (wo - 1) + 1 : sw, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _col2im(dcols: np.ndarray, xp_shape, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    n, _, _, c = xp_shape
    dcols = dcols.reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for a in range(kh):
        for b in range(kw):
            dxp[:, a : a + sh * (ho - 1) + 1 : sh, b : b + sw * (wo - 1) + 1 : sw, :] += dcols[:, :, :, a, b, :]
    return dxp


def _conv_forward(xd, kd, stride, padding):
    kh, kw, cin, cout = kd.shape
    pt, pb, pl, pr = padding
    ho, wo = _conv_geometry(xd.shape[1:3], (kh, kw), stride, padding)
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if any(padding) else xd
    cols = _im2col(xp, kh, kw, *stride, ho, wo)
    out = (cols @ kd.reshape(-1, cout)).reshape(xd.shape[0], ho, wo, cout)
    return out, cols, xp.shape


def _conv_input_grad(g, kd, xp_shape, in_shape, stride, padding):
    kh, kw, cin, cout = kd.shape
    n, ho, wo, _ = g.shape
    dcols = g.reshape(-1, cout) @ kd.reshape(-1, cout).T
    dxp = _col2im(dcols, xp_shape, kh, kw, *stride, ho, wo)
    pt, _, pl, _ = padding
    return dxp[:, pt : pt + in_shape[1], pl : pl + in_shape[2], :]


def _normalize_conv_args(x: Tensor, k: Tensor, stride, padding, channel_axis_in: int):
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv expects 4-d input and kernel, got {x.shape} and {k.shape}")
    if x.shape[3] != k.shape[channel_axis_in]:
        raise ShapeError(f"conv channel mismatch: input {x.shape} kernel {k.shape}")
    stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
    padding = (0, 0, 0, 0) if padding is None else tuple(int(p) for p in padding)
    if len(padding) != 4:
        raise ShapeError("padding must be (top, bottom, left, right)")
    return stride, padding


def conv2d(x: Tensor, k: Tensor, stride=(1, 1), padding=(0, 0, 0, 0)) -> Tensor:
    """Cross-correlation of NHWC ``x`` with an HWIO kernel.

    Args:
        x: input of shape [N, H, W, Cin].
        k: kernel of shape [kh, kw, Cin, Cout].
        stride: (sh, sw) or a single int.
        padding: zero padding per edge as (top, bottom, left, right).

    Returns:
        Tensor of shape [N, H', W', Cout] with
        H' = (H + top + bottom - kh) // sh + 1 and likewise for W'.
    """
    stride, padding = _normalize_conv_args(x, k, stride, padding, 2)
    xd, kd = x.data, k.data
    out, cols, xp_shape = _conv_forward(xd, kd, stride, padding)
    cout = kd.shape[3]

    need_x = _tracked(x)

    def grad(g):
        g = np.ascontiguousarray(g)
        gx = _conv_input_grad(g, kd, xp_shape, xd.shape, stride, padding) if need_x else None
        gk = (cols.T @ g.reshape(-1, cout)).reshape(kd.shape)
        return gx, gk

    return _make(out, (x, k), grad, "conv2d")


def conv2d_transpose(x: Tensor, k: Tensor, stride=(1, 1), padding=(0, 0, 0, 0), output_hw=None) -> Tensor:
    """Adjoint of :func:`conv2d` for the same kernel and geometry.

    ``x`` has Cout channels (the kernel's last axis) and the result has Cin.
    The result extent defaults to the smallest H with
    ``(H + top + bottom - kh) // sh + 1 == x.shape[1]``; pass ``output_hw``
    to pick a larger admissible extent.
    """
    stride, padding = _normalize_conv_args(x, k, stride, padding, 3)
    xd, kd = x.data, k.data
    kh, kw, cin, cout = kd.shape
    (sh, sw), (pt, pb, pl, pr) = stride, padding
    n, hi, wi, _ = xd.shape
    if output_hw is None:
        output_hw = ((hi - 1) * sh + kh - pt - pb, (wi - 1) * sw + kw - pl - pr)
    ho, wo = output_hw
    if _conv_geometry((ho, wo), (kh, kw), stride, padding) != (hi, wi):
        raise ShapeError(f"output extent {output_hw} is inconsistent with input {xd.shape[1:3]} under stride {stride}")
    in_shape = (n, ho, wo, cin)
    xp_shape = (n, ho + pt + pb, wo + pl + pr, cin)
    out = _conv_input_grad(xd, kd, xp_shape, in_shape, stride, padding)
    out = np.ascontiguousarray(out)

    def grad(g):
        gx, cols, _ = _conv_forward(np.ascontiguousarray(g), kd, stride, padding)
        gk = (cols.T @ xd.reshape(-1, cout)).reshape(kd.shape)
        return gx, gk

    return _make(out, (x, k), grad, "conv2d_transpose")


__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "concat",
    "conv2d",
    "conv2d_transpose",
    "dense",
    "dropout_mask_apply",
    "elu",
    "exp",
    "log",
    "log1mexp",
    "log_sigmoid",
    "log_softmax",
    "logsumexp",
    "maximum",
    "mean",
    "mul",
    "neg",
    "pad",
    "reshape",
    "sigmoid",
    "slice_",
    "softplus",
    "split",
    "sub",
    "sum_",
    "tanh",
    "where",
]
