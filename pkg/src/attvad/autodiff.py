"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every operation applied to traced values during a
forward pass (define-by-run).  :func:`backward` walks the tape in reverse and
returns a gradient for each requested leaf.

Operations accept :class:`Var` instances, numpy arrays or python scalars.
When none of the inputs is traced the operation is evaluated eagerly and a
plain ``numpy.ndarray`` is returned, so the same layer code serves both the
training path (taped) and the inference path (untaped).

There is no implicit broadcasting: binary element-wise ops require equal
shapes, except that one operand may be a python scalar.  Use :func:`expand`
to copy size-1 axes explicitly.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError", "Tape", "Var", "value_of", "backward", "grad_check",
    "matmul", "add", "sub", "mul", "neg", "concat", "slice_", "expand", "reshape",
    "transpose", "sigmoid", "tanh", "relu", "log", "power", "clamp",
    "sum_", "mean", "max_", "conv1d", "conv2d", "lstm",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's shape rule."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class _Node:
    __slots__ = ("kind", "inputs", "vjp")

    def __init__(self, kind, inputs, vjp):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp


class Var:
    """A traced value: a float64 array bound to a node on one tape."""

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 100

    def __init__(self, value: np.ndarray, tape: "Tape", node: int):
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, node={self.node})"

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

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only operation record.  One tape per forward pass, one thread per tape."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_shapes: dict[int, tuple] = {}

    def __len__(self):
        return len(self.nodes)

    def param(self, array) -> Var:
        """Register ``array`` as a differentiable leaf."""
        value = np.array(array, dtype=np.float64)
        var = self._record("leaf", (), None, value)
        self._leaf_shapes[var.node] = value.shape
        return var

    def _record(self, kind, inputs, vjp, value) -> Var:
        self.nodes.append(_Node(kind, inputs, vjp))
        return Var(value, self, len(self.nodes) - 1)


def value_of(x) -> np.ndarray:
    """Underlying array of a Var, or ``x`` itself as a float64 array."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _emit(kind, xs, value, vjp):
    """Record ``value`` on the tape shared by ``xs`` (or return it untraced)."""
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{kind}: non-finite values in forward result")
    tape = _tape_of(*xs)
    if tape is None:
        return value
    inputs = tuple(x.node if isinstance(x, Var) else None for x in xs)
    return tape._record(kind, inputs, vjp, value)


def backward(tape: Tape, loss: Var, wrt: Sequence[Var] | None = None):
    """Gradients of scalar ``loss`` with respect to each leaf in ``wrt``.

    Leaves that do not influence ``loss`` get zero gradients.  A leaf used at
    several sites receives the sum of the per-site gradients.  With
    ``wrt=None`` every leaf on the tape is returned, in registration order.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ValueError("loss must be a Var recorded on this tape")
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    if wrt is None:
        leaf_ids = list(tape._leaf_shapes)
    else:
        leaf_ids = [v.node for v in wrt]
        if any(v.tape is not tape or i not in tape._leaf_shapes for v, i in zip(wrt, leaf_ids)):
            raise ValueError("wrt must contain leaves of this tape")

    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.node] = np.ones_like(loss.value)
    for i in range(loss.node, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        in_grads = node.vjp(g)
        for src, gi in zip(node.inputs, in_grads):
            if src is None or gi is None:
                continue
            if grads[src] is None:
                grads[src] = gi
            else:
                grads[src] = grads[src] + gi
        if node.kind != "leaf":
            grads[i] = None

    return [grads[j] if grads[j] is not None else np.zeros(tape._leaf_shapes[j])
            for j in leaf_ids]


def grad_check(fn: Callable, point, epsilon: float = 1e-5, coords=None, floor: float = 1e-8) -> float:
    """Max relative error between taped gradient and central differences.

    ``fn`` maps one array-or-Var to a scalar using the ops in this module.
    The relative error of each element is ``|a - b| / max(|a|, |b|, floor)``.
    ``coords`` optionally restricts the finite differences to these flat
    indices of ``point``; the taped gradient is always computed in full.
    """
    if epsilon <= 0 or floor <= 0:
        raise ValueError("epsilon and floor must be positive")
    x0 = np.array(point, dtype=np.float64)
    tape = Tape()
    leaf = tape.param(x0)
    out = fn(leaf)
    (analytic,) = backward(tape, out, [leaf])

    flat = x0.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.intp).reshape(-1)
    numeric = np.zeros(idx.size)
    for n, k in enumerate(idx):
        xp = flat.copy()
        xm = flat.copy()
        xp[k] += epsilon
        xm[k] -= epsilon
        fp = float(value_of(fn(xp.reshape(x0.shape))))
        fm = float(value_of(fn(xm.reshape(x0.shape))))
        numeric[n] = (fp - fm) / (2.0 * epsilon)

    if idx.size == 0:
        return 0.0
    a = analytic.reshape(-1)[idx]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    return float(np.max(np.abs(a - numeric) / denom))


# ---------------------------------------------------------------------------
# element-wise binary ops


def _binary_shapes(op, a, b):
    va, vb = value_of(a), value_of(b)
    if va.ndim and vb.ndim and va.shape != vb.shape:
        raise ShapeError(op, va.shape, vb.shape, detail="use expand() to broadcast")
    if va.ndim == 0 and vb.ndim == 0:
        return va, vb, ()
    return va, vb, (va.shape if va.ndim else vb.shape)


def _reduce_to(g, shape):
    return g.sum() if shape == () and g.shape != () else g


def add(a, b):
    va, vb, _ = _binary_shapes("add", a, b)
    sa, sb = va.shape, vb.shape
    return _emit("add", (a, b), va + vb,
                 lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b):
    va, vb, _ = _binary_shapes("sub", a, b)
    sa, sb = va.shape, vb.shape
    return _emit("sub", (a, b), va - vb,
                 lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b):
    va, vb, _ = _binary_shapes("mul", a, b)
    sa, sb = va.shape, vb.shape
    return _emit("mul", (a, b), va * vb,
                 lambda g: (_reduce_to(g * vb, sa), _reduce_to(g * va, sb)))


def neg(a):
    return _emit("neg", (a,), -value_of(a), lambda g: (-g,))


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b):
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)`` with equal batch dims."""
    va, vb = value_of(a), value_of(b)
    if va.ndim < 2 or vb.ndim < 2 or va.shape[-1] != vb.shape[-2]:
        raise ShapeError("matmul", va.shape, vb.shape)
    if vb.ndim > 2 and va.shape[:-2] != vb.shape[:-2]:
        raise ShapeError("matmul", va.shape, vb.shape, detail="batch dims differ")
    out = va @ vb

    def vjp(g):
        ga = g @ np.swapaxes(vb, -1, -2)
        if vb.ndim == 2:
            gb = va.reshape(-1, va.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(va, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def concat(xs: Sequence, axis: int):
    vals = [value_of(x) for x in xs]
    ref = vals[0]
    ax = axis % ref.ndim
    for v in vals[1:]:
        if v.ndim != ref.ndim or any(
            v.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise ShapeError(f"concat(axis={axis})", ref.shape, v.shape)
    out = np.concatenate(vals, axis=ax)
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", tuple(xs), out, vjp)


def slice_(x, index):
    """Basic (non-fancy) indexing; ``index`` is a slice, int or tuple of those."""
    vx = value_of(x)
    try:
        out = np.array(vx[index], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError("slice", vx.shape, detail=str(exc)) from None
    shape = vx.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("slice", (x,), out, vjp)


def expand(x, shape):
    """Copy size-1 axes of ``x`` to reach ``shape`` (same rank required)."""
    vx = value_of(x)
    shape = tuple(shape)
    if vx.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(vx.shape, shape)):
        raise ShapeError("expand", vx.shape, shape)
    axes = tuple(d for d, (s, t) in enumerate(zip(vx.shape, shape)) if s != t)
    out = np.array(np.broadcast_to(vx, shape))

    def vjp(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _emit("expand", (x,), out, vjp)


def reshape(x, shape):
    vx = value_of(x)
    try:
        out = vx.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", vx.shape, tuple(shape)) from None
    src = vx.shape
    return _emit("reshape", (x,), out, lambda g: (g.reshape(src),))


def transpose(x, axes=None):
    vx = value_of(x)
    if axes is None:
        axes = tuple(reversed(range(vx.ndim)))
    axes = tuple(axes)
    if sorted(a % vx.ndim for a in axes) != list(range(vx.ndim)):
        raise ShapeError("transpose", vx.shape, axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(vx, axes),
                 lambda g: (np.transpose(g, inv),))


# ---------------------------------------------------------------------------
# element-wise unary ops


def sigmoid(x):
    vx = value_of(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(vx))
    out = np.where(vx >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x):
    out = np.tanh(value_of(x))
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def relu(x):
    vx = value_of(x)
    mask = vx > 0
    return _emit("relu", (x,), np.where(mask, vx, 0.0), lambda g: (g * mask,))


def log(x):
    vx = value_of(x)
    if np.any(vx <= 0):
        raise ValueError("log: non-positive input")
    return _emit("log", (x,), np.log(vx), lambda g: (g / vx,))


def power(x, p: float):
    """``x ** p`` for a scalar exponent.

    Where ``x == 0`` and ``p < 1`` the derivative is taken as 0 (the one-sided
    subgradient used for ``sqrt`` of a zero variance).
    """
    vx = value_of(x)
    p = float(p)
    if p != int(p) and np.any(vx < 0):
        raise ValueError("power: negative base with fractional exponent")
    out = np.power(vx, p)

    def vjp(g):
        if p == 0.0:
            return (np.zeros_like(vx),)
        if p >= 1.0:
            return (g * p * np.power(vx, p - 1.0),)
        safe = vx != 0
        d = np.where(safe, p * np.power(np.where(safe, vx, 1.0), p - 1.0), 0.0)
        return (g * d,)

    return _emit("power", (x,), out, vjp)


def clamp(x, lo: float, hi: float):
    vx = value_of(x)
    mask = (vx >= lo) & (vx <= hi)
    return _emit("clamp", (x,), np.clip(vx, lo, hi), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False):
    vx = value_of(x)
    ax = _norm_axis(axis, vx.ndim)
    out = vx.sum(axis=ax, keepdims=keepdims)
    shape = vx.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), np.asarray(out, dtype=np.float64), vjp)


def mean(x, axis=None, keepdims: bool = False):
    vx = value_of(x)
    ax = _norm_axis(axis, vx.ndim)
    n = int(np.prod([vx.shape[a] for a in ax])) if ax else 1
    if n == 0:
        raise ShapeError("mean", vx.shape, detail="empty reduction")
    out = vx.mean(axis=ax, keepdims=keepdims)
    shape = vx.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit("mean", (x,), np.asarray(out, dtype=np.float64), vjp)


def max_(x, axis: int, keepdims: bool = False):
    """Max along one axis; the gradient goes to the first (lowest-index) maximum."""
    vx = value_of(x)
    ax = axis % vx.ndim
    idx = np.expand_dims(np.argmax(vx, axis=ax), ax)
    out = np.take_along_axis(vx, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros_like(vx)
        np.put_along_axis(full, idx, g, axis=ax)
        return (full,)

    return _emit("max", (x,), out, vjp)


# ---------------------------------------------------------------------------
# fused layer primitives


def _check_same_kernel(op, k):
    if k % 2 == 0:
        raise ShapeError(op, (k,), detail="kernel size must be odd for same padding")


def _conv1d_raw(x, w):
    k = w.shape[-1]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
    win = sliding_window_view(xp, k, axis=2)  # B, C_in, L, K
    return np.einsum("bclk,ock->bol", win, w, optimize=True)


def conv1d(x, w, b):
    """Same-padded 1-D cross-correlation: ``(B, C_in, L) -> (B, C_out, L)``.

    ``b`` may be ``None`` (no bias).
    """
    vx, vw = value_of(x), value_of(w)
    if vx.ndim != 3 or vw.ndim != 3 or vx.shape[1] != vw.shape[1]:
        raise ShapeError("conv1d", vx.shape, vw.shape)
    _check_same_kernel("conv1d", vw.shape[-1])
    out = _conv1d_raw(vx, vw)
    if b is not None:
        vb = value_of(b)
        if vb.shape != (vw.shape[0],):
            raise ShapeError("conv1d", vw.shape, vb.shape, detail="bias")
        out = out + vb[None, :, None]
    k = vw.shape[-1]
    p = (k - 1) // 2

    def vjp(g):
        gx = _conv1d_raw(g, np.ascontiguousarray(vw[:, :, ::-1].transpose(1, 0, 2)))
        xp = np.pad(vx, ((0, 0), (0, 0), (p, p)))
        win = sliding_window_view(xp, k, axis=2)
        gw = np.einsum("bclk,bol->ock", win, g, optimize=True)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv1d", inputs, out, vjp)


def _conv2d_raw(x, w):
    k = w.shape[-1]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C_in, H, W, K, K
    return np.einsum("bchwij,ocij->bohw", win, w, optimize=True)


def conv2d(x, w, b):
    """Same-padded 2-D cross-correlation: ``(B, C_in, H, W) -> (B, C_out, H, W)``."""
    vx, vw = value_of(x), value_of(w)
    if vx.ndim != 4 or vw.ndim != 4 or vx.shape[1] != vw.shape[1] or vw.shape[2] != vw.shape[3]:
        raise ShapeError("conv2d", vx.shape, vw.shape)
    _check_same_kernel("conv2d", vw.shape[-1])
    out = _conv2d_raw(vx, vw)
    if b is not None:
        vb = value_of(b)
        if vb.shape != (vw.shape[0],):
            raise ShapeError("conv2d", vw.shape, vb.shape, detail="bias")
        out = out + vb[None, :, None, None]
    k = vw.shape[-1]
    p = (k - 1) // 2

    def vjp(g):
        flipped = np.ascontiguousarray(vw[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _conv2d_raw(g, flipped)
        xp = np.pad(vx, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))
        gw = np.einsum("bchwij,bohw->ocij", win, g, optimize=True)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", inputs, out, vjp)


def _sig(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def lstm(x, w_ih, w_hh, b, h0=None, c0=None):
    """Unrolled LSTM layer over ``x`` of shape ``(B, T, I)``.

    Gate rows of the weight matrices are stacked in the order input, forget,
    cell candidate, output.  Returns ``(H, (h_T, c_T))`` where ``H`` is the
    ``(B, T, D)`` sequence of hidden states and the final state is returned
    untraced.  ``h0``/``c0`` are constants (zeros when omitted).
    """
    vx, wi, wh, vb = value_of(x), value_of(w_ih), value_of(w_hh), value_of(b)
    if vx.ndim != 3:
        raise ShapeError("lstm", vx.shape, detail="expected (B, T, I)")
    d4, n_in = wi.shape
    d = d4 // 4
    if d4 % 4 or n_in != vx.shape[2] or wh.shape != (d4, d) or vb.shape != (d4,):
        raise ShapeError("lstm", vx.shape, wi.shape, wh.shape, vb.shape)
    bsz, steps, _ = vx.shape
    if steps < 1:
        raise ShapeError("lstm", vx.shape, detail="T must be >= 1")
    h = np.zeros((bsz, d)) if h0 is None else np.broadcast_to(value_of(h0), (bsz, d)).copy()
    c = np.zeros((bsz, d)) if c0 is None else np.broadcast_to(value_of(c0), (bsz, d)).copy()
    h_init, c_init = h, c

    xp = vx @ wi.T + vb
    hs = np.empty((bsz, steps, d))
    cs = np.empty((bsz, steps, d))
    gates = np.empty((bsz, steps, d4))
    for t in range(steps):
        z = xp[:, t] + h @ wh.T
        ifo = _sig(z[:, np.r_[0:2 * d, 3 * d:4 * d]])
        gi, gf, go = ifo[:, :d], ifo[:, d:2 * d], ifo[:, 2 * d:]
        gg = np.tanh(z[:, 2 * d:3 * d])
        c = gf * c + gi * gg
        h = go * np.tanh(c)
        gates[:, t, :d], gates[:, t, d:2 * d] = gi, gf
        gates[:, t, 2 * d:3 * d], gates[:, t, 3 * d:] = gg, go
        hs[:, t], cs[:, t] = h, c

    def vjp(gh_seq):
        gz = np.empty_like(gates)
        dh_next = np.zeros((bsz, d))
        dc_next = np.zeros((bsz, d))
        for t in range(steps - 1, -1, -1):
            gi, gf = gates[:, t, :d], gates[:, t, d:2 * d]
            gg, go = gates[:, t, 2 * d:3 * d], gates[:, t, 3 * d:]
            c_t = cs[:, t]
            c_prev = cs[:, t - 1] if t > 0 else c_init
            tc = np.tanh(c_t)
            dh = gh_seq[:, t] + dh_next
            dc = dc_next + dh * go * (1.0 - tc * tc)
            gz[:, t, :d] = dc * gg * gi * (1.0 - gi)
            gz[:, t, d:2 * d] = dc * c_prev * gf * (1.0 - gf)
            gz[:, t, 2 * d:3 * d] = dc * gi * (1.0 - gg * gg)
            gz[:, t, 3 * d:] = dh * tc * go * (1.0 - go)
            dc_next = dc * gf
            dh_next = gz[:, t] @ wh
        flat_gz = gz.reshape(-1, d4)
        gx = gz @ wi
        g_wi = flat_gz.T @ vx.reshape(-1, n_in)
        h_prev = np.concatenate([h_init[:, None], hs[:, :-1]], axis=1).reshape(-1, d)
        g_wh = flat_gz.T @ h_prev
        g_b = flat_gz.sum(axis=0)
        return gx, g_wi, g_wh, g_b

    out = _emit("lstm", (x, w_ih, w_hh, b), hs, vjp)
    return out, (h.copy(), c.copy())
