"""Small reverse-mode autodiff over dense float64 numpy arrays.

Only the operations needed by the two metamodels and the anomaly
estimator are provided. Graph recording happens only while a :class:`Tape`
is active, so inference outside a tape carries no bookkeeping cost::

    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    grads = backward(tape, loss)      # {id(w): array([2., 4.])}
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_node_ids = itertools.count()
_active: list["Tape"] = []


class Tape:
    """Ordered record of the primitive ops of one forward pass.

    Nodes are appended as they are created, which is already a topological
    order; :func:`backward` walks it in reverse.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _recording() -> Tape | None:
    return _active[-1] if _active else None


class Tensor:
    """A value in the graph: ``data`` plus optional backward closure."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "id", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.base is not None or not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.id = next(_node_ids)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return tsum(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.id = next(_node_ids)
    out.op = op
    tape = _recording()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Hadamard product (with numpy broadcasting of size-1 axes)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "hadamard")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "hadamard")


hadamard = mul


def matmul(a, b) -> Tensor:
    """Matrix-matrix or matrix-vector product."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2) or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul: shape mismatch {ad.shape} @ {bd.shape}")

    def back(g):
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), back, "matmul")


def tsum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[idx] += g  # basic indexing only: no repeated targets
        return (out,)

    return _make(a.data[idx].copy(), (a,), back, "getitem")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    n = len(ts)
    return _make(np.stack([t.data for t in ts], axis=axis), tuple(ts),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# ---------------------------------------------------------------- nonlinearity

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form: cannot overflow, and one transcendental per entry
    s = 0.5 + 0.5 * np.tanh(0.5 * a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def prelu(x, slope) -> Tensor:
    """max(x, 0) + slope * min(x, 0); ``slope`` may be a learnable tensor."""
    x, slope = as_tensor(x), as_tensor(slope)
    xd, sd = x.data, slope.data
    pos = np.maximum(xd, 0.0)
    neg = np.minimum(xd, 0.0)

    def back(g):
        gx = g * np.where(xd > 0, 1.0, sd)
        return gx, _unbroadcast(g * neg, sd.shape)

    return _make(pos + sd * neg, (x, slope), back, "prelu")


def huber(a, gamma: float) -> Tensor:
    """Entrywise x**2 for |x| <= gamma/2, gamma*|x| - gamma**2/4 beyond."""
    a = as_tensor(a)
    x = a.data
    if not np.isfinite(gamma):
        return _make(x * x, (a,), lambda g: (2.0 * x * g,), "huber")
    h = gamma / 2.0
    inner = np.abs(x) <= h
    val = np.where(inner, x * x, gamma * np.abs(x) - gamma * gamma / 4.0)
    d = np.where(inner, 2.0 * x, gamma * np.sign(x))
    return _make(val, (a,), lambda g: (g * d,), "huber")


def elementwise(op: str, *args, **kw) -> Tensor:
    """Dispatch by name: sigmoid, tanh, relu, prelu, add, hadamard, huber."""
    table = {
        "sigmoid": sigmoid,
        "tanh": tanh,
        "relu": relu,
        "prelu": prelu,
        "add": add,
        "hadamard": mul,
        "huber": huber,
    }
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args, **kw)


# ---------------------------------------------------------------- convolution

def _replication_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    return np.pad(x, widths, mode="edge")


def conv1d(x, w, dilation: int = 1) -> Tensor:
    """Length-preserving 1-D cross-correlation with replication padding.

    Shapes: ``x`` is ``(p,)``, ``(C_in, p)`` or ``(B, C_in, p)``; ``w`` is
    ``(k,)`` for single-channel use or ``(C_out, C_in, k)``. ``k`` must be
    odd. The output keeps ``x``'s leading layout with ``C_out`` channels.
    """
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    single = wd.ndim == 1
    if single:
        if xd.ndim != 1:
            raise ValueError("1-D kernel needs a 1-D signal")
        xb, wb = xd[None, None, :], wd[None, None, :]
    else:
        if wd.ndim != 3:
            raise ValueError("kernel must be (k,) or (C_out, C_in, k)")
        if xd.ndim == 2:
            xb = xd[None]
        elif xd.ndim == 3:
            xb = xd
        else:
            raise ValueError(f"conv1d: bad signal shape {xd.shape}")
        wb = wd
    c_out, c_in, k = wb.shape
    if xb.shape[1] != c_in:
        raise ValueError(f"conv1d: signal has {xb.shape[1]} channels, kernel expects {c_in}")
    if k % 2 == 0:
        raise ValueError("conv1d: kernel length must be odd")
    p = xb.shape[-1]
    span = dilation * (k - 1) + 1
    pad = (span - 1) // 2
    if span > p + 2 * pad:
        raise ValueError("conv1d: kernel longer than padded signal")
    xp = _replication_pad(xb, pad)
    # cols[b, c, s, j] = xp[b, c, s + j*dilation]
    cols = sliding_window_view(xp, span, axis=-1)[..., ::dilation]
    cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 2)).reshape(xb.shape[0], c_in * k, p)
    wm = wb.reshape(c_out, c_in * k)
    out = wm @ cols

    def back(g):
        gb = g.reshape(out.shape)
        gw = None
        if w.requires_grad:
            gw = np.tensordot(gb, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        if not x.requires_grad:
            return None, gw
        gcols = (wm.T @ gb).reshape(xb.shape[0], c_in, k, p)
        gxp = np.zeros(xp.shape)
        for j in range(k):
            gxp[..., j * dilation: j * dilation + p] += gcols[:, :, j, :]
        gx = gxp[..., pad: pad + p].copy()
        if pad:
            gx[..., 0] += gxp[..., :pad].sum(axis=-1)
            gx[..., -1] += gxp[..., pad + p:].sum(axis=-1)
        return gx.reshape(xd.shape), gw

    if single:
        data = out[0, 0]
    elif xd.ndim == 2:
        data = out[0]
    else:
        data = out
    return _make(data, (x, w), back, "conv1d")


# ---------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. every leaf that requires grad.

    Returns ``{id(leaf): grad}``; leaves listed in ``wrt`` that the loss
    does not depend on get a zero gradient. Each leaf's ``.grad`` is also set.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[loss.id] = np.ones_like(loss.data)
        if loss.backward_fn is None:
            leaves[loss.id] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at node {node.id} (op {node.op})")
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.backward_fn is None:
                leaves[parent.id] = parent
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=np.float64)
    out: dict[int, np.ndarray] = {}
    for nid, leaf in leaves.items():
        g = grads.get(nid, np.zeros_like(leaf.data)).reshape(leaf.shape)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at leaf node {nid}")
        leaf.grad = g
        out[id(leaf)] = g
    for leaf in wrt or ():
        if id(leaf) not in out:
            leaf.grad = np.zeros_like(leaf.data)
            out[id(leaf)] = leaf.grad
    return out
