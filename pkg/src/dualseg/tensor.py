"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`.  When at least one input
requires a gradient, the result remembers its parents and a closure mapping
the output gradient to input gradients; :func:`backward` walks that graph in
reverse topological order.  When no input requires a gradient, no graph is
recorded, which is how the teacher stream runs without bookkeeping.

Spatial tensors are channels-last: ``(batch, *spatial, channels)``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ArgumentError, StateError

GradFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: GradFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Iterable[Tensor], fn: GradFn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal and optimisation


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise RuntimeError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            pmark = state.get(id(parent))
            if pmark == 1:
                raise RuntimeError("cycle detected in computation graph")
            if pmark is None and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor.

    Gradients are added to whatever ``grad`` already holds, so calling this
    twice without zeroing doubles them.
    """
    if root.data.size != 1:
        raise ArgumentError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


class ParamSet(dict):
    """Ordered name -> Tensor mapping of trainable parameters."""

    def __setitem__(self, name, value):
        if not isinstance(value, Tensor):
            raise ArgumentError(f"parameter {name!r} must be a Tensor")
        super().__setitem__(name, value)

    def zero_grad(self) -> None:
        for p in self.values():
            p.zero_grad()

    def shape_compatible(self, other: "ParamSet") -> bool:
        if list(self.keys()) != list(other.keys()):
            return False
        return all(self[k].shape == other[k].shape for k in self)

    def copy(self, requires_grad: bool | None = None) -> "ParamSet":
        """Deep copy of values; grads are not carried over."""
        out = ParamSet()
        for k, p in self.items():
            rg = p.requires_grad if requires_grad is None else requires_grad
            out[k] = Tensor(p.data.copy(), requires_grad=rg)
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for k, p in self.items():
            out[k] = Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
        return out

    def n_values(self) -> int:
        return int(sum(p.data.size for p in self.values()))


def sgd_step(params: ParamSet, lr: float, momentum: float = 0.0,
             velocity: dict[str, np.ndarray] | None = None) -> ParamSet:
    """In-place ``v <- momentum * v + grad; p <- p - lr * v``; grads are zeroed afterwards.

    With ``momentum == 0`` this is plain ``p <- p - lr * grad``.  ``velocity``
    holds the per-parameter buffers between calls and is filled on first use.
    """
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise StateError(f"no gradient for parameters: {missing[:5]}")
    if momentum and velocity is None:
        raise StateError("momentum needs a velocity dict")
    for name, p in params.items():
        step = p.grad
        if momentum:
            v = velocity.get(name)
            v = p.grad.copy() if v is None else np.asarray(momentum, dtype=v.dtype) * v + p.grad
            velocity[name] = v
            step = v
        if lr != 0:
            p.data -= np.asarray(lr, dtype=p.data.dtype) * step
        p.grad[...] = 0
    return params


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data

    def fn(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis), 1.0 / float(n))


def sq_l2(x: Tensor, axis=-1) -> Tensor:
    """Squared L2 norm along ``axis``."""
    xd = x.data
    ax = axis % xd.ndim

    def fn(g):
        return (2.0 * xd * np.expand_dims(g, ax),)

    return _result((xd * xd).sum(axis=ax), (x,), fn)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D ``b`` and ``a`` of any rank >= 2 (leading dims batched)."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ArgumentError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), fn)


# ---------------------------------------------------------------------------
# probability ops


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; finite for any finite input."""
    if not -x.ndim <= axis < x.ndim:
        raise ArgumentError(f"axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), fn)


def cross_entropy(logits: Tensor, labels, ignore_label: int) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over rows whose label is not ignored.

    Returns an exact zero when every row is ignored.
    """
    if logits.ndim != 2:
        raise ArgumentError("cross_entropy expects (N, C) logits")
    labels = np.asarray(labels).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ArgumentError(f"{labels.shape[0]} labels for {n} rows")
    valid = labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ArgumentError(f"label {labels[bad][0]} outside [0, {c}) and not the ignore label")
    count = int(valid.sum())
    if count == 0:
        return _result(np.zeros((), dtype=logits.dtype), (logits,),
                       lambda g: (np.zeros_like(logits.data),))
    rows = np.flatnonzero(valid)
    lab = labels[rows].astype(np.int64)
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    loss = (np.log(se[:, 0]) - z[np.arange(count), lab]).sum() / count

    def fn(g):
        p = e / se
        p[np.arange(count), lab] -= 1.0
        out = np.zeros_like(logits.data)
        out[rows] = p * (g / count)
        return (out,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), fn)


# ---------------------------------------------------------------------------
# indexing


def gather(x: Tensor, index) -> Tensor:
    """Rows ``x[index]`` along axis 0."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), fn)


def scatter_add(x: Tensor, index, n: int) -> Tensor:
    """``out[index[i]] += x[i]`` into ``n`` zero rows."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, index, x.data)
    return _result(out, (x,), lambda g: (g[index],))


# ---------------------------------------------------------------------------
# convolution and resampling


def _window_slices(offset, stride, out_sp):
    return (slice(None),) + tuple(
        slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_sp))


def conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
         padding: int | Sequence[int] | None = None) -> Tensor:
    """N-d convolution (2-D or 3-D) on channels-last input.

    ``x``: (B, *spatial, Cin); ``w``: (*kernel, Cin, Cout); ``b``: (Cout,).
    ``padding=None`` gives (k-1)//2 zero padding per axis, i.e. "same" output
    for odd kernels at stride 1.
    """
    nd = w.ndim - 2
    if x.ndim != nd + 2 or x.shape[-1] != w.shape[-2]:
        raise ArgumentError(f"conv shape mismatch: x {x.shape}, w {w.shape}")
    ks = w.shape[:nd]
    if padding is None:
        pads = [(k - 1) // 2 for k in ks]
    elif isinstance(padding, int):
        pads = [padding] * nd
    else:
        pads = list(padding)
    cin, cout = w.shape[-2], w.shape[-1]
    xd = x.data
    xp = np.pad(xd, [(0, 0)] + [(p, p) for p in pads] + [(0, 0)]) if any(pads) else xd
    out_sp = [(xp.shape[1 + i] - ks[i]) // stride + 1 for i in range(nd)]
    if min(out_sp) < 1:
        raise ArgumentError("conv output would be empty")
    offsets = list(itertools.product(*[range(k) for k in ks]))
    kk = len(offsets)
    bsz = xd.shape[0]
    cols = np.empty([bsz] + out_sp + [kk, cin], dtype=xd.dtype)
    for o, off in enumerate(offsets):
        cols[..., o, :] = xp[_window_slices(off, stride, out_sp)]
    cols2 = cols.reshape(-1, kk * cin)
    w2 = w.data.reshape(kk * cin, cout)
    out = (cols2 @ w2).reshape([bsz] + out_sp + [cout])
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def fn(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape([bsz] + out_sp + [kk, cin])
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for o, off in enumerate(offsets):
                gxp[_window_slices(off, stride, out_sp)] += gcols[..., o, :]
            inner = (slice(None),) + tuple(slice(p, p + n) for p, n in zip(pads, xd.shape[1:-1]))
            gx = gxp[inner]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, fn)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat every spatial cell ``factor`` times per axis (2-D or 3-D)."""
    nd = x.ndim - 2
    out = x.data
    for ax in range(1, nd + 1):
        out = np.repeat(out, factor, axis=ax)
    shape = x.shape

    def fn(g):
        split = [shape[0]]
        for n in shape[1:-1]:
            split += [n, factor]
        split.append(shape[-1])
        return (g.reshape(split).sum(axis=tuple(range(2, 2 * nd + 1, 2))),)

    return _result(out, (x,), fn)
