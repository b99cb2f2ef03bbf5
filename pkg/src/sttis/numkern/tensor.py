"""Dense float64 tensors with reverse-mode gradient accumulation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure propagating the output gradient back to them.
``backward`` orders the recorded nodes topologically, runs the closures in
reverse and then drops the recorded graph so intermediate arrays can be
garbage collected.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "stochastic", "_parents", "_backward", "_freed")
    # make ndarray (op) Tensor defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.stochastic = False
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        Gradients add onto whatever is already stored, so two forward/backward
        rounds without clearing give the summed gradient.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise RuntimeError("graph of this tensor was already consumed by backward()")
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._freed = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children (iterative DFS)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _node(a.data + b.data, (a, b), "add", backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), "neg", lambda g: ((a, -g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        )

    return _node(a.data * b.data, (a, b), "mul", backward)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant, e.g. the 1/sqrt(d) attention temperature."""
    factor = float(factor)
    return _node(a.data * factor, (a,), "scale", lambda g: ((a, g * factor),))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), "square", lambda g: ((a, 2.0 * a.data * g),))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def backward(g):
        # subgradient 0 at the origin keeps a perfect fit from producing inf
        safe = np.where(y > 0, y, 1.0)
        return ((a, np.where(y > 0, g / (2.0 * safe), 0.0)),)

    return _node(y, (a,), "sqrt", backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: ((a, g * mask),))


# reductions and shape -----------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _node(y, (a,), "sum", backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: ((a, g.reshape(a.shape)),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), "transpose", lambda g: ((a, g.transpose(inverse)),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    """Basic indexing (integers and slices); fancy indexing goes through ``take``."""
    items = index if isinstance(index, tuple) else (index,)
    if any(not isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in items):
        raise TypeError("getitem supports integers, slices and Ellipsis only; use take() for index arrays")

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return ((a, full),)

    return _node(a.data[index], (a,), "getitem", backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with a 1-D index array; repeats accumulate on the way back."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError(f"take: expected 1-D indices, got shape {idx.shape}")
    axis = axis % a.ndim

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return ((a, full),)

    return _node(np.take(a.data, idx, axis=axis), (a,), "take", backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for k, (s, r) in enumerate(zip(t.shape, ref)) if k != ax):
            raise ValueError(f"concat: shapes {[x.shape for x in tensors]} differ outside axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(zip(tensors, np.split(g, bounds, axis=ax)))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", backward)


# linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch shapes of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum, e.g. ``"bznd,bzqnd->bznq"``.

    Each operand's gradient is another einsum, so every index of an operand
    must also occur in the output or in another operand.
    """
    ops = [as_tensor(o) for o in operands]
    inputs, output = subscripts.replace(" ", "").split("->")
    in_subs = inputs.split(",")
    if len(in_subs) != len(ops):
        raise ValueError(f"einsum: {len(in_subs)} subscripts for {len(ops)} operands")
    for k, sub in enumerate(in_subs):
        rest = set(output).union(*(set(s) for j, s in enumerate(in_subs) if j != k))
        if not set(sub) <= rest or len(set(sub)) != len(sub):
            raise ValueError(f"einsum: operand subscript {sub!r} is not supported for differentiation")
    try:
        y = np.einsum(subscripts, *[o.data for o in ops], optimize=len(ops) > 2)
    except ValueError as exc:
        raise ValueError(f"einsum {subscripts}: {exc} (shapes {[o.shape for o in ops]})") from None

    def backward(g):
        out = []
        for k, t in enumerate(ops):
            if not t.requires_grad:
                out.append((t, None))
                continue
            others = [s for j, s in enumerate(in_subs) if j != k]
            spec = ",".join([output] + others) + "->" + in_subs[k]
            out.append((t, np.einsum(spec, g, *[o.data for j, o in enumerate(ops) if j != k], optimize=True)))
        return tuple(out)

    return _node(y, ops, "einsum", backward)


# neural-network pieces ----------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((a, y * (g - (g * y).sum(axis=axis, keepdims=True))),)

    return _node(y, (a,), "softmax", backward)


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an optional affine map."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    y = xhat if gain is None else xhat * gain.data
    if bias is not None:
        y = y + bias.data
    parents = [a] + [t for t in (gain, bias) if t is not None]

    def backward(g):
        gx = g if gain is None else g * gain.data
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [(a, ga)]
        if gain is not None:
            grads.append((gain, _unbroadcast(g * xhat, gain.shape)))
        if bias is not None:
            grads.append((bias, _unbroadcast(g, bias.shape)))
        return tuple(grads)

    return _node(y, parents, "layer_norm", backward)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 valid cross-correlation of a single input channel.

    ``x`` is (..., w), ``kernel`` is (f, p) and the result is (..., f, w - p + 1).
    """
    f, p = kernel.shape
    w = x.shape[-1]
    if p > w:
        raise ValueError(f"conv1d: kernel size {p} exceeds input length {w}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv1d: bias shape {bias.shape} does not match {f} channels")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, p, axis=-1)  # (..., T, p)
    y = np.einsum("...tk,ck->...ct", windows, kernel.data)
    if bias is not None:
        y = y + bias.data[:, None]
    t_out = w - p + 1
    parents = [x, kernel] + ([bias] if bias is not None else [])

    def backward(g):
        grads = []
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for k in range(p):
                gx[..., k:k + t_out] += np.einsum("...ct,c->...t", g, kernel.data[:, k])
            grads.append((x, gx))
        if kernel.requires_grad:
            grads.append((kernel, np.einsum("act,atk->ck", g.reshape(-1, f, t_out), windows.reshape(-1, t_out, p))))
        if bias is not None and bias.requires_grad:
            grads.append((bias, g.reshape(-1, f, t_out).sum(axis=(0, 2))))
        return tuple(grads)

    return _node(y, parents, "conv1d", backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate`` is 0."""
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(a.shape, dtype=np.float32) >= rate) * (1.0 / (1.0 - rate))
    out = _node(a.data * keep, (a,), "dropout", lambda g: ((a, g * keep),))
    out.stochastic = True
    return out


def onehot(indices, depth: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= depth):
        raise ValueError(f"onehot: index out of range for depth {depth}")
    return np.eye(depth, dtype=DTYPE)[idx]

