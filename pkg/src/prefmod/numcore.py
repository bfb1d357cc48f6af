"""Dense float64 tensors with a linear reverse-mode tape and an Adam optimizer.

Every model in the package is written against this module. Tensors are
immutable; an op executed while a :class:`Tape` is active records a backward
closure whenever one of its inputs is tracked (a parameter with
``requires_grad`` or the output of an earlier recorded op).

    >>> w = Tensor([[2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = square(w)
    >>> backward(tape, loss)[w]
    array([[4.]])
"""

from __future__ import annotations

import builtins
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-6
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """An immutable N-d float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "node", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        arr.flags.writeable = False
        self.data = arr
        self.node = None
        self._tape = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray) or arr.dtype != np.float64:
            arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.node = None
        t._tape = None
        t.requires_grad = False
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

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops executed inside a ``with`` block."""

    def __init__(self):
        self.records: list[tuple[int, tuple, object, str]] = []
        self._leaf_nodes: dict[int, int] = {}
        self._leaves: list[Tensor] = []
        self._count = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def _new_node(self) -> int:
        self._count += 1
        return self._count - 1

    def node_of(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t.node
        if t.requires_grad:
            key = id(t)
            node = self._leaf_nodes.get(key)
            if node is None:
                node = self._new_node()
                self._leaf_nodes[key] = node
                self._leaves.append(t)
            return node
        return None

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves)


class no_grad:
    """Suspend recording: ops inside run forward-only."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {opname}")


def _record(opname: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(out, opname)
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is None:
        return result
    nodes = tuple(tape.node_of(x) for x in inputs)
    if all(n is None for n in nodes):
        return result
    result.node = tape._new_node()
    result._tape = tape
    tape.records.append((result.node, nodes, backward_fn, opname))
    return result


def backward(tape: Tape, loss: Tensor, params=None):
    """Reverse pass from a scalar ``loss``.

    Returns ``{leaf tensor: gradient}`` for every tracked leaf reached on the
    tape. When ``params`` is a mapping of name -> Tensor (or a sequence of
    tensors) the result is aligned with it instead, with zeros for leaves the
    loss does not depend on.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    for out_node, in_nodes, fn, _ in reversed(tape.records):
        g = grads.pop(out_node, None)
        if g is None:
            continue
        in_grads = fn(g)
        for node, gi in zip(in_nodes, in_grads):
            if node is None or gi is None:
                continue
            prev = grads.get(node)
            grads[node] = gi if prev is None else prev + gi
    by_leaf = {}
    for t in tape._leaves:
        g = grads.get(tape._leaf_nodes[id(t)])
        if g is not None:
            by_leaf[t] = g
    if params is None:
        return by_leaf
    if isinstance(params, Mapping):
        return {k: by_leaf.get(p, np.zeros(p.shape)) for k, p in params.items()}
    return [by_leaf.get(p, np.zeros(p.shape)) for p in params]


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def _binary_operands(a, b, opname):
    if not isinstance(a, Tensor):
        a, b = b, a
        swapped = True
    else:
        swapped = False
    if not isinstance(b, Tensor):
        if not np.isscalar(b):
            raise TypeError(f"{opname}: operand must be a Tensor or python scalar")
        return a, float(b), swapped
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")
    return a, b, swapped


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b, "add")
    if not isinstance(b, Tensor):
        return _record("add", a.data + b, (a,), lambda g: (g,))
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        return add(neg(b), a)
    return add(a, neg(b) if isinstance(b, Tensor) else -b)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b, "mul")
    if not isinstance(b, Tensor):
        return scale(a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))     # logistic without overflow in exp
    return _record("silu", x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _record("square", x * x, (a,), lambda g: (2.0 * g * x,))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = a.data
    out = x.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis), 1.0 / n)


# --------------------------------------------------------------------------
# layout
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from e
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat: axis {axis} out of range for {nd}-d tensors")
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def split(a: Tensor, sections, axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into equal parts (int) or parts of given sizes (list)."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"split: axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    n = a.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise ShapeError(f"split: {n} not divisible into {sections} parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if builtins.sum(sizes) != n:
            raise ShapeError(f"split: sizes {sizes} do not sum to {n}")
    starts = np.concatenate([[0], np.cumsum(sizes)])
    outs = []
    for lo, hi in zip(starts[:-1], starts[1:]):
        index = [slice(None)] * a.ndim
        index[axis] = slice(int(lo), int(hi))
        index = tuple(index)
        shape = a.shape

        def bw(g, index=index, shape=shape):
            full = np.zeros(shape)
            full[index] = g
            return (full,)

        outs.append(_record("split", a.data[index].copy(), (a,), bw))
    return outs


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def expand(a: Tensor, n: int) -> Tensor:
    """Repeat ``a`` ``n`` times along a new leading axis."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _record("expand", out, (a,), lambda g: (g.sum(axis=0),))


def repeat(a: Tensor, n: int, axis: int) -> Tensor:
    """Tile a size-1 ``axis`` of ``a`` to size ``n`` (explicit broadcast)."""
    if a.shape[axis] != 1:
        raise ShapeError(f"repeat: axis {axis} of {a.shape} must have size 1")
    shape = list(a.shape)
    shape[axis] = n
    out = np.broadcast_to(a.data, shape).copy()
    return _record("repeat", out, (a,), lambda g: (g.sum(axis=axis, keepdims=True),))


def take(table: Tensor, index) -> Tensor:
    """Gather rows of ``table`` (axis 0) by an integer index array."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take: index out of range for {table.shape[0]} rows")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take", table.data[idx], (table,), bw)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over identical leading axes: (..., m, k) @ (..., k, n)."""
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record("bmm", ad @ bd, (a, b),
                   lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` on the last axis of x; b is an explicit per-column bias."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    if xd.ndim == 2:
        # row-wise products keep each row's rounding independent of the batch size
        out = (xd[:, None, :] @ wd)[:, 0, :]
    else:
        out = xd @ wd
    if b is not None:
        out = out + b.data
    k, n = wd.shape

    def bw(g):
        g2 = g.reshape(-1, n)
        gx = g @ wd.T
        gw = xd.reshape(-1, k).T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record("linear", out, inputs, bw)


# --------------------------------------------------------------------------
# normalisation, attention, reductions
# --------------------------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _record("softmax", p, (x,),
                   lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs a last axis of size >= 2")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gh = g * gain.data if gain is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        grads = [gx]
        if gain is not None:
            grads.append((flat * xhat.reshape(-1, d)).sum(axis=0))
        if bias is not None:
            grads.append(flat.sum(axis=0))
        return grads

    inputs = [x] + [p for p in (gain, bias) if p is not None]
    return _record("layer_norm", out, inputs, bw)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over (..., n, d) arrays, no masking."""
    if q.shape[:-2] != k.shape[:-2] or k.shape != v.shape[:-1] + (k.shape[-1],) \
            or q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    c = 1.0 / np.sqrt(qd.shape[-1])
    s = (qd @ np.swapaxes(kd, -1, -2)) * c
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    out = p @ vd

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * c
        return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv

    return _record("attention", out, (q, k, v), bw)


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance between two same-shape tensors; subgradient 0 at a == b."""
    if a.shape != b.shape:
        raise ShapeError(f"l2_distance: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    dist = np.sqrt((diff * diff).sum())

    def bw(g):
        if dist == 0.0:
            z = np.zeros_like(diff)
            return z, z
        ga = g * diff / dist
        return ga, -ga

    return _record("l2_distance", np.asarray(dist), (a, b), bw)


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    p = e / s
    return _record("logsumexp", out, (x,), lambda g: (p * g[..., None],))


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = ADAM_EPS
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update. Returns new parameter tensors and the state."""
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise ValueError(f"adam_step: parameters and gradients are misaligned: {missing}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, "
                             f"parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = Tensor(p.data - update, requires_grad=p.requires_grad)
    return out, state


def parameters(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def constants(params: Mapping[str, "Tensor | np.ndarray"]) -> dict[str, Tensor]:
    """Untracked tensors over the same buffers; tensors pass through unchanged."""
    return {k: v if isinstance(v, Tensor) else Tensor._wrap(np.asarray(v, dtype=np.float64))
            for k, v in params.items()}


def frozen(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor._wrap(p.data) for k, p in params.items()}


def tracked(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(p.data, requires_grad=True) for k, p in params.items()}


def total_size(params: Iterable[Tensor]) -> int:
    return builtins.sum(p.size for p in params)
