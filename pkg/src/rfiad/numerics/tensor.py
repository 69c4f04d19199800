"""Small dense tensors with tape-based reverse-mode differentiation.

Every op on a :class:`Tensor` records itself on the active :class:`Tape`
(if one is open and any input is tracked). ``backward`` then walks the tape
in reverse and *overwrites* ``.grad`` on every ``requires_grad`` leaf it saw.

    with Tape() as tape:
        loss = (x * y).sum()
    backward(tape, loss)
"""
from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np


class NumericsError(ValueError):
    """Base class for errors raised by the numerics layer."""


class DomainError(NumericsError):
    pass


class ContractError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "rfiad_active_tape", default=None
)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._op: _Op | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, what: str) -> "Tensor":
        _check_finite(data, what)
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._op = None
        t.name = None
        return t

    # -- basic introspection -------------------------------------------------
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
    def tracked(self) -> bool:
        return self.requires_grad or self._op is not None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def freeze(self) -> None:
        """Stop tracking gradients for this leaf; the grad buffer is dropped."""
        self.requires_grad = False
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class _Op:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive ops.

    Ops are appended in execution order, which is already a topological order
    of the computation graph.
    """

    def __init__(self) -> None:
        self.ops: list[_Op] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.ops)

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for op in self.ops:
            for t in op.inputs:
                if t.requires_grad and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())


class no_tape:
    """Suspend recording inside the block."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, data: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor._result(data, name)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.tracked for t in inputs):
        op = _Op(name, tuple(inputs), out, backward_fn)
        out._op = op
        tape.ops.append(op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _emit("pow", a.data ** p, (a,),
                 lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _emit("sqrt", out, (a,), back)


# -- reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / n)


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry only."""
    a = as_tensor(a)
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = np.asarray(flat[idx])
        if keepdims:
            out = out.reshape((1,) * a.ndim)

        def back(g):
            grad = np.zeros(flat.shape)
            grad[idx] = float(np.asarray(g).reshape(()))
            return (grad.reshape(a.shape),)

        return _emit("max", out, (a,), back)

    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    idx_e = np.expand_dims(idx, ax)
    out = np.take_along_axis(a.data, idx_e, axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        grad = np.zeros(a.shape)
        np.put_along_axis(grad, idx_e, g, axis=ax)
        return (grad,)

    return _emit("max", out, (a,), back)


# -- shape ops -----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ContractError("matmul needs at least 1-d operands")
    out = np.matmul(a.data, b.data)

    def back(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            ga = np.matmul(bd, g[..., None])[..., 0]
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
        if bd.ndim == 1:
            ga = g[..., :, None] * bd
            gb = np.matmul(np.swapaxes(ad, -1, -2), g[..., None])[..., 0]
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", out, (a, b), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit("reshape", a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[index])

    def back(g):
        grad = np.zeros(a.shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _emit("getitem", out, (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in ts], axis=ax)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return _emit("concat", out, ts, back)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


# -- composites ----------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = np.max(x.data, axis=axis, keepdims=True)
    e = exp(x - shift)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / sqrt(var + eps)


def gelu(x) -> Tensor:
    x = as_tensor(x)
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + tanh(c * (x + 0.044715 * x * x * x)))


def norm(x, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at the origin is taken as zero."""
    x = as_tensor(x)
    return sqrt((x * x).sum(axis=axis, keepdims=keepdims))


def l2_normalize(v) -> Tensor:
    v = as_tensor(v)
    n = float(np.sqrt(np.sum(v.data * v.data)))
    if n == 0.0:
        raise DomainError("cannot normalize a zero vector")
    return v / norm(v)


def normalize_rows(x) -> Tensor:
    x = as_tensor(x)
    if np.any(np.sum(x.data * x.data, axis=-1) == 0.0):
        raise DomainError("cannot normalize a zero row")
    return x / norm(x, axis=-1, keepdims=True)


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two vectors, differentiable in both."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    if not np.any(a.data):
        raise DomainError("cosine_similarity: argument 'a' has zero norm")
    if not np.any(b.data):
        raise DomainError("cosine_similarity: argument 'b' has zero norm")
    return (a * b).sum() / (norm(a) * norm(b))


def cosine_matrix(x, y) -> Tensor:
    """Pairwise cosines between the rows of ``x`` (n, d) and ``y`` (m, d)."""
    return normalize_rows(x) @ normalize_rows(y).T


# -- backward ------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    """Write d(loss)/d(leaf) into ``.grad`` of every ``requires_grad`` leaf.

    Gradients are overwritten, never accumulated across calls. Leaves seen on
    the tape (or listed in ``params``) that the loss does not depend on are
    zeroed.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")

    position = {id(op): i for i, op in enumerate(tape.ops)}
    for i, op in enumerate(tape.ops):
        for t in op.inputs:
            if t._op is not None:
                j = position.get(id(t._op))
                if j is None or j >= i:
                    raise ContractError(
                        f"tape is not topologically ordered at op {i} ({op.name}); cycle?")
    if loss._op is not None and id(loss._op) not in position:
        raise ContractError("loss was not produced on this tape")

    adj: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for op in reversed(tape.ops):
        g = adj.pop(id(op.output), None)
        if g is None:
            continue
        grads = op.backward_fn(g)
        for t, gi in zip(op.inputs, grads):
            if gi is None or not t.tracked:
                continue
            key = id(t)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = np.asarray(gi, dtype=np.float64)

    leaves = {id(t): t for t in tape.leaves()}
    for t in params:
        if t.requires_grad:
            leaves[id(t)] = t
    if loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = adj.get(key)
        if g is None:
            t.grad = np.zeros_like(t.data)
        else:
            _check_finite(g, "backward")
            t.grad = np.array(g, dtype=np.float64).reshape(t.shape)
