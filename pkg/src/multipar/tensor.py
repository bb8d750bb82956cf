"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a C-contiguous ``numpy.ndarray``. Operations record their
parents and a backward rule; :meth:`Tensor.backward` walks the recorded graph
in reverse topological order. Shapes are checked explicitly: the only implicit
broadcast is scalar-with-tensor. Leading "batch" axes are allowed where noted
(batched matmul, row-wise softmax) but they must match exactly.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericalError",
    "DegenerateRowError",
    "ContractError",
    "ConfigError",
    "tensor",
    "zeros",
    "matmul",
    "transpose",
    "permute",
    "reshape",
    "concat",
    "stack",
    "take",
    "slice_axis",
    "softmax_rows",
    "layer_norm",
    "bias_add",
    "tanh",
    "power",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "clamp_min",
    "dropout",
    "topo_order",
    "no_grad",
    "save_tensors",
    "load_tensors",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = "MPT1"


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """A forward result or gradient left the finite range."""


class DegenerateRowError(ValueError):
    """A softmax row has every entry masked."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


class ConfigError(ValueError):
    """An architectural or training setting is invalid."""


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NumericalError(f"{op}: non-finite value in forward result")
    return out


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff.

    ``grad`` is ``None`` until a backward pass reaches the tensor; afterwards it
    is a same-shape ndarray that accumulates across backward calls until
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if 0 in arr.shape:
            raise ShapeError(f"tensor shape must have positive extents, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self.name = name

    @classmethod
    def _from_op(cls, out: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
        _check_finite(out, op)
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(out, dtype=np.float64)
        t.grad = None
        t.name = None
        t._op = op
        if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = parents
            t._backward = backward
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward = None
        return t

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(other) if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return _add(_neg(self), other)

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor / tensor is not supported; multiply by a reciprocal")
        return _mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return _sum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    # -- backward ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if self.data.size != 1 or self.ndim > 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        order = topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after all of its parents."""
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


# -- elementwise ------------------------------------------------------------


def _add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        c = float(b)
        return Tensor._from_op(a.data + c, (a,), lambda g: (g,), "add_scalar")
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def _neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def _mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        c = float(b)
        return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericalError("log: non-positive input")
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clamp_min(a: Tensor, floor: float) -> tuple[Tensor, int]:
    """Clamp from below; returns the tensor and how many entries were clamped."""
    hit = a.data < floor
    out = np.where(hit, floor, a.data)
    keep = ~hit
    return Tensor._from_op(out, (a,), lambda g: (g * keep,), "clamp_min"), int(hit.sum())


def power(a: Tensor, exponent: float) -> Tensor:
    """``a ** exponent`` for non-negative ``a``."""
    if (a.data < 0).any():
        raise NumericalError("power: negative base")
    e = float(exponent)
    ad = a.data
    out = np.power(ad, e)
    if e == 0.0:
        return Tensor._from_op(out, (a,), lambda g: (np.zeros_like(g),), "power")

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = e * np.power(ad, e - 1.0)
        return (g * np.where(ad > 0, d, 0.0 if e > 1.0 else d),)

    return Tensor._from_op(out, (a,), back, "power")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return a
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# -- reductions -------------------------------------------------------------


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), back, "sum")


# -- shape movement ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    src = a.shape
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got shape {a.shape}")
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat: no inputs")
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts:
        if p.ndim != nd or p.shape[:ax] + p.shape[ax + 1:] != parts[0].shape[:ax] + parts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[q.shape for q in parts]} disagree off axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=ax)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts))
        )

    return Tensor._from_op(out, tuple(parts), back, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("stack: no inputs")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise ShapeError(f"stack: shapes {[q.shape for q in parts]} differ")
    out = np.stack([p.data for p in parts], axis=axis)
    ax = axis % out.ndim
    n = len(parts)
    return Tensor._from_op(
        out, tuple(parts), lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)), "stack"
    )


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"slice: [{start}, {stop}) out of range for axis of length {a.shape[ax]}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    src = a.shape

    def back(g):
        full = np.zeros(src)
        full[idx] = g
        return (full,)

    return Tensor._from_op(a.data[idx], (a,), back, "slice")


def _getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    if isinstance(out, np.ndarray) and out.size == 0:
        raise ShapeError(f"index {idx!r} selects nothing from shape {a.shape}")
    src = a.shape

    def back(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.asarray(out), (a,), back, "getitem")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    indices = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    if indices.size == 0:
        raise ShapeError("take: empty index list")
    if indices.min() < 0 or indices.max() >= a.shape[ax]:
        raise ShapeError(f"take: index out of range for axis of length {a.shape[ax]}")
    src = a.shape

    def back(g):
        full = np.zeros(src)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, indices, np.moveaxis(g, ax, 0))
        return (full,)

    return Tensor._from_op(np.take(a.data, indices, axis=ax), (a,), back, "take")


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Both operands are 2-D, or both carry identical leading batch axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), back, "matmul")


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-``d`` vector to every row of ``x[..., d]``."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias_add: bias {bias.shape} does not match trailing axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return Tensor._from_op(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)), "bias_add")


def softmax_rows(x: Tensor, mask: np.ndarray | Tensor | None = None) -> Tensor:
    """Softmax over the last axis, max-subtracted.

    ``mask`` is boolean (True = permitted) with shape equal to ``x.shape`` or
    to its trailing two axes; masked entries come out exactly zero.
    """
    if x.ndim < 1:
        raise ShapeError("softmax_rows needs at least one axis")
    z = x.data
    if mask is not None:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(bool)
        if m.shape != x.shape and m.shape != x.shape[-2:]:
            raise ShapeError(f"softmax mask {m.shape} does not fit logits {x.shape}")
        if not m.any(axis=-1).all():
            raise DegenerateRowError("softmax_rows: a row has no permitted entry")
        z = np.where(m, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(out, (x,), back, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(xhat * gd + bias.data, (x, gain, bias), back, "layer_norm")


# -- serialization ----------------------------------------------------------


def save_tensors(tensors: dict[str, Tensor | np.ndarray], path, meta: dict | None = None) -> None:
    """Write named tensors as a versioned JSON document.

    Floats are written with ``repr`` precision, so a load reproduces them bit-exactly.
    """
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(np.shape(t.data if isinstance(t, Tensor) else t)),
                   "data": np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64).ravel().tolist()}
            for name, t in tensors.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        doc = json.load(fh)
    magic = doc.get("magic") if isinstance(doc, dict) else None
    if magic != CHECKPOINT_MAGIC:
        raise ContractError(f"checkpoint format {magic!r} is not {CHECKPOINT_MAGIC!r}")
    out = {}
    for name, rec in doc["tensors"].items():
        arr = np.asarray(rec["data"], dtype=np.float64)
        shape = tuple(rec["shape"])
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"checkpoint tensor {name!r}: {arr.size} values for shape {shape}")
        out[name] = arr.reshape(shape)
    return out, doc.get("meta", {})


def gradcheck(fn: Callable[[], Tensor], inputs: Iterable[Tensor], eps: float = 1e-5) -> list[tuple[np.ndarray, np.ndarray]]:
    """Analytic vs central-difference gradients of scalar ``fn()`` for each input.

    Returns ``(analytic, numeric)`` pairs; tolerances are the caller's business.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    fn().backward()
    pairs = []
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * eps)
        pairs.append((analytic, numeric))
    return pairs
