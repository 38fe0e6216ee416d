"""Small dense-array autodiff used by the fusion model.

`Tensor` wraps a float64 numpy array and records the operations applied to
it so that `Tensor.backward` can push gradients back to the leaves.  Arrays
may carry a leading batch axis; the public 2-D helpers (`softmax_rows`,
`matmul2`) operate on plain arrays.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class NumericError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.value.size != 1:
                raise NumericError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; batched over leading axes like ``np.matmul``."""
    a, b = _lift(a), _lift(b)
    if a.value.shape[-1] != b.value.shape[-2 if b.value.ndim > 1 else 0]:
        raise NumericError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return _make(a.value @ b.value, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""

    def backward(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.value, -1, -2), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.value.reshape(shape), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)

    def backward(g):
        a._accumulate(g * (1.0 - y * y))

    return _make(y, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.value)

    def backward(g):
        a._accumulate(g * y * (1.0 - y))

    return _make(y, (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape))

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p._accumulate(gp)

    return _make(np.concatenate([p.value for p in parts], axis=axis), parts, backward)


def take(a: Tensor, index, axis: int = -1) -> Tensor:
    """Select a single position along ``axis`` (the axis is dropped)."""

    def backward(g):
        full = np.zeros_like(a.value)
        sl = [slice(None)] * a.value.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        a._accumulate(full)

    return _make(np.take(a.value, index, axis=axis), (a,), backward)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    Positions where ``mask`` is False get probability exactly 0; every row
    must keep at least one unmasked position.
    """
    x = a.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise NumericError("softmax row with every position masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (a,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    z = logits.value
    t = np.asarray(targets, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    p = _sigmoid(z)

    def backward(g):
        logits._accumulate(g * (p - t))

    return _make(loss, (logits,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


# ---------------------------------------------------------------------------
# plain-array helpers


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax of a 2-D array, stabilized by subtracting the row max."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise NumericError(f"softmax_rows expects a 2-D array, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise NumericError("softmax_rows input is not finite")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def matmul2(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericError(f"matmul2 shape mismatch {a.shape} @ {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameter arrays with same-shape gradient slots."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def size(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def uniform(self, name: str, shape: tuple[int, ...], scale: float = 0.1) -> np.ndarray:
        return self.add(name, self.rng.uniform(-scale, scale, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        return self.add(name, np.zeros(shape))

    def bind(self) -> dict[str, Tensor]:
        """Fresh leaf tensors for one forward/backward pass."""
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.values.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def collect(self, leaves: Mapping[str, Tensor]) -> None:
        for k, leaf in leaves.items():
            if leaf.grad is not None:
                self.grads[k] += leaf.grad

    def copy(self) -> "ParamStore":
        out = ParamStore(self.seed)
        out.rng = np.random.default_rng(self.seed)
        for k, v in self.values.items():
            out.add(k, v.copy())
        return out

    def load_values(self, other: "ParamStore") -> None:
        for k in self.values:
            self.values[k][...] = other.values[k]

    def to_json(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "params": [
                {"name": k, "shape": list(v.shape), "values": v.ravel().tolist()}
                for k, v in self.values.items()
            ],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "ParamStore":
        if doc.get("version") != CHECKPOINT_VERSION:
            raise NumericError(f"unsupported checkpoint version {doc.get('version')!r}")
        store = cls(int(doc.get("seed", 0)))
        for entry in doc["params"]:
            shape = tuple(entry["shape"])
            vals = np.asarray(entry["values"], dtype=np.float64)
            if vals.size != math.prod(shape):
                raise NumericError(f"parameter {entry['name']!r} has wrong value count")
            store.add(entry["name"], vals.reshape(shape))
        return store

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "ParamStore":
        return cls.from_json(json.loads(Path(path).read_text()))


def grad_check(
    model: ParamStore,
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    eps: float = 1e-4,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` receives bound leaf tensors and must return a scalar Tensor.
    The relative error of each entry uses ``max(|a|, |b|, 1e-8)`` as denominator.
    """
    if len(model) == 0:
        raise NumericError("grad_check: model has no parameters")
    if not 1e-6 <= eps <= 1e-3:
        raise NumericError(f"grad_check: eps {eps} outside [1e-6, 1e-3]")
    leaves = model.bind()
    loss = loss_fn(leaves)
    if not np.isfinite(loss.value).all():
        raise NumericError("grad_check: loss is not finite at the base point")
    loss.backward()
    worst = 0.0
    for name in names if names is not None else model.names():
        arr = model.values[name]
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn(model.bind()).value)
            flat[i] = orig - eps
            down = float(loss_fn(model.bind()).value)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"grad_check: non-finite loss perturbing {name}[{i}]")
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
