"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` records a node on the
graph; :meth:`Tensor.backward` replays the nodes in reverse creation order.
Elementwise ops broadcast only over a leading batch dimension (or against a
scalar), which is all the MLPs in this package need.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "tensor",
    "concat",
    "Optimizer",
    "SGD",
    "Adam",
    "clip_weights",
    "no_grad",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_counter = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that disables recording (evaluation-only forward passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev, _grad_enabled = _grad_enabled, False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


def _check_finite(data: np.ndarray, op: str) -> None:
    # a finite sum proves finiteness; only an inf/nan sum needs the elementwise scan
    if np.isfinite(np.add.reduce(data, axis=None)):
        return
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0 or a == (1,):
        return b
    if len(b) == 0 or b == (1,):
        return a
    # batch broadcast: the smaller operand matches the trailing dims of the larger
    if len(a) == len(b) + 1 and a[1:] == b:
        return a
    if len(b) == len(a) + 1 and b[1:] == a:
        return b
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    if shape == (1,):
        return grad.sum().reshape(1)
    return grad.sum(axis=0)


class Tensor:
    """A node in the differentiation graph.

    ``data`` is always a float64 ndarray. ``grad`` is ``None`` until a backward
    pass reaches the tensor and then accumulates across calls.
    """

    # numpy scalars must defer to Tensor's reflected operators
    __array_ufunc__ = None

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_id",
                 "_pre")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._id = next(_counter)
        self._pre = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], op: str,
                backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = ""
        out._op = op
        out._id = next(_counter)
        out._pre = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return self.data.shape[0]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag}, requires_grad={self.requires_grad})"

    # -- binary elementwise ---------------------------------------------------
    def _binary(self, other, op: str, fwd, da, db) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        _broadcast_shape(op, self.shape, other.shape)
        a, b = self.data, other.data
        out = fwd(a, b)
        sa, sb = self.shape, other.shape

        def backward(g):
            return _unbroadcast(da(g, a, b), sa), _unbroadcast(db(g, a, b), sb)

        return Tensor._result(out, (self, other), op, backward)

    def __add__(self, other):
        return self._binary(other, "add", np.add, lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, "subtract", np.subtract, lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return Tensor(other).__sub__(self)

    def __mul__(self, other):
        return self._binary(
            other, "multiply", np.multiply,
            lambda g, a, b: g * b, lambda g, a, b: g * a,
        )

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return self * (1.0 / float(other))

    def __neg__(self):
        return Tensor._result(-self.data, (self,), "negate", lambda g: (-g,))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

        def backward(g):
            return g @ b.T, a.T @ g

        return Tensor._result(a @ b, (self, other), "matmul", backward)

    # -- unary ---------------------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._result(out, (self,), "exp", lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.data
        if np.any(x <= 0):
            raise DomainError(f"log: non-positive input (min {x.min():.3g})")
        return Tensor._result(np.log(x), (self,), "log", lambda g: (g / x,))

    def sigmoid(self) -> "Tensor":
        out = _stable_sigmoid(self.data)
        res = Tensor._result(out, (self,), "sigmoid", lambda g: (g * out * (1.0 - out),))
        # keep the logit so log(s) and log(1 - s) can be taken as stable log-sigmoids
        res._pre = self
        return res

    def log_sigmoid(self) -> "Tensor":
        """log(sigmoid(x)) without forming sigmoid(x), so saturation never hits log(0)."""
        x = self.data
        out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
        return Tensor._result(out, (self,), "log_sigmoid", lambda g: (g * _stable_sigmoid(-x),))

    def softplus(self) -> "Tensor":
        x = self.data
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        return Tensor._result(out, (self,), "softplus", lambda g: (g * _stable_sigmoid(x),))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), "tanh", lambda g: (g * (1.0 - out * out),))

    def square(self) -> "Tensor":
        x = self.data
        return Tensor._result(x * x, (self,), "square", lambda g: (2.0 * g * x,))

    def abs(self) -> "Tensor":
        x = self.data
        return Tensor._result(np.abs(x), (self,), "abs", lambda g: (g * np.sign(x),))

    def clamp(self, lo: float, hi: float) -> "Tensor":
        x = self.data
        mask = (x >= lo) & (x <= hi)
        return Tensor._result(np.clip(x, lo, hi), (self,), "clamp", lambda g: (g * mask,))

    def log_softmax(self) -> "Tensor":
        """Row-wise log-softmax over the last axis."""
        x = self.data
        shifted = x - x.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out = shifted - lse
        p = np.exp(out)
        return Tensor._result(
            out, (self,), "log_softmax",
            lambda g: (g - p * g.sum(axis=-1, keepdims=True),),
        )

    def softmax(self) -> "Tensor":
        logp = self.log_softmax()
        res = logp.exp()
        res._pre = logp
        return res

    # -- reductions & shape ops ----------------------------------------------
    def sum(self, axis: int | None = None) -> "Tensor":
        x = self.data
        shape = x.shape
        if axis is None:
            return Tensor._result(np.asarray(x.sum()), (self,), "sum",
                                  lambda g: (np.broadcast_to(g, shape).copy(),))
        ax = axis % x.ndim
        return Tensor._result(x.sum(axis=ax), (self,), "sum",
                              lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))

    def mean(self, axis: int | None = 0) -> "Tensor":
        """Mean over the batch axis by default; ``axis=None`` averages everything."""
        x = self.data
        shape = x.shape
        if axis is None:
            n = x.size
            return Tensor._result(np.asarray(x.mean()), (self,), "mean",
                                  lambda g: (np.full(shape, g / n),))
        ax = axis % x.ndim
        n = shape[ax]
        return Tensor._result(x.mean(axis=ax), (self,), "mean",
                              lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape) / n,))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return Tensor._result(self.data.reshape(shape), (self,), "reshape",
                              lambda g: (g.reshape(orig),))

    def __getitem__(self, idx) -> "Tensor":
        x = self.data
        shape = x.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._result(np.array(x[idx]), (self,), "slice", backward)

    # -- differentiation ------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg


def _topo_order(root: Tensor) -> list[Tensor]:
    seen = {root._id}
    order = [root]
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p._id not in seen and p.requires_grad:
                seen.add(p._id)
                order.append(p)
                stack.append(p)
    # creation ids are a valid topological order of the recorded tape
    order.sort(key=lambda t: t._id)
    return order


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    ndim = datas[0].ndim
    ax = axis % ndim
    for d in datas[1:]:
        if d.ndim != ndim or any(d.shape[i] != datas[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {datas[0].shape} and {d.shape}")
    splits = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor._result(np.concatenate(datas, axis=ax), tuple(tensors), "concat", backward)


# -- optimizers ---------------------------------------------------------------

class Optimizer:
    """Base class; holds parameter references and a step counter."""

    kind = "base"

    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params = list(params)
        self.lr = float(lr)
        self.t = 0

    def _grads(self) -> list[np.ndarray]:
        out = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {p.name or i} has no gradient")
            out.append(p.grad)
        return out

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = self._grads()
        self.t += 1
        self._update(grads)
        for p in self.params:
            _check_finite(p.data, f"{self.kind} update of {p.name or 'parameter'}")
            p.grad = None

    def _update(self, grads: list[np.ndarray]) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"t": np.array(self.t, dtype=np.float64)}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])


class SGD(Optimizer):
    kind = "sgd"

    def _update(self, grads):
        for p, g in zip(self.params, grads):
            p.data -= self.lr * g


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr: float = 2e-4, betas: tuple[float, float] = (0.5, 0.999),
                 eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, grads):
        b1, b2, t = self.beta1, self.beta2, self.t
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        state = super().state_dict()
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m{i}"] = m
            state[f"v{i}"] = v
        return state

    def load_state_dict(self, state):
        super().load_state_dict(state)
        for i in range(len(self.params)):
            self.m[i][...] = state[f"m{i}"]
            self.v[i][...] = state[f"v{i}"]


def clip_weights(params: Iterable[Tensor], c: float) -> None:
    """Clamp every element of every parameter into [-c, c] in place."""
    if c <= 0:
        raise ValueError(f"clip bound must be positive, got {c}")
    for p in params:
        np.clip(p.data, -c, c, out=p.data)
