"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built eagerly: every primitive computes its value on creation and
records its parents plus a vector-Jacobian product.  ``forward`` re-evaluates
a recorded graph from its leaves (useful after ``Tensor.assign``), and
``backward`` accumulates exact gradients into every node that requires them.

Only a small closed set of primitives is provided; everything the flows,
conditioners and losses need is composed from them.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError, StateError

_stamp = itertools.count(1)
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build values only; no graph is recorded inside this block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A node of the computation graph."""

    __slots__ = (
        "value", "op", "parents", "grad", "requires_grad", "name",
        "_vjp", "_fn", "_stamp", "_consumed",
    )
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._vjp = None
        self._fn = None
        self._stamp = next(_stamp)
        self._consumed = False

    # -- leaf handling -------------------------------------------------
    def assign(self, value) -> None:
        """Replace a leaf value; downstream nodes become stale until ``forward``."""
        if self.op != "leaf":
            raise StateError("only leaves can be assigned", node=self.label)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise ShapeError(
                f"assign to {self.label}: shape {value.shape} != {self.value.shape}",
                node=self.label,
            )
        self.value = value.copy()
        self._stamp = next(_stamp)

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def label(self) -> str:
        return self.name or f"{self.op}#{id(self) & 0xFFFF:04x}"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.value = np.asarray(x, dtype=np.float64)
    t.op, t.parents, t.grad, t.requires_grad, t.name = "leaf", (), None, False, None
    t._vjp = t._fn = None
    t._stamp = 0
    t._consumed = False
    return t


def _node(op: str, fn: Callable, parents: tuple, vjp: Callable) -> Tensor:
    try:
        value = fn(*[p.value for p in parents])
    except ValueError as exc:
        shapes = ", ".join(str(p.value.shape) for p in parents)
        raise ShapeError(f"{op}: incompatible operand shapes ({shapes}): {exc}", node=op) from None
    out = Tensor.__new__(Tensor)
    out.value = np.asarray(value, dtype=np.float64)
    out.op = op
    out.grad = None
    out.name = None
    out._consumed = False
    out._stamp = next(_stamp)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.parents = parents
        out.requires_grad = True
        out._vjp = vjp
        out._fn = fn
    else:
        out.parents = ()
        out.requires_grad = False
        out._vjp = None
        out._fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise binary ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node("add", np.add, (a, b),
                 lambda g, out: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node("sub", np.subtract, (a, b),
                 lambda g, out: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node("mul", np.multiply, (a, b),
                 lambda g, out: (_unbroadcast(g * b.value, a.shape),
                                 _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node("div", np.divide, (a, b),
                 lambda g, out: (_unbroadcast(g / b.value, a.shape),
                                 _unbroadcast(-g * out.value / b.value, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}", node="matmul",
                         left=a.label, right=b.label)

    def vjp(g, out):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node("matmul", np.matmul, (a, b), vjp)


# -- elementwise unary -------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    return _node("exp", np.exp, (a,), lambda g, out: (g * out.value,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node("log", np.log, (a,), lambda g, out: (g / a.value,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _node("tanh", np.tanh, (a,), lambda g, out: (g * (1.0 - out.value ** 2),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    return _node(
        "leaky_relu",
        lambda x: np.where(x > 0, x, slope * x),
        (a,),
        lambda g, out: (g * np.where(a.value > 0, 1.0, slope),),
    )


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _node("softplus", _softplus, (a,), lambda g, out: (g * _sigmoid(a.value),))


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)

    def vjp(g, out):
        s = out.value
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node("softmax", _softmax, (a,), vjp)


# -- structural --------------------------------------------------------

def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ArgumentError("concat of nothing")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g, out):
        return tuple(np.split(g, splits, axis=axis))

    return _node("concat", lambda *v: np.concatenate(v, axis=axis), ts, vjp)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in items)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)

    basic = _is_basic(index)

    def vjp(g, out):
        full = np.zeros_like(a.value)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    try:
        a.value[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}", node=a.label) from None
    return _node("slice", lambda v: v[index], (a,), vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _node("reshape", lambda v: v.reshape(shape), (a,),
                 lambda g, out: (g.reshape(a.shape),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def vjp(g, out):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node("sum", lambda v: v.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- graph traversal ---------------------------------------------------

def _topo(root: Tensor, check_stale: bool = False) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if check_stale and p._stamp > node._stamp:
                raise StateError("graph is stale (a leaf changed); call forward before backward",
                                 node=node.label)
            if id(p) not in seen:
                stack.append((p, False))
    return order


def forward(root: Tensor) -> np.ndarray:
    """Re-evaluate every recorded node below ``root`` and return its value."""
    for node in _topo(root):
        if node._fn is None:
            if node.op != "leaf" and node.parents:
                raise StateError("node has no recorded function", node=node.label)
            continue
        try:
            node.value = np.asarray(node._fn(*[p.value for p in node.parents]), dtype=np.float64)
        except ValueError as exc:
            raise ShapeError(f"{node.op}: {exc}", node=node.label) from None
        node._stamp = next(_stamp)
        node._consumed = False
    return root.value


def backward(root: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every node requiring it."""
    if root._consumed:
        raise StateError("backward already ran on this graph; rebuild or call forward",
                         node=root.label)
    order = _topo(root, check_stale=True)
    if seed is None:
        if root.value.size != 1:
            raise ShapeError("backward without seed needs a scalar root", node=root.label)
        seed = np.ones_like(root.value)
    grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if not node.parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node._vjp(g, node)):
            if not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    root._consumed = True


# -- parameters and optimizers ------------------------------------------

class ParamStore:
    """Named trainable leaves plus per-parameter optimizer state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.state: dict[str, dict] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ArgumentError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.value.size for t in self._params.values())

    def to_dict(self) -> dict[str, list]:
        return {k: t.value.ravel().tolist() for k, t in self._params.items()}

    def load_dict(self, data: dict[str, list]) -> None:
        missing = set(self._params) - set(data)
        if missing:
            raise ArgumentError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, t in self._params.items():
            flat = np.asarray(data[k], dtype=np.float64)
            if flat.size != t.value.size:
                raise ShapeError(f"parameter {k}: {flat.size} values for shape {t.shape}")
            t.value = flat.reshape(t.shape).copy()


@dataclass
class Adam:
    """Adam, or AdamW when ``weight_decay`` > 0 and ``decoupled`` is set."""

    params: ParamStore
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False
    _step: int = field(default=0, init=False)

    def step(self, lr: float) -> None:
        self._step += 1
        b1c = 1.0 - self.beta1 ** self._step
        b2c = 1.0 - self.beta2 ** self._step
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.value
            st = self.params.state.setdefault(
                name, {"m": np.zeros_like(p.value), "v": np.zeros_like(p.value), "t": 0})
            st["t"] = self._step
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
            update = (st["m"] / b1c) / (np.sqrt(st["v"] / b2c) + self.eps)
            if self.weight_decay and self.decoupled:
                p.value = p.value - lr * self.weight_decay * p.value
            p.value = p.value - lr * update


def make_optimizer(kind: str, params: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8,
                   weight_decay=1e-4) -> Adam:
    if kind == "adam":
        return Adam(params, beta1, beta2, eps)
    if kind == "adamw":
        return Adam(params, beta1, beta2, eps, weight_decay=weight_decay, decoupled=True)
    raise ArgumentError(f"unknown optimizer {kind!r}")


# -- gradient checking ---------------------------------------------------

def grad_check(function: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``function`` maps a Tensor shaped like ``point`` to a scalar Tensor.
    ``coords`` restricts the comparison to selected flat coordinates.
    """
    x0 = np.array(point, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with _enabled():
        out = function(leaf)
    if not np.all(np.isfinite(out.value)):
        raise NumericError("function value is not finite", value=float(np.ravel(out.value)[0]))
    backward(out)
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    flat = x0.ravel()
    for k in idx:
        xp, xm = flat.copy(), flat.copy()
        xp[k] += step
        xm[k] -= step
        with no_grad():
            fp = float(np.ravel(function(Tensor(xp.reshape(x0.shape))).value)[0])
            fm = float(np.ravel(function(Tensor(xm.reshape(x0.shape))).value)[0])
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("function value is not finite", coordinate=int(k))
        fd = (fp - fm) / (2.0 * step)
        err = abs(analytic.ravel()[k] - fd) / (abs(fd) + 1e-12)
        worst = max(worst, err)
    return worst


def param_grad_check(loss_fn: Callable[[], Tensor], params: ParamStore, n_coords: int = 100,
                     step: float = 1e-5, rng: np.random.Generator | None = None,
                     names: Iterable[str] | None = None) -> float:
    """Like ``grad_check`` but over randomly chosen coordinates of stored parameters."""
    rng = np.random.default_rng(0) if rng is None else rng
    names = list(params) if names is None else list(names)
    params.zero_grad()
    with _enabled():
        loss = loss_fn()
    backward(loss)
    sizes = np.array([params[n].value.size for n in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat_k in picks:
        j = int(np.searchsorted(offsets, flat_k, side="right") - 1)
        p = params[names[j]]
        k = int(flat_k - offsets[j])
        analytic = 0.0 if p.grad is None else float(p.grad.ravel()[k])
        orig = p.value.ravel()[k]
        vals = []
        for delta in (step, -step):
            v = p.value.copy().ravel()
            v[k] = orig + delta
            p.value = v.reshape(p.shape)
            with no_grad():
                vals.append(float(np.ravel(loss_fn().value)[0]))
        v = p.value.copy().ravel()
        v[k] = orig
        p.value = v.reshape(p.shape)
        if not all(np.isfinite(vals)):
            raise NumericError("loss is not finite", parameter=names[j], coordinate=k)
        fd = (vals[0] - vals[1]) / (2.0 * step)
        worst = max(worst, abs(analytic - fd) / (abs(fd) + 1e-12))
    params.zero_grad()
    return worst


@contextlib.contextmanager
def _enabled():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev
