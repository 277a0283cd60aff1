"""Dense double-precision tensors with reverse-mode automatic differentiation.

Every operation builds its output eagerly and records a backward rule that
maps the output gradient to the gradients of its inputs.  Calling
``backward`` on a scalar orders the recorded operations topologically (the
tape) and replays the rules in reverse.

Broadcasting is deliberately limited to equal shapes and scalar-with-tensor;
anything else goes through explicit ``reshape``/``transpose``/``concat``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

Array = np.ndarray
BackwardFn = Callable[[Array], Sequence[Optional[Array]]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An n-dimensional float64 array that optionally records gradients."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        _op: str = "",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data: Array = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    # -- operator sugar ---------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def _make(data: Array, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                 _backward=fn if needs else None, _op=op)
    return out


def _pair_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    # only scalar broadcasting exists, so reduction is either none or a full sum
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _pair_shapes(a, b, "add")

    def _bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), _bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _pair_shapes(a, b, "mul")

    def _bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), _bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # relu'(0) = 0
    # np.maximum keeps NaN visible downstream
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _stable_sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``relu`` or ``sigmoid``."""
    table = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*inputs)


# -- linear algebra and shape ops ------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), _bw, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _make(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tuple(tensors), _bw, "concat")


def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, float(g) / n),), "mean")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` for 2-D ``x``; the bias row is spread with a ones column."""
    out = matmul(x, w)
    if b is not None:
        ones = Tensor(np.ones((x.shape[0], 1)))
        out = add(out, matmul(ones, reshape(b, (1, -1))))
    return out


# -- losses ----------------------------------------------------------------

def softmax(logits: Array, axis: int = -1) -> Array:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of ``target`` under softmax(``logits``).

    ``logits`` is either ``(n_class,)`` with an integer target or
    ``(batch, n_class)`` with one target per row.
    """
    x = logits.data
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2 or x2.shape[1] < 2:
        raise ShapeError(f"softmax_cross_entropy: need >= 2 classes, got {x.shape}")
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape != (x2.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: {t.shape[0]} targets for {x2.shape[0]} rows")
    if np.any(t < 0) or np.any(t >= x2.shape[1]):
        raise IndexError(f"target out of range [0, {x2.shape[1]}): {t.tolist()}")
    z = x2 - x2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(x2.shape[0])
    loss = float(np.mean(logsum - z[rows, t]))

    def _bw(g):
        p = softmax(x2, axis=1)
        p[rows, t] -= 1.0
        p *= float(g) / x2.shape[0]
        return (p.reshape(x.shape),)

    return _make(np.asarray(loss), (logits,), _bw, "softmax_xent")


# -- the tape --------------------------------------------------------------

def build_tape(root: Tensor) -> list[Tensor]:
    """Operations reachable from ``root`` in topological order (inputs first)."""
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(build_tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None or node.grad.shape != node.shape:
                node.grad = np.array(g, dtype=np.float64)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)


# -- optimisation ----------------------------------------------------------

class SGD:
    """Stochastic gradient descent with heavy-ball momentum.

    ``v <- momentum * v + grad``; ``p <- p - lr * v``; grads are zeroed after
    each step.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"parameter {i} with shape {p.shape} has no gradient")
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad[...] = 0.0


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0,
             optimizer: Optional[SGD] = None) -> SGD:
    """One SGD step; pass the returned optimizer back in to keep momentum."""
    opt = optimizer if optimizer is not None else SGD(params, lr, momentum)
    opt.step()
    return opt


# -- gradient checking -----------------------------------------------------

def check_gradients(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between autodiff and central differences.

    Error per coordinate is ``|a - n| / max(1, |a|, |n|)``.  With
    ``max_coords`` set, a seeded random subset of coordinates is probed.
    Non-finite values report ``inf``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ShapeError(f"check_gradients: f must be scalar, got {out.shape}")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_coords, replace=False))
    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        num = (fp - fm) / (2.0 * eps)
        a = a_flat[i]
        if not (np.isfinite(num) and np.isfinite(a)):
            return float("inf")
        err = abs(a - num) / max(1.0, abs(a), abs(num))
        worst = max(worst, err)
    x.grad = None
    return worst
