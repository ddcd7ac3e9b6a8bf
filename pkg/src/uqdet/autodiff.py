"""Minimal reverse-mode differentiation engine on dense float64 arrays.

Supports exactly the operations the detection head and losses need:
elementwise arithmetic, log/exp/power, sigmoid/relu, full reductions,
2-D matmul and a stride-1 zero-padded 3x3 convolution. Every operation
records its inputs and a backward rule on the output node; ``backward``
on a scalar root walks the graph once in reverse topological order.

Broadcasting is restricted to scalar-vs-tensor so each backward rule
stays auditable. All data is float64; non-finite values are rejected at
node creation, which also surfaces overflow as soon as it happens.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GradCheckFailure",
    "as_tensor",
    "forward_op",
    "add",
    "sub",
    "mul",
    "div",
    "log",
    "exp",
    "power",
    "sigmoid",
    "relu",
    "reduce_sum",
    "reduce_mean",
    "matmul",
    "conv3x3",
    "clamp",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operands have shapes the requested op cannot combine."""


class NonFiniteError(ValueError):
    """A tensor carries NaN or infinity."""


class GradCheckFailure(RuntimeError):
    """The probed function returned a non-finite value during grad checking."""

    def __init__(self, message: str, tensor_index: int, coordinate: int):
        super().__init__(message)
        self.tensor_index = tensor_index
        self.coordinate = coordinate


class Tensor:
    """Node of the compute graph: a dense float64 array plus a backward rule.

    Leaves are created directly from data; interior nodes are created by the
    op functions below. ``grad`` is lazily materialized as zeros, so unused
    leaves report an exact zero gradient.
    """

    __slots__ = ("data", "_grad", "_parents", "_backward", "op")

    def __init__(self, data, _parents=(), _op="leaf", _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in '{_op}' tensor")
        self.data = arr
        self._grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def reshape(self, shape) -> "Tensor":
        src_shape = self.data.shape
        out = Tensor(self.data.reshape(shape), (self,), "reshape")

        def backward():
            self._accumulate(out.grad.reshape(src_shape))

        out._backward = backward
        return out

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def mean(self) -> "Tensor":
        return reduce_mean(self)

    def backward(self) -> None:
        """Populate gradients of every node reachable from this scalar root."""
        if self.size != 1:
            raise ShapeError(f"backward() requires a scalar root, got shape {self.shape}")
        order = _topo_order(self)
        self._grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # Operator sugar; python numbers become constant leaves.
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; each node appears exactly once."""
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


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _binary_operands(op: str, a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"'{op}' got incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, target: Tensor) -> np.ndarray:
    # Undo scalar broadcast: a size-1 operand receives the summed gradient.
    if target.size == 1 and g.shape != target.shape:
        return np.sum(g).reshape(target.shape)
    return g


def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)
    out = Tensor(a.data + b.data, (a, b), "add")

    def backward():
        a._accumulate(_reduce_to(out.grad, a))
        b._accumulate(_reduce_to(out.grad, b))

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)
    out = Tensor(a.data - b.data, (a, b), "sub")

    def backward():
        a._accumulate(_reduce_to(out.grad, a))
        b._accumulate(_reduce_to(-out.grad, b))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)
    out = Tensor(a.data * b.data, (a, b), "mul")

    def backward():
        a._accumulate(_reduce_to(out.grad * b.data, a))
        b._accumulate(_reduce_to(out.grad * a.data, b))

    out._backward = backward
    return out


def div(a, b) -> Tensor:
    a, b = _binary_operands("div", a, b)
    out = Tensor(a.data / b.data, (a, b), "div")

    def backward():
        a._accumulate(_reduce_to(out.grad / b.data, a))
        b._accumulate(_reduce_to(-out.grad * a.data / (b.data * b.data), b))

    out._backward = backward
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data), (x,), "log")

    def backward():
        x._accumulate(out.grad / x.data)

    out._backward = backward
    return out


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.exp(x.data), (x,), "exp")

    def backward():
        x._accumulate(out.grad * out.data)

    out._backward = backward
    return out


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    exponent = float(exponent)
    out = Tensor(x.data**exponent, (x,), "power")

    def backward():
        x._accumulate(out.grad * exponent * x.data ** (exponent - 1.0))

    out._backward = backward
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # Branch on sign so neither exp overflows.
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(s, (x,), "sigmoid")

    def backward():
        x._accumulate(out.grad * out.data * (1.0 - out.data))

    out._backward = backward
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), (x,), "relu")

    def backward():
        x._accumulate(out.grad * (x.data > 0.0))

    out._backward = backward
    return out


def reduce_sum(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.sum(x.data), (x,), "sum")

    def backward():
        x._accumulate(np.broadcast_to(out.grad, x.data.shape).copy())

    out._backward = backward
    return out


def reduce_mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    out = Tensor(np.sum(x.data) / n, (x,), "mean")

    def backward():
        x._accumulate(np.broadcast_to(out.grad / n, x.data.shape).copy())

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"'matmul' got incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, (a, b), "matmul")

    def backward():
        a._accumulate(out.grad @ b.data.T)
        b._accumulate(a.data.T @ out.grad)

    out._backward = backward
    return out


def _im2col3(padded: np.ndarray, h: int, w: int) -> np.ndarray:
    c = padded.shape[0]
    cols = np.empty((c, 9, h, w), dtype=np.float64)
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, k] = padded[:, di : di + h, dj : dj + w]
            k += 1
    return cols.reshape(c * 9, h * w)


def conv3x3(x, weight, bias=None) -> Tensor:
    """3x3 convolution, zero padding, stride 1: [Cin,H,W] -> [Cout,H,W]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3:
        raise ShapeError(f"'conv3x3' input must be [C,H,W], got {x.shape}")
    c_in, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[1:] != (c_in, 3, 3):
        raise ShapeError(f"'conv3x3' weight must be [Cout,{c_in},3,3], got {weight.shape}")
    c_out = weight.shape[0]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"'conv3x3' bias must be [{c_out}], got {bias.shape}")

    padded = np.zeros((c_in, h + 2, w + 2), dtype=np.float64)
    padded[:, 1 : h + 1, 1 : w + 1] = x.data
    cols = _im2col3(padded, h, w)
    w2d = weight.data.reshape(c_out, c_in * 9)
    flat = w2d @ cols
    if bias is not None:
        flat = flat + bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor(flat.reshape(c_out, h, w), parents, "conv3x3")

    def backward():
        gflat = out.grad.reshape(c_out, h * w)
        weight._accumulate((gflat @ cols.T).reshape(c_out, c_in, 3, 3))
        if bias is not None:
            bias._accumulate(gflat.sum(axis=1))
        dcols = (w2d.T @ gflat).reshape(c_in, 3, 3, h, w)
        dpad = np.zeros((c_in, h + 2, w + 2), dtype=np.float64)
        for di in range(3):
            for dj in range(3):
                dpad[:, di : di + h, dj : dj + w] += dcols[:, di, dj]
        x._accumulate(dpad[:, 1 : h + 1, 1 : w + 1])

    out._backward = backward
    return out


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Differentiable clamp built from relu; gradient is 0 outside the range."""
    out = as_tensor(x)
    if lo is not None:
        out = relu(out - lo) + lo
    if hi is not None:
        out = hi - relu(hi - out)
    return out


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "log": log,
    "exp": exp,
    "power": power,
    "sigmoid": sigmoid,
    "relu": relu,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "matmul": matmul,
    "conv3x3": conv3x3,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by name; see _OPS for the vocabulary."""
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}")
    return _OPS[op](*inputs, **kwargs)


class GradCheckReport:
    """Outcome of one gradient check: worst coordinate and its error."""

    __slots__ = ("max_rel_error", "tensor_index", "coordinate")

    def __init__(self, max_rel_error: float, tensor_index: int, coordinate: int):
        self.max_rel_error = max_rel_error
        self.tensor_index = tensor_index
        self.coordinate = coordinate

    def __repr__(self):
        return (
            f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
            f"tensor_index={self.tensor_index}, coordinate={self.coordinate})"
        )


def grad_check_report(f, x, h: float = 1e-5) -> GradCheckReport:
    """Compare the analytic gradient of f against central finite differences.

    ``x`` is a Tensor or a sequence of Tensors; ``f`` is called as ``f(x)``
    or ``f(*xs)`` and must return a scalar Tensor. Relative error per
    coordinate is |analytic - fd| / max(1, |fd|). A non-finite probe raises
    GradCheckFailure carrying the offending coordinate.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    if h <= 0:
        raise ValueError("step size h must be positive")

    def evaluate() -> Tensor:
        return f(xs[0]) if isinstance(x, Tensor) else f(*xs)

    for t in xs:
        t.zero_grad()
    root = evaluate()
    if root.size != 1:
        raise ShapeError(f"grad_check target must be scalar, got {root.shape}")
    root.backward()
    analytic = [t.grad.copy() for t in xs]
    for t in xs:
        t.zero_grad()

    worst = GradCheckReport(0.0, 0, 0)
    for ti, t in enumerate(xs):
        flat = t.data.reshape(-1)
        for ci in range(flat.size):
            saved = flat[ci]
            try:
                flat[ci] = saved + h
                f_plus = evaluate().item()
                flat[ci] = saved - h
                f_minus = evaluate().item()
            except NonFiniteError as err:
                flat[ci] = saved
                raise GradCheckFailure(
                    f"non-finite value probing tensor {ti} coordinate {ci}: {err}", ti, ci
                ) from err
            finally:
                flat[ci] = saved
            fd = (f_plus - f_minus) / (2.0 * h)
            if not np.isfinite(fd):
                raise GradCheckFailure(
                    f"non-finite finite difference at tensor {ti} coordinate {ci}", ti, ci
                )
            rel = abs(analytic[ti].reshape(-1)[ci] - fd) / max(1.0, abs(fd))
            if rel > worst.max_rel_error:
                worst = GradCheckReport(rel, ti, ci)
    return worst


def grad_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between analytic gradient and central differences."""
    return grad_check_report(f, x, h).max_rel_error
