"""Dense float64 tensors with tape-based reverse-mode autodiff.

The tape is rebuilt on every forward pass (define-by-run). All arrays are
64-bit floats; no broadcasting beyond scalar scaling -- shape alignment is
explicit through dedicated ops (``add_rowvec``, ``take_rows`` etc.).
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of the operation."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


class StaleTapeError(RuntimeError):
    """backward() was called twice on the same tape."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate (e.g. near-zero norm slice)."""


class Tensor:
    """A dense n-dimensional float64 array, optionally on a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad=False, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named trainable (or frozen) array with its gradient buffer."""

    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, name, value, frozen=False):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.frozen = bool(frozen)

    def node(self, tape):
        """Leaf tensor for this parameter on ``tape`` (cached per tape)."""
        return tape.watch(self)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, frozen={self.frozen})"


class Tape:
    """Ordered record of the forward pass; replayed in reverse by backward().

    Records are appended in creation order, so they are topologically
    sorted by construction. A tape can be backpropagated exactly once.
    """

    def __init__(self):
        self._records = []  # list of callables propagating output grad to inputs
        self._consumed = False
        self._watched = {}  # id(Parameter) -> (Parameter, leaf Tensor)

    def record(self, fn):
        self._records.append(fn)

    def watch(self, param):
        entry = self._watched.get(id(param))
        if entry is not None:
            return entry[1]
        node = Tensor(param.value, requires_grad=not param.frozen,
                      tape=None if param.frozen else self)
        self._watched[id(param)] = (param, node)
        return node

    def backward(self, root):
        """Backpropagate from a scalar ``root`` and fill watched-parameter grads."""
        if self._consumed:
            raise StaleTapeError("backward() already called on this tape")
        if not isinstance(root, Tensor) or root.data.shape != ():
            raise ShapeError("backward root must be a scalar tensor")
        if root.tape is not self:
            raise StaleTapeError("root tensor was not produced on this tape")
        self._consumed = True
        root.grad = np.ones((), dtype=np.float64)
        for fn in reversed(self._records):
            fn()
        for param, node in self._watched.values():
            if param.frozen:
                param.grad = np.zeros_like(param.value)
            else:
                param.grad = (np.zeros_like(param.value) if node.grad is None
                              else np.asarray(node.grad, dtype=np.float64))


def _check_finite(arr, opname):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{opname} produced non-finite values")


def _join_tape(inputs):
    tape = None
    for t in inputs:
        if t.requires_grad and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise StaleTapeError("operands live on different tapes")
    return tape


def _make(opname, inputs, out_data, grad_fns):
    """Build the output tensor and register backward closures.

    grad_fns maps input index -> fn(output_grad) returning that input's grad
    contribution.
    """
    _check_finite(out_data, opname)
    tape = _join_tape(inputs)
    out = Tensor(out_data, requires_grad=tape is not None, tape=tape)
    if tape is not None:
        needed = [(i, fn) for i, fn in grad_fns.items() if inputs[i].requires_grad]

        def _backprop():
            if out.grad is None:
                return
            g = out.grad
            for i, fn in needed:
                inputs[i]._accumulate(fn(g))

        tape.record(_backprop)
    return out


def constant(data):
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = a.data @ b.data
    return _make("matmul", (a, b), out, {
        0: lambda g: g @ b.data.T,
        1: lambda g: a.data.T @ g,
    })


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _make("transpose", (x,), x.data.T.copy(), {0: lambda g: g.T})


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return _make("reshape", (x,), x.data.reshape(shape),
                 {0: lambda g: g.reshape(old)})


# ---------------------------------------------------------------------------
# elementwise

def _same_shape(a, b, opname):
    if a.shape != b.shape:
        raise ShapeError(f"{opname} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make("add", (a, b), a.data + b.data,
                 {0: lambda g: g, 1: lambda g: g})


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make("sub", (a, b), a.data - b.data,
                 {0: lambda g: g, 1: lambda g: -g})


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make("mul", (a, b), a.data * b.data,
                 {0: lambda g: g * b.data, 1: lambda g: g * a.data})


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", (x,), x.data * c, {0: lambda g: g * c})


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _make("relu", (x,), np.where(mask, x.data, 0.0),
                 {0: lambda g: g * mask})


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make("tanh", (x,), out, {0: lambda g: g * (1.0 - out * out)})


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", (x,), out, {0: lambda g: g * out})


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    return _make("log", (x,), np.log(x.data), {0: lambda g: g / x.data})


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x[B x d] + v[d], row-broadcast made explicit."""
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec shapes incompatible: {x.shape} + {v.shape}")
    return _make("add_rowvec", (x, v), x.data + v.data[None, :],
                 {0: lambda g: g, 1: lambda g: g.sum(axis=0)})


# ---------------------------------------------------------------------------
# reductions

def tsum(x: Tensor) -> Tensor:
    shp = x.shape
    return _make("sum", (x,), np.asarray(x.data.sum()),
                 {0: lambda g: np.full(shp, g)})


def tmean(x: Tensor) -> Tensor:
    n = x.size
    shp = x.shape
    return _make("mean", (x,), np.asarray(x.data.mean()),
                 {0: lambda g: np.full(shp, g / n)})


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    axis = axis % x.ndim
    n = x.shape[axis]

    def _bw(g):
        return np.repeat(np.expand_dims(g, axis), n, axis=axis) / n

    return _make("mean_over_axis", (x,), x.data.mean(axis=axis), {0: _bw})


# ---------------------------------------------------------------------------
# row selection

def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows of a matrix: out[k] = x[indices[k]]."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2 or idx.ndim != 1:
        raise ShapeError("take_rows expects a matrix and an index vector")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DomainError("take_rows index out of range")
    shp = x.shape

    def _bw(g):
        out = np.zeros(shp)
        np.add.at(out, idx, g)
        return out

    return _make("take_rows", (x,), x.data[idx], {0: _bw})


def take_per_row(x: Tensor, indices) -> Tensor:
    """Pick one entry per row: out[b] = x[b, indices[b]]."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError("take_per_row expects x[BxC] and indices[B]")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise DomainError("take_per_row column index out of range")
    rows = np.arange(x.shape[0])
    shp = x.shape

    def _bw(g):
        out = np.zeros(shp)
        out[rows, idx] = g
        return out

    return _make("take_per_row", (x,), x.data[rows, idx], {0: _bw})


# ---------------------------------------------------------------------------
# normalization / softmax

def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norms = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    if np.any(norms < eps):
        raise DegenerateInputError("l2_normalize: near-zero-norm slice")
    out = x.data / norms
    xd = x.data

    def _bw(g):
        dot = np.sum(g * xd, axis=-1, keepdims=True)
        return g / norms - xd * dot / norms ** 3

    return _make("l2_normalize", (x,), out, {0: _bw})


def log_softmax_rows(logits: Tensor) -> Tensor:
    if logits.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects a matrix, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("log_softmax_rows: non-finite logits")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def _bw(g):
        return g - sm * g.sum(axis=1, keepdims=True)

    return _make("log_softmax_rows", (logits,), out, {0: _bw})


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f, params, step=1e-5):
    """Compare autodiff gradients of scalar ``f(tape)`` against central differences.

    ``f`` must rebuild its forward pass from the given Parameters each call.
    Returns a dict: parameter name -> max relative error (denominator
    max(1, |autodiff|, |numeric|) per entry).
    """
    tape = Tape()
    root = f(tape)
    tape.backward(root)
    auto = {p.name: p.grad.copy() for p in params}

    report = {}
    for p in params:
        num = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(Tape()).item()
            flat[i] = orig - step
            lo = f(Tape()).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        a = auto[p.name]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(num)))
        err = np.abs(a - num) / denom
        report[p.name] = float(err.max()) if err.size else 0.0
    return report
