"""Reverse-mode differentiation over numpy arrays.

The engine records array-valued operations on a tape as they execute
(define-by-run) and replays the tape backwards to accumulate adjoints into a
flat parameter vector.  It covers exactly the primitives the reconstruction
pipeline needs; anything else is rejected when the node is created.

Every math helper in this module (`exp`, `clamp`, `where`, ...) accepts either
a `Var` or a plain ndarray, so the same formulas serve both the trainable
graph and eager oracle computations.  Forward-only evaluation does not need a
tape at all: pass plain arrays through the same code.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    pass


class UnsupportedPrimitiveError(AutodiffError):
    """Raised at construction time for ops the engine does not know."""


class NonFiniteError(AutodiffError):
    """Raised when a node produces NaN/inf and finite checking is on."""


class ParameterStore:
    """Flat float64 parameter vector with named, non-overlapping segments."""

    def __init__(self, segments):
        self._meta = {}
        chunks = []
        offset = 0
        for name, arr in segments.items():
            arr = np.asarray(arr, dtype=np.float64)
            self._meta[name] = (offset, arr.shape)
            chunks.append(arr.ravel())
            offset += arr.size
        self.values = np.concatenate(chunks) if chunks else np.zeros(0)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter store must be finite")

    @property
    def n_params(self):
        return self.values.size

    def names(self):
        return list(self._meta)

    def slice_of(self, name):
        offset, shape = self._meta[name]
        size = int(np.prod(shape)) if shape else 1
        return offset, shape, size

    def view(self, name):
        """Writable ndarray view of one segment (shares memory)."""
        offset, shape, size = self.slice_of(name)
        return self.values[offset:offset + size].reshape(shape)

    def arrays(self):
        """Plain {name: view} mapping for tape-free forward passes."""
        return {name: self.view(name) for name in self._meta}

    def copy(self):
        new = ParameterStore.__new__(ParameterStore)
        new._meta = dict(self._meta)
        new.values = self.values.copy()
        return new


# ---------------------------------------------------------------------------
# tape machinery
# ---------------------------------------------------------------------------

class Node:
    __slots__ = ("op", "inputs", "value", "aux")

    def __init__(self, op, inputs, value, aux):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.aux = aux


class Var:
    """Handle to one tape node; supports numpy-style operators."""

    __slots__ = ("tape", "idx")
    __array_ufunc__ = None  # force ndarray <op> Var through our reflected ops

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __add__(self, other):
        return self.tape.apply("add", (self, other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.apply("sub", (self, other))

    def __rsub__(self, other):
        return self.tape.apply("sub", (other, self))

    def __mul__(self, other):
        return self.tape.apply("mul", (self, other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.apply("div", (self, other))

    def __rtruediv__(self, other):
        return self.tape.apply("div", (other, self))

    def __neg__(self):
        return self.tape.apply("neg", (self,))

    def __matmul__(self, other):
        return self.tape.apply("matmul", (self, other))

    def __rmatmul__(self, other):
        return self.tape.apply("matmul", (other, self))

    def __getitem__(self, key):
        return self.tape.apply("getitem", (self,), aux=key)

    def sum(self, axis=None, keepdims=False):
        return self.tape.apply("sum", (self,), aux=(axis, keepdims))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.apply("reshape", (self,), aux=shape)


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _softplus_np(x, beta):
    bx = beta * x
    return np.where(bx > 30.0, x, np.log1p(np.exp(np.minimum(bx, 30.0))) / beta)


def _sigmoid_np(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _clamp_np(x, lo, hi):
    if lo is not None and hi is not None:
        return np.clip(x, lo, hi)
    if lo is not None:
        return np.maximum(x, lo)
    return np.minimum(x, hi)


_ARCCOS_EPS = 1e-7  # input clamped to +-(1 - eps); derivative blows up at the ends


def _arccos_np(x):
    return np.arccos(np.clip(x, -1.0 + _ARCCOS_EPS, 1.0 - _ARCCOS_EPS))


def _exclusive_cumsum(x, axis):
    out = np.cumsum(x, axis=axis)
    out = np.roll(out, 1, axis=axis)
    idx = [slice(None)] * x.ndim
    idx[axis] = 0
    out[tuple(idx)] = 0.0
    return out


def _reverse_cumsum(x, axis):
    flip = np.flip(x, axis=axis)
    return np.flip(np.cumsum(flip, axis=axis), axis=axis)


# forward implementations keyed by op name; aux payloads are per-op
_FORWARD = {
    "add": lambda v, aux: v[0] + v[1],
    "sub": lambda v, aux: v[0] - v[1],
    "mul": lambda v, aux: v[0] * v[1],
    "div": lambda v, aux: v[0] / v[1],
    "neg": lambda v, aux: -v[0],
    "matmul": lambda v, aux: v[0] @ v[1],
    "exp": lambda v, aux: np.exp(v[0]),
    "log": lambda v, aux: np.log(v[0]),
    "sqrt": lambda v, aux: np.sqrt(v[0]),
    "sin": lambda v, aux: np.sin(v[0]),
    "cos": lambda v, aux: np.cos(v[0]),
    "arccos": lambda v, aux: _arccos_np(v[0]),
    "sigmoid": lambda v, aux: _sigmoid_np(v[0]),
    "softplus": lambda v, aux: _softplus_np(v[0], aux),
    "relu": lambda v, aux: np.maximum(v[0], 0.0),
    "abs": lambda v, aux: np.abs(v[0]),
    "clamp": lambda v, aux: _clamp_np(v[0], aux[0], aux[1]),
    "where": lambda v, aux: np.where(aux, v[0], v[1]),
    "sum": lambda v, aux: v[0].sum(axis=aux[0], keepdims=aux[1]),
    "cumsum_excl": lambda v, aux: _exclusive_cumsum(v[0], aux),
    "getitem": lambda v, aux: v[0][aux],
    "concat": lambda v, aux: np.concatenate(v, axis=aux),
    "reshape": lambda v, aux: v[0].reshape(aux),
    "stopgrad": lambda v, aux: v[0],
}


def _vjp(node, grad, values):
    """Yield (input_position, gradient) pairs for one node."""
    op = node.op
    v = values
    if op == "add":
        yield 0, _unbroadcast(grad, v[0].shape)
        yield 1, _unbroadcast(grad, v[1].shape)
    elif op == "sub":
        yield 0, _unbroadcast(grad, v[0].shape)
        yield 1, _unbroadcast(-grad, v[1].shape)
    elif op == "mul":
        yield 0, _unbroadcast(grad * v[1], v[0].shape)
        yield 1, _unbroadcast(grad * v[0], v[1].shape)
    elif op == "div":
        yield 0, _unbroadcast(grad / v[1], v[0].shape)
        yield 1, _unbroadcast(-grad * v[0] / (v[1] * v[1]), v[1].shape)
    elif op == "neg":
        yield 0, -grad
    elif op == "matmul":
        yield 0, grad @ v[1].T
        yield 1, v[0].T @ grad
    elif op == "exp":
        yield 0, grad * node.value
    elif op == "log":
        yield 0, grad / v[0]
    elif op == "sqrt":
        yield 0, grad * (0.5 / node.value)
    elif op == "sin":
        yield 0, grad * np.cos(v[0])
    elif op == "cos":
        yield 0, -grad * np.sin(v[0])
    elif op == "arccos":
        c = np.clip(v[0], -1.0 + _ARCCOS_EPS, 1.0 - _ARCCOS_EPS)
        inside = (v[0] > -1.0 + _ARCCOS_EPS) & (v[0] < 1.0 - _ARCCOS_EPS)
        yield 0, np.where(inside, -grad / np.sqrt(1.0 - c * c), 0.0)
    elif op == "sigmoid":
        s = node.value
        yield 0, grad * s * (1.0 - s)
    elif op == "softplus":
        yield 0, grad * _sigmoid_np(node.aux * v[0])
    elif op == "relu":
        yield 0, grad * (v[0] > 0.0)
    elif op == "abs":
        yield 0, grad * np.sign(v[0])
    elif op == "clamp":
        lo, hi = node.aux
        mask = np.ones_like(v[0], dtype=bool)
        if lo is not None:
            mask &= v[0] >= lo
        if hi is not None:
            mask &= v[0] <= hi
        yield 0, grad * mask
    elif op == "where":
        yield 0, np.where(node.aux, grad, 0.0)
        yield 1, np.where(node.aux, 0.0, grad)
    elif op == "sum":
        axis, keepdims = node.aux
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        yield 0, np.broadcast_to(g, v[0].shape).copy()
    elif op == "cumsum_excl":
        # y_i = sum_{j<i} x_j  =>  xbar_j = sum_{i>j} gbar_i
        axis = node.aux
        yield 0, _reverse_cumsum(grad, axis) - grad
    elif op == "getitem":
        g = np.zeros_like(v[0])
        if isinstance(node.aux, np.ndarray) or (
                isinstance(node.aux, tuple)
                and any(isinstance(k, np.ndarray) for k in node.aux)):
            np.add.at(g, node.aux, grad)  # fancy indices may repeat
        else:
            g[node.aux] = grad
        yield 0, g
    elif op == "concat":
        axis = node.aux
        start = 0
        for pos, val in enumerate(v):
            n = val.shape[axis]
            sl = [slice(None)] * grad.ndim
            sl[axis] = slice(start, start + n)
            yield pos, grad[tuple(sl)]
            start += n
    elif op == "reshape":
        yield 0, grad.reshape(v[0].shape)
    elif op == "stopgrad":
        return
    else:  # pragma: no cover - apply() rejects unknown ops up front
        raise UnsupportedPrimitiveError(op)


class CustomOp:
    """Forward/VJP pair for ops with hand-written kernels (hash grid)."""

    def __init__(self, name, forward, vjp):
        self.name = name
        self.forward = forward
        self.vjp = vjp


class Tape:
    """Topologically ordered record of operations (inputs precede users)."""

    def __init__(self, check_finite=False):
        self.nodes = []
        self.check_finite = check_finite
        self._leaf_slices = {}  # node idx -> (offset, size)

    def _push(self, node):
        self.nodes.append(node)
        idx = len(self.nodes) - 1
        if self.check_finite and not np.all(np.isfinite(node.value)):
            raise NonFiniteError(f"non-finite value in node {idx} ({node.op})")
        return Var(self, idx)

    def leaf(self, store, name):
        offset, shape, size = store.slice_of(name)
        var = self._push(Node("leaf", (), store.view(name), name))
        self._leaf_slices[var.idx] = (offset, size)
        return var

    def const(self, array):
        array = np.asarray(array, dtype=np.float64)
        return self._push(Node("const", (), array, None))

    def lift(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise AutodiffError("mixing variables from different tapes")
            return x
        return self.const(x)

    def apply(self, op, inputs, aux=None):
        if op not in _FORWARD:
            raise UnsupportedPrimitiveError(f"unsupported primitive: {op!r}")
        inputs = tuple(self.lift(x) for x in inputs)
        out = _FORWARD[op]([x.value for x in inputs], aux)
        out = np.asarray(out, dtype=np.float64)
        return self._push(Node(op, tuple(x.idx for x in inputs), out, aux))

    def apply_custom(self, custom, inputs, aux=None):
        inputs = tuple(self.lift(x) for x in inputs)
        out = custom.forward([x.value for x in inputs], aux)
        out = np.asarray(out, dtype=np.float64)
        node = Node("custom", tuple(x.idx for x in inputs), out, (custom, aux))
        return self._push(node)

    def backward(self, out, store, seed=None):
        """Accumulate d(out)/d(params) into a flat vector aligned with store."""
        adjoints = [None] * len(self.nodes)
        if seed is None:
            if out.value.size != 1:
                raise AutodiffError("backward needs a scalar output or a seed")
            seed = np.ones_like(out.value)
        adjoints[out.idx] = np.asarray(seed, dtype=np.float64)
        grad = np.zeros(store.n_params)
        for idx in range(out.idx, -1, -1):
            g = adjoints[idx]
            adjoints[idx] = None  # each node is visited exactly once
            if g is None:
                continue
            node = self.nodes[idx]
            if node.op == "leaf":
                offset, size = self._leaf_slices[idx]
                grad[offset:offset + size] += g.ravel()
                continue
            if node.op == "const":
                continue
            values = [self.nodes[i].value for i in node.inputs]
            if node.op == "custom":
                custom, aux = node.aux
                contribs = custom.vjp(values, aux, g)
            else:
                contribs = _vjp(node, g, values)
            for pos, contrib in contribs:
                tgt = node.inputs[pos]
                if adjoints[tgt] is None:
                    # own the buffer: views must not be mutated by later +=
                    adjoints[tgt] = contrib.copy() if contrib.base is not None \
                        else contrib
                else:
                    adjoints[tgt] += contrib
        return grad


class LeafBundle:
    """Lazy, memoized access to parameter leaves of one tape."""

    def __init__(self, tape, store):
        self.tape = tape
        self.store = store
        self._cache = {}

    def __getitem__(self, name):
        if name not in self._cache:
            self._cache[name] = self.tape.leaf(self.store, name)
        return self._cache[name]


# ---------------------------------------------------------------------------
# generic math helpers (Var or ndarray)
# ---------------------------------------------------------------------------

def _is_var(x):
    return isinstance(x, Var)


def _unary(op, x, aux=None, np_fn=None):
    if _is_var(x):
        return x.tape.apply(op, (x,), aux=aux)
    return np_fn(np.asarray(x, dtype=np.float64))


def exp(x):
    return _unary("exp", x, np_fn=np.exp)


def log(x):
    return _unary("log", x, np_fn=np.log)


def sqrt(x):
    return _unary("sqrt", x, np_fn=np.sqrt)


def sin(x):
    return _unary("sin", x, np_fn=np.sin)


def cos(x):
    return _unary("cos", x, np_fn=np.cos)


def arccos(x):
    return _unary("arccos", x, np_fn=_arccos_np)


def sigmoid(x):
    return _unary("sigmoid", x, np_fn=_sigmoid_np)


def softplus(x, beta=1.0):
    return _unary("softplus", x, aux=beta,
                  np_fn=lambda a: _softplus_np(a, beta))


def relu(x):
    return _unary("relu", x, np_fn=lambda a: np.maximum(a, 0.0))


def absval(x):
    return _unary("abs", x, np_fn=np.abs)


def clamp(x, lo=None, hi=None):
    return _unary("clamp", x, aux=(lo, hi),
                  np_fn=lambda a: _clamp_np(a, lo, hi))


def where(cond, a, b):
    cond = np.asarray(cond.value if _is_var(cond) else cond, dtype=bool)
    if _is_var(a) or _is_var(b):
        tape = a.tape if _is_var(a) else b.tape
        return tape.apply("where", (a, b), aux=cond)
    return np.where(cond, a, b)


def stop_gradient(x):
    if _is_var(x):
        return x.tape.apply("stopgrad", (x,))
    return np.asarray(x, dtype=np.float64)


def concat(parts, axis=1):
    first = next((p for p in parts if _is_var(p)), None)
    if first is None:
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts],
                              axis=axis)
    return first.tape.apply("concat", tuple(parts), aux=axis)


def asum(x, axis=None, keepdims=False):
    if _is_var(x):
        return x.sum(axis=axis, keepdims=keepdims)
    return np.asarray(x, dtype=np.float64).sum(axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    shape = x.shape
    count = int(np.prod(shape)) if axis is None else shape[axis]
    return asum(x, axis=axis, keepdims=keepdims) / float(count)


def cumsum_exclusive(x, axis=1):
    if _is_var(x):
        return x.tape.apply("cumsum_excl", (x,), aux=axis)
    return _exclusive_cumsum(np.asarray(x, dtype=np.float64), axis)


def value_of(x):
    return x.value if _is_var(x) else np.asarray(x, dtype=np.float64)


def dot_rows(a, b):
    """Row-wise dot product over the last axis, keepdims."""
    return asum(a * b, axis=-1, keepdims=True)


def norm_rows(a):
    return sqrt(dot_rows(a, a))


def normalize_rows(a, eps=1e-24):
    """Row normalization; eps keeps the derivative finite at zero vectors."""
    return a / sqrt(dot_rows(a, a) + eps)


# ---------------------------------------------------------------------------
# the evaluation / verification contract
# ---------------------------------------------------------------------------

def evaluate_with_gradients(program, store, check_finite=False):
    """Run `program(tape, leaves) -> scalar Var`; return (value, flat grad)."""
    tape = Tape(check_finite=check_finite)
    out = program(tape, LeafBundle(tape, store))
    value = float(np.asarray(out.value).reshape(()))
    grad = tape.backward(out, store)
    return value, grad


def evaluate(program, store):
    """Forward-only evaluation of a program."""
    tape = Tape(check_finite=False)
    out = program(tape, LeafBundle(tape, store))
    return float(np.asarray(out.value).reshape(()))


def finite_diff_check(program, store, step=1e-5):
    """Max relative error between reverse-mode and central differences.

    Error metric per parameter: |analytic - fd| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, grad = evaluate_with_gradients(program, store)
    work = store.copy()
    worst = 0.0
    base = work.values
    for i in range(work.n_params):
        keep = base[i]
        base[i] = keep + step
        f_plus = evaluate(program, work)
        base[i] = keep - step
        f_minus = evaluate(program, work)
        base[i] = keep
        fd = (f_plus - f_minus) / (2.0 * step)
        err = abs(grad[i] - fd) / max(1.0, abs(grad[i]))
        if err > worst:
            worst = err
    return worst
