"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Design constraints: row-major storage, no broadcasting beyond scalar-tensor,
explicit ops only.  Tensors are immutable values; a Tape owns a single forward
recording and permits exactly one backward pass.  A central finite-difference
oracle (`finite_diff_grad`) is kept deliberately independent of the tape so it
can verify every primitive's backward rule.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_CHECKED = True


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf encountered while checked mode is on."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, non-scalar loss, cross-tape operands."""


def set_checked(flag: bool) -> bool:
    """Toggle finite-value checking; returns the previous setting."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = bool(flag)
    return prev


def checked() -> bool:
    return _CHECKED


def set_default_dtype(dtype) -> None:
    """Working precision switch (float64 default, float32 optional)."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


def _check_finite(arr: np.ndarray, what: str) -> None:
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Immutable dense array; the universal value type of the package."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, order="C")
        if _CHECKED:
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError("non-finite values in Tensor construction")
            if any(n <= 0 for n in arr.shape):
                raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE))


def eye(n: int) -> Tensor:
    return Tensor(np.eye(n, dtype=_DEFAULT_DTYPE))


def as_array(x) -> np.ndarray:
    """Value view of a Tensor, Node, ndarray, or python scalar."""
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=_DEFAULT_DTYPE)


class LayerTrace:
    """Input activation and output-side gradient of one linear layer.

    Recorded during backward for every matmul whose left operand is a named
    parameter, so rank-structured trainer steps can be formed without re-running
    backprop.  `weight_gradient()` rebuilds the weight gradient from the pair and
    must equal the tape's own gradient exactly.
    """

    __slots__ = ("layer_id", "input", "delta")

    def __init__(self, layer_id: str, input: Tensor, delta: Tensor):
        self.layer_id = layer_id
        self.input = input
        self.delta = delta

    def weight_gradient(self) -> Tensor:
        x, d = self.input.data, self.delta.data
        if x.ndim == 1:
            return Tensor(np.outer(d, x))
        return Tensor(d @ x.T)

    def __repr__(self) -> str:
        return f"LayerTrace({self.layer_id!r}, in={self.input.shape}, delta={self.delta.shape})"


class Node:
    """One recorded value in a tape's computation graph."""

    __slots__ = ("tape", "idx", "value", "parents", "vjp", "fwd", "op", "param_name")

    def __init__(self, tape, idx, value, parents, vjp, fwd, op, param_name=None):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.fwd = fwd
        self.op = op
        self.param_name = param_name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def to_tensor(self) -> Tensor:
        return Tensor(self.value)


class Tape:
    """Ordered record of primitive applications; one backward pass allowed."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.layer_traces: list[LayerTrace] = []
        self._backward_done = False

    def _record(self, value, parents, vjp, fwd, op, param_name=None) -> Node:
        if not isinstance(value, np.ndarray):
            value = np.asarray(value, dtype=_DEFAULT_DTYPE)
        node = Node(self, len(self.nodes), value, parents, vjp, fwd, op, param_name)
        self.nodes.append(node)
        return node

    def constant(self, x) -> Node:
        arr = np.array(as_array(x), dtype=_DEFAULT_DTYPE)
        _check_finite(arr, "constant")
        return self._record(arr, (), None, None, "const")

    def param(self, name: str, x) -> Node:
        if name in self.params:
            raise TapeError(f"parameter {name!r} registered twice on one tape")
        arr = np.array(as_array(x), dtype=_DEFAULT_DTYPE)
        _check_finite(arr, f"param {name!r}")
        node = self._record(arr, (), None, None, "param", param_name=name)
        self.params[name] = node
        return node

    def backward(self, loss: Node) -> dict[str, Tensor]:
        """Gradients of a scalar loss for every registered parameter.

        Also emits a LayerTrace for each matmul node whose left operand is a
        parameter (linear layers), pairing the layer input with the gradient
        arriving at the layer output.
        """
        if self._backward_done:
            raise TapeError("backward already run once on this tape")
        if loss.tape is not self:
            raise TapeError("loss node belongs to a different tape")
        if loss.value.shape != ():
            raise TapeError(f"backward requires a scalar loss, got shape {loss.value.shape}")
        self._backward_done = True

        grads: dict[int, np.ndarray] = {loss.idx: np.asarray(1.0, dtype=loss.value.dtype)}
        for node in reversed(self.nodes[: loss.idx + 1]):
            g = grads.pop(node.idx, None)
            if g is None:
                continue
            if node.op == "matmul" and node.parents and node.parents[0].param_name:
                self.layer_traces.append(
                    LayerTrace(node.parents[0].param_name, Tensor(node.parents[1].value), Tensor(g))
                )
            if node.param_name is not None:
                acc = grads.get(-1 - node.idx)
                grads[-1 - node.idx] = g if acc is None else acc + g
                continue
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                acc = grads.get(parent.idx)
                grads[parent.idx] = pg if acc is None else acc + pg

        out: dict[str, Tensor] = {}
        for name, node in self.params.items():
            g = grads.get(-1 - node.idx)
            if g is None:
                g = np.zeros_like(node.value)
            _check_finite(g, f"gradient of {name!r}")
            out[name] = Tensor(g)
        return out

    def replay(self) -> bool:
        """Re-execute recorded ops in order; True iff all values reproduce bit-identically."""
        values: dict[int, np.ndarray] = {}
        ok = True
        for node in self.nodes:
            if node.fwd is None:
                values[node.idx] = node.value
                continue
            new = node.fwd(tuple(values[p.idx] for p in node.parents))
            values[node.idx] = new
            if new.shape != node.value.shape or not np.array_equal(new, node.value):
                ok = False
        return ok


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise TapeError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TapeError("at least one operand must be a tape node")


def _unary(x: Node, f: Callable, df: Callable, op: str) -> Node:
    v = x.value
    _check_finite(v, f"{op} input")
    out = f(v)

    def vjp(g):
        return (g * df(v, out),)

    return x.tape._record(out, (x,), vjp, lambda vals: f(vals[0]), op)


def _check_elemwise(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar-tensor mixing allowed)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_elemwise(a.value, b.value, "add")
    _check_finite(a.value, "add lhs"), _check_finite(b.value, "add rhs")
    out = a.value + b.value

    def vjp(g):
        return (_reduce_to(g, a.value.shape), _reduce_to(g, b.value.shape))

    return t._record(out, (a, b), vjp, lambda vals: vals[0] + vals[1], "add")


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_elemwise(a.value, b.value, "sub")
    _check_finite(a.value, "sub lhs"), _check_finite(b.value, "sub rhs")
    out = a.value - b.value

    def vjp(g):
        return (_reduce_to(g, a.value.shape), _reduce_to(-g, b.value.shape))

    return t._record(out, (a, b), vjp, lambda vals: vals[0] - vals[1], "sub")


def mul(a, b) -> Node:
    """Elementwise product; either operand may be a scalar."""
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    va, vb = a.value, b.value
    _check_elemwise(va, vb, "mul")
    _check_finite(va, "mul lhs"), _check_finite(vb, "mul rhs")
    out = va * vb

    def vjp(g):
        return (_reduce_to(g * vb, va.shape), _reduce_to(g * va, vb.shape))

    return t._record(out, (a, b), vjp, lambda vals: vals[0] * vals[1], "mul")


def neg(a: Node) -> Node:
    return _unary(a, lambda v: -v, lambda v, o: -1.0, "neg")


def matmul(a, b) -> Node:
    """Matrix product: (m,n)@(n,k) -> (m,k) or (m,n)@(n,) -> (m,)."""
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    va, vb = a.value, b.value
    if va.ndim != 2 or vb.ndim not in (1, 2):
        raise ShapeError(f"matmul: need 2-d lhs and 1- or 2-d rhs, got {va.shape} @ {vb.shape}")
    if va.shape[1] != vb.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {va.shape} @ {vb.shape}")
    _check_finite(va, "matmul lhs"), _check_finite(vb, "matmul rhs")
    out = va @ vb

    if vb.ndim == 1:

        def vjp(g):
            return (np.outer(g, vb), va.T @ g)

    else:

        def vjp(g):
            return (g @ vb.T, va.T @ g)

    return t._record(out, (a, b), vjp, lambda vals: vals[0] @ vals[1], "matmul")


def outer(u, v) -> Node:
    t = _tape_of(u, v)
    u, v = _lift(t, u), _lift(t, v)
    if u.value.ndim != 1 or v.value.ndim != 1:
        raise ShapeError(f"outer: need two vectors, got {u.value.shape} and {v.value.shape}")
    _check_finite(u.value, "outer lhs"), _check_finite(v.value, "outer rhs")
    out = np.outer(u.value, v.value)

    def vjp(g):
        return (g @ v.value, g.T @ u.value)

    return t._record(out, (u, v), vjp, lambda vals: np.outer(vals[0], vals[1]), "outer")


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: need a matrix, got shape {a.value.shape}")
    out = a.value.T.copy()

    def vjp(g):
        return (g.T,)

    return a.tape._record(out, (a,), vjp, lambda vals: vals[0].T.copy(), "transpose")


def sum_all(a: Node) -> Node:
    out = a.value.sum()

    def vjp(g):
        return (np.full_like(a.value, g),)

    return a.tape._record(out, (a,), vjp, lambda vals: vals[0].sum(), "sum_all")


def mean_all(a: Node) -> Node:
    n = a.value.size
    out = a.value.mean()

    def vjp(g):
        return (np.full_like(a.value, g / n),)

    return a.tape._record(out, (a,), vjp, lambda vals: vals[0].mean(), "mean_all")


def mean_axis0(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"mean_axis0: need a matrix, got {a.value.shape}")
    n = a.value.shape[0]
    out = a.value.mean(axis=0)

    def vjp(g):
        return (np.tile(g / n, (n, 1)),)

    return a.tape._record(out, (a,), vjp, lambda vals: vals[0].mean(axis=0), "mean_axis0")


def sqrt(a: Node) -> Node:
    return _unary(a, np.sqrt, lambda v, o: 0.5 / o, "sqrt")


def reciprocal(a: Node) -> Node:
    return _unary(a, lambda v: 1.0 / v, lambda v, o: -o * o, "reciprocal")


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(a: Node) -> Node:
    return _unary(a, _sigmoid, lambda v, o: o * (1.0 - o), "sigmoid")


def softplus(a: Node) -> Node:
    return _unary(a, lambda v: np.logaddexp(0.0, v), lambda v, o: _sigmoid(v), "softplus")


def _silu(v: np.ndarray) -> np.ndarray:
    return v * _sigmoid(v)


def _silu_prime(v: np.ndarray) -> np.ndarray:
    s = _sigmoid(v)
    return s * (1.0 + v * (1.0 - s))


def silu(a: Node) -> Node:
    return _unary(a, _silu, lambda v, o: _silu_prime(v), "silu")


def silu_grad(a: Node) -> Node:
    """Derivative of silu as a first-class op (needed by hand-formed MLP update rules)."""

    def second(v, o):
        s = _sigmoid(v)
        return s * (1.0 - s) * (2.0 + v * (1.0 - 2.0 * s))

    return _unary(a, _silu_prime, second, "silu_grad")


def l2_normalize(v: Node) -> Node:
    if v.value.ndim != 1:
        raise ShapeError(f"l2_normalize: need a vector, got {v.value.shape}")
    n = np.linalg.norm(v.value)
    if n == 0.0:
        raise ValueError("l2_normalize: zero vector")
    out = v.value / n

    def vjp(g):
        return ((g - out * (out @ g)) / n,)

    return v.tape._record(out, (v,), vjp, lambda vals: vals[0] / np.linalg.norm(vals[0]), "l2_normalize")


def l2_normalize_columns(x: Node) -> Node:
    if x.value.ndim != 2:
        raise ShapeError(f"l2_normalize_columns: need a matrix, got {x.value.shape}")
    norms = np.linalg.norm(x.value, axis=0)
    if np.any(norms == 0.0):
        raise ValueError("l2_normalize_columns: zero column")
    out = x.value / norms

    def vjp(g):
        return ((g - out * (out * g).sum(axis=0)) / norms,)

    return x.tape._record(
        out, (x,), vjp, lambda vals: vals[0] / np.linalg.norm(vals[0], axis=0), "l2_normalize_columns"
    )


def softmax(v: Node) -> Node:
    if v.value.ndim != 1:
        raise ShapeError(f"softmax: need a vector, got {v.value.shape}")
    z = v.value - v.value.max()
    e = np.exp(z)
    out = e / e.sum()

    def vjp(g):
        return (out * (g - out @ g),)

    def fwd(vals):
        z2 = vals[0] - vals[0].max()
        e2 = np.exp(z2)
        return e2 / e2.sum()

    return v.tape._record(out, (v,), vjp, fwd, "softmax")


def causal_softmax_columns(s: Node) -> Node:
    """Column-wise softmax of an (L,L) score matrix with rows i > j masked out.

    Row index = key position, column index = query position; each query only
    sees keys at or before it.
    """
    v = s.value
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ShapeError(f"causal_softmax_columns: need a square matrix, got {v.shape}")
    n = v.shape[0]
    mask = np.tril(np.ones((n, n), dtype=bool))  # [i, j] valid iff i <= j after transpose

    def compute(vals):
        m = np.where(mask.T, vals, -np.inf)
        m = m - m.max(axis=0)
        e = np.exp(m)
        return e / e.sum(axis=0)

    out = compute(v)

    def vjp(g):
        return (out * (g - (out * g).sum(axis=0)),)

    return s.tape._record(out, (s,), vjp, lambda vals: compute(vals[0]), "causal_softmax_columns")


# ---------------------------------------------------------------------------
# structural ops


def column(x: Node, j: int) -> Node:
    if x.value.ndim != 2:
        raise ShapeError(f"column: need a matrix, got {x.value.shape}")
    if not 0 <= j < x.value.shape[1]:
        raise ShapeError(f"column index {j} out of range for shape {x.value.shape}")
    out = x.value[:, j].copy()

    def vjp(g):
        full = np.zeros_like(x.value)
        full[:, j] = g
        return (full,)

    return x.tape._record(out, (x,), vjp, lambda vals: vals[0][:, j].copy(), "column")


def element(v: Node, i: int) -> Node:
    if v.value.ndim != 1:
        raise ShapeError(f"element: need a vector, got {v.value.shape}")
    out = np.asarray(v.value[i])

    def vjp(g):
        full = np.zeros_like(v.value)
        full[i] = g
        return (full,)

    return v.tape._record(out, (v,), vjp, lambda vals: np.asarray(vals[0][i]), "element")


def slice_columns(x: Node, start: int, stop: int) -> Node:
    if x.value.ndim != 2:
        raise ShapeError(f"slice_columns: need a matrix, got {x.value.shape}")
    out = x.value[:, start:stop].copy()

    def vjp(g):
        full = np.zeros_like(x.value)
        full[:, start:stop] = g
        return (full,)

    return x.tape._record(out, (x,), vjp, lambda vals: vals[0][:, start:stop].copy(), "slice_columns")


def stack_columns(cols: Sequence[Node]) -> Node:
    if not cols:
        raise ShapeError("stack_columns: empty column list")
    t = cols[0].tape
    cols = tuple(_lift(t, c) for c in cols)
    out = np.stack([c.value for c in cols], axis=1)

    def vjp(g):
        return tuple(g[:, j].copy() for j in range(g.shape[1]))

    return t._record(out, cols, vjp, lambda vals: np.stack(vals, axis=1), "stack_columns")


def concat_columns(blocks: Sequence[Node]) -> Node:
    if not blocks:
        raise ShapeError("concat_columns: empty block list")
    t = blocks[0].tape
    blocks = tuple(_lift(t, b) for b in blocks)
    widths = [b.value.shape[1] for b in blocks]
    out = np.concatenate([b.value for b in blocks], axis=1)

    def vjp(g):
        outs, at = [], 0
        for w in widths:
            outs.append(g[:, at : at + w].copy())
            at += w
        return tuple(outs)

    return t._record(out, blocks, vjp, lambda vals: np.concatenate(vals, axis=1), "concat_columns")


def scale_columns(x: Node, s) -> Node:
    """x[:, j] * s[j] for a (d,L) matrix and an (L,) vector."""
    t = _tape_of(x, s)
    x, s = _lift(t, x), _lift(t, s)
    if x.value.ndim != 2 or s.value.ndim != 1 or x.value.shape[1] != s.value.shape[0]:
        raise ShapeError(f"scale_columns: got {x.value.shape} and {s.value.shape}")
    out = x.value * s.value

    def vjp(g):
        return (g * s.value, (g * x.value).sum(axis=0))

    return t._record(out, (x, s), vjp, lambda vals: vals[0] * vals[1], "scale_columns")


def scale_rows(x: Node, s) -> Node:
    """x[i, :] * s[i] for a (d,L) matrix and a (d,) vector."""
    t = _tape_of(x, s)
    x, s = _lift(t, x), _lift(t, s)
    if x.value.ndim != 2 or s.value.ndim != 1 or x.value.shape[0] != s.value.shape[0]:
        raise ShapeError(f"scale_rows: got {x.value.shape} and {s.value.shape}")
    out = x.value * s.value[:, None]

    def vjp(g):
        return (g * s.value[:, None], (g * x.value).sum(axis=1))

    return t._record(out, (x, s), vjp, lambda vals: vals[0] * vals[1][:, None], "scale_rows")


def embedding(table: Node, ids: Sequence[int]) -> Node:
    """Rows of a (vocab,d) table gathered for a token id sequence, as (d,L) columns."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.value
    if v.ndim != 2:
        raise ShapeError(f"embedding: need a (vocab,d) table, got {v.shape}")
    if ids.ndim != 1 or np.any(ids < 0) or np.any(ids >= v.shape[0]):
        raise ValueError(f"embedding: ids out of range for vocab {v.shape[0]}")
    out = v[ids].T.copy()

    def vjp(g):
        full = np.zeros_like(v)
        np.add.at(full, ids, g.T)
        return (full,)

    return table.tape._record(out, (table,), vjp, lambda vals: vals[0][ids].T.copy(), "embedding")


def causal_depthwise_conv(x: Node, kernel) -> Node:
    """Per-channel causal convolution of a (d,L) sequence with a (d,w) kernel."""
    t = _tape_of(x, kernel)
    x, kernel = _lift(t, x), _lift(t, kernel)
    v, k = x.value, kernel.value
    if v.ndim != 2 or k.ndim != 2 or v.shape[0] != k.shape[0]:
        raise ShapeError(f"causal_depthwise_conv: got {v.shape} and kernel {k.shape}")
    w = k.shape[1]

    def compute(vals):
        vv, kk = vals
        padded = np.concatenate([np.zeros((vv.shape[0], w - 1), dtype=vv.dtype), vv], axis=1)
        o = np.zeros_like(vv)
        for i in range(w):
            o += kk[:, i : i + 1] * padded[:, i : i + vv.shape[1]]
        return o

    out = compute((v, k))

    def vjp(g):
        gx = np.zeros_like(v)
        gk = np.zeros_like(k)
        padded = np.concatenate([np.zeros((v.shape[0], w - 1), dtype=v.dtype), v], axis=1)
        gpad = np.zeros_like(padded)
        for i in range(w):
            gk[:, i] = (g * padded[:, i : i + v.shape[1]]).sum(axis=1)
            gpad[:, i : i + v.shape[1]] += k[:, i : i + 1] * g
        gx = gpad[:, w - 1 :]
        return (gx, gk)

    return t._record(out, (x, kernel), vjp, compute, "causal_depthwise_conv")


# ---------------------------------------------------------------------------
# losses


def mse(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mse: shapes {a.value.shape} and {b.value.shape} differ")
    diff = a.value - b.value
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def vjp(g):
        c = 2.0 * g / n
        return (c * diff, -c * diff)

    return t._record(out, (a, b), vjp, lambda vals: np.asarray(((vals[0] - vals[1]) ** 2).sum() / n), "mse")


def dot(a, b) -> Node:
    """Full contraction <a, b> over identically shaped operands."""
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"dot: shapes {a.value.shape} and {b.value.shape} differ")
    out = np.asarray((a.value * b.value).sum())

    def vjp(g):
        return (g * b.value, g * a.value)

    return t._record(out, (a, b), vjp, lambda vals: np.asarray((vals[0] * vals[1]).sum()), "dot")


def dot_loss(a, b) -> Node:
    """-<a, b>: one gradient step on this recovers outer-product write rules."""
    return neg(dot(a, b))


def _log_softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=0)
    return z - np.log(np.exp(z).sum(axis=0))


def cross_entropy(logits: Node, target: int) -> Node:
    if logits.value.ndim != 1:
        raise ShapeError(f"cross_entropy: need a logit vector, got {logits.value.shape}")
    if not 0 <= target < logits.value.shape[0]:
        raise ValueError(f"cross_entropy: target {target} out of range")
    ls = _log_softmax(logits.value)
    out = np.asarray(-ls[target])

    def vjp(g):
        grad = np.exp(ls)
        grad[target] -= 1.0
        return (g * grad,)

    return logits.tape._record(out, (logits,), vjp, lambda vals: np.asarray(-_log_softmax(vals[0])[target]), "cross_entropy")


def cross_entropy_columns(logits: Node, targets: Sequence[int]) -> Node:
    """Mean cross-entropy of a (vocab,L) logit matrix against L integer targets."""
    v = logits.value
    targets = np.asarray(targets, dtype=np.int64)
    if v.ndim != 2:
        raise ShapeError(f"cross_entropy_columns: need a logit matrix, got {v.shape}")
    if targets.ndim != 1 or targets.shape[0] != v.shape[1]:
        raise ShapeError(f"cross_entropy_columns: {targets.shape[0]} targets for {v.shape[1]} columns")
    if np.any(targets < 0) or np.any(targets >= v.shape[0]):
        raise ValueError("cross_entropy_columns: target id out of range")
    n = v.shape[1]
    ls = _log_softmax(v)
    out = np.asarray(-ls[targets, np.arange(n)].mean())

    def vjp(g):
        grad = np.exp(ls)
        grad[targets, np.arange(n)] -= 1.0
        return (g * grad / n,)

    def fwd(vals):
        return np.asarray(-_log_softmax(vals[0])[targets, np.arange(n)].mean())

    return logits.tape._record(out, (logits,), vjp, fwd, "cross_entropy_columns")


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function; independent of the tape."""
    if h <= 0:
        raise ValueError(f"finite_diff_grad: step must be positive, got {h}")
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base)))
        flat[i] = orig - h
        fm = float(f(Tensor(base)))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError("finite_diff_grad: non-finite function value")
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(base.shape))
