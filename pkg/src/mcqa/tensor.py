"""Dense float64 tensors, a define-by-run computation record, and reverse-mode gradients.

A :class:`Tensor` is a rank-1 or rank-2 value.  Every operation also accepts an
optional leading batch axis: a batched tensor of shape ``(N, rows, cols)`` is N
independent matrices that share any unbatched operand (parameters are never
batched).  Gradients flowing into an unbatched operand are summed over the batch.

Operations record themselves on the :class:`Tape` of their first taped input.
Inputs without a tape are constants, so running a forward pass with constant
parameters records nothing.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

# op name -> multiplier applied to that op's input gradients (test-only fault injection)
_BACKWARD_FAULTS: dict[str, float] = {}


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Operation:
    name: str
    inputs: tuple[Tensor, ...]
    output: int
    value: np.ndarray
    forward: Callable[..., np.ndarray]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed operations (the computation record)."""

    ops: list[Operation] = field(default_factory=list)
    leaves: dict[int, str] = field(default_factory=dict)
    _next: int = 0

    def _new_node(self) -> int:
        self._next += 1
        return self._next

    def watch(self, store: "ParameterStore", name: str) -> Tensor:
        """Return the named parameter as a differentiable leaf on this tape."""
        node = self._new_node()
        self.leaves[node] = name
        return Tensor(store.value(name), self, node)

    def record(self, name, inputs, value, forward, backward) -> Tensor:
        node = self._new_node()
        self.ops.append(Operation(name, tuple(inputs), node, value, forward, backward))
        return Tensor(value, self, node)

    def replay(self) -> bool:
        """Re-run every recorded forward from the recorded inputs; True iff bit-identical."""
        values: dict[int, np.ndarray] = {}
        for op in self.ops:
            args = [values.get(t.node, t.data) if t.tape is self else t.data for t in op.inputs]
            out = op.forward(*args)
            if out.shape != op.value.shape or not np.array_equal(
                out.view(np.uint64), op.value.view(np.uint64)
            ):
                return False
            values[op.output] = out
        return True


class ParameterStore:
    """Named trainable arrays with gradient accumulators and optimizer slots."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._fresh: dict[str, bool] = {}
        self.slots: dict[str, dict[str, np.ndarray]] = {}

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=DTYPE)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        self._fresh[name] = False
        self.slots[name] = {}

    def names(self) -> list[str]:
        return list(self._values)

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def set_value(self, name: str, value) -> None:
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self._values[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self._values[name].shape}")
        self._values[name] = value.copy()

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def has_grad(self, name: str) -> bool:
        return self._fresh[name]

    def accumulate(self, name: str, g: np.ndarray) -> None:
        self._grads[name] += g
        self._fresh[name] = True

    def mark_populated(self) -> None:
        for name in self._fresh:
            self._fresh[name] = True

    def zero_grad(self) -> None:
        for name, g in self._grads.items():
            g[...] = 0.0
            self._fresh[name] = False

    def constants(self) -> dict[str, Tensor]:
        return {n: Tensor(v) for n, v in self._values.items()}

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for n, v in self._values.items():
            out.add(n, v)
            out._grads[n] = self._grads[n].copy()
            out._fresh[n] = self._fresh[n]
            out.slots[n] = {k: s.copy() for k, s in self.slots[n].items()}
        return out


@contextlib.contextmanager
def inject_backward_fault(op_name: str, factor: float = 1.5):
    """Scale the input gradients of every ``op_name`` op while active (for tests)."""
    _BACKWARD_FAULTS[op_name] = factor
    try:
        yield
    finally:
        _BACKWARD_FAULTS.pop(op_name, None)


def _op(name, inputs, forward, backward) -> Tensor:
    value = forward(*[t.data for t in inputs])
    tape = next((t.tape for t in inputs if t.tape is not None), None)
    if tape is None:
        return Tensor(value)
    return tape.record(name, inputs, value, forward, backward)


def _unbatch(g: np.ndarray, ndim: int) -> np.ndarray:
    # sum a batched gradient back onto an unbatched operand
    while g.ndim > ndim:
        g = g.sum(axis=0)
    return g


def backward(output: Tensor, store: ParameterStore | None = None, scale: float = 1.0) -> dict[int, np.ndarray]:
    """Propagate d(output) back through its tape, accumulating parameter gradients in ``store``.

    Every parameter in ``store`` is marked as having a gradient afterwards; one that
    the output does not depend on receives exactly zero.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output.tape is None:
        raise ValueError("output is a constant; nothing to differentiate")
    tape = output.tape
    grads: dict[int, np.ndarray] = {output.node: np.full(output.shape, scale, dtype=DTYPE)}
    for op in reversed(tape.ops):
        g = grads.pop(op.output, None)
        if g is None:
            continue
        in_grads = op.backward(g)
        fault = _BACKWARD_FAULTS.get(op.name)
        for t, gi in zip(op.inputs, in_grads):
            if gi is None or t.tape is not tape:
                continue
            if fault is not None:
                gi = gi * fault
            prev = grads.get(t.node)
            grads[t.node] = gi if prev is None else prev + gi
    if store is not None:
        for node, name in tape.leaves.items():
            g = grads.get(node)
            if g is not None:
                store.accumulate(name, g)
        store.mark_populated()
    return grads


# ---------------------------------------------------------------- operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``; ``b`` may be a vector, and either side may carry a batch axis."""
    a, b = as_tensor(a), as_tensor(b)
    a_nd, b_nd = a.data.ndim, b.data.ndim
    if a_nd < 2:
        raise ShapeError(f"matmul: left operand must be a matrix, got shape {a.shape}")
    inner = b.shape[0] if b_nd == 1 else b.shape[-2]
    if a.shape[-1] != inner:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")

    def back(g):
        A, B = a.data, b.data
        if b_nd == 1:
            return g[..., None] * B, A.reshape(-1, A.shape[-1]).T @ g.reshape(-1)
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return _unbatch(ga, a_nd), _unbatch(gb, b_nd)

    return _op("matmul", (a, b), np.matmul, back)


def transpose(a: Tensor) -> Tensor:
    """Swap the two trailing axes."""
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")

    def fwd(x):
        return np.ascontiguousarray(np.swapaxes(x, -1, -2))

    return _op("transpose", (a,), fwd, lambda g: (np.swapaxes(g, -1, -2),))


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes differ, {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _op("add", (a, b), np.add, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _op("sub", (a, b), np.subtract, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _op("mul", (a, b), np.multiply, lambda g: (g * b.data, g * a.data))


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        fn = {"add": add, "mul": mul, "sub": sub}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector to every row of ``x``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit rows of {x.shape}")
    return _op("add_bias", (x, bias), np.add, lambda g: (g, _unbatch(g, 1)))


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _op("scale", (x,), lambda v: v * c, lambda g: (g * c,))


def mask_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero the rows of ``x`` where ``mask`` is False (``mask`` has the shape of x minus its last axis)."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=DTYPE)[..., None]
    if m.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"mask_rows: mask {np.shape(mask)} does not fit {x.shape}")
    return _op("mask_rows", (x,), lambda v: v * m, lambda g: (g * m,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # subgradient at exactly 0 is 0
    return _op("relu", (x,), lambda v: np.maximum(v, 0.0), lambda g: (g * (x.data > 0),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _op("tanh", (x,), np.tanh, lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _op("sigmoid", (x,), _sigmoid, lambda g: (g * y * (1.0 - y),))


def _masked_softmax(v: np.ndarray, axis: int, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        shifted = v - v.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)
    neg = np.where(mask, v, -np.inf)
    peak = neg.max(axis=axis, keepdims=True)
    if not np.all(np.isfinite(peak)):
        raise ValueError("softmax slice has no valid positions")
    e = np.where(mask, np.exp(neg - peak), 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_axis(m: Tensor, axis: str | int = "rows", mask: np.ndarray | None = None) -> Tensor:
    """Softmax along one axis.

    ``axis="rows"`` normalises each row (the last axis), ``"cols"`` each column.
    ``mask`` marks valid key positions; it must broadcast against ``m`` and masked
    entries get exactly zero weight.
    """
    m = as_tensor(m)
    if axis in ("rows", -1):
        ax = -1
    elif axis in ("cols", -2):
        ax = -2
    else:
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    if ax == -2 and m.data.ndim < 2:
        raise ShapeError("column softmax needs a matrix")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), m.shape)
    y = _masked_softmax(m.data, ax, mask)

    def back(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _op("softmax", (m,), lambda v: _masked_softmax(v, ax, mask), back)


def concat_features(parts: Sequence[Tensor]) -> Tensor:
    """Lay matrices with equal row counts side by side, in argument order."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_features needs at least one operand")
    lead = parts[0].shape[:-1]
    for i, p in enumerate(parts):
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat_features: operand {i} has shape {p.shape}, expected rows {lead}")
    offsets = np.cumsum([0] + [p.shape[-1] for p in parts])

    def back(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _op("concat", tuple(parts), lambda *xs: np.concatenate(xs, axis=-1), back)


def weighted_sum(weights: Tensor, rows: Tensor) -> Tensor:
    """Convex combination of the rows of ``rows`` (T×d) by a length-T simplex vector."""
    weights, rows = as_tensor(weights), as_tensor(rows)
    w = weights.data
    if w.shape != rows.shape[:-1]:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs rows {rows.shape}")
    if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("weighted_sum: weights must be nonnegative and sum to 1")

    def fwd(wv, rv):
        return np.einsum("...t,...td->...d", wv, rv)

    def back(g):
        gw = np.einsum("...d,...td->...t", g, rows.data)
        gr = w[..., None] * g[..., None, :]
        return gw, gr

    return _op("weighted_sum", (weights, rows), fwd, back)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather along the batch axis: ``out[i] = x[index[i]]``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    n = x.shape[0]

    def back(g):
        out = np.zeros((n,) + g.shape[1:], dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _op("take_rows", (x,), lambda v: v[index], back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _op("reshape", (x,), lambda v: v.reshape(shape), lambda g: (g.reshape(old),))


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _op("sum", (x,), lambda v: np.asarray(v.sum()), lambda g: (np.full(x.shape, g),))


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _op("mean", (x,), lambda v: np.asarray(v.sum() / n), lambda g: (np.full(x.shape, g / n),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_all(mul(a, b))


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels, in the stable logit form."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeError(f"bce: labels {y.shape} vs logits {logits.shape}")
    n = y.size

    def fwd(z):
        per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        return np.asarray(per.sum() / n)

    def back(g):
        return (g * (_sigmoid(logits.data) - y) / n,)

    return _op("bce", (logits,), fwd, back)


# ---------------------------------------------------------------- fused LSTM scan


def _lstm_scan_forward(x, w, u, b, mask, reverse):
    n, steps, _ = x.shape
    hid = u.shape[1]
    z = x @ w.T + b
    ut = np.ascontiguousarray(u.T)
    h = np.zeros((n, hid))
    c = np.zeros((n, hid))
    out = np.zeros((n, steps, hid))
    full = mask is None
    cache = []
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        a = z[:, t] + h @ ut
        # sigmoid(v) = (1 + tanh(v/2)) / 2 on all blocks, then the candidate block is redone as tanh
        act = np.tanh(a * 0.5)
        act += 1.0
        act *= 0.5
        act[:, 2 * hid:3 * hid] = np.tanh(a[:, 2 * hid:3 * hid])
        c_new = act[:, hid:2 * hid] * c + act[:, :hid] * act[:, 2 * hid:3 * hid]
        tch = np.tanh(c_new)
        h_new = act[:, 3 * hid:] * tch
        m = None if full else mask[:, t, None]
        cache.append((t, act, c, h, tch, m))
        if full:
            c, h = c_new, h_new
            out[:, t] = h_new
        else:
            c = m * c_new + (1.0 - m) * c
            h = m * h_new + (1.0 - m) * h
            out[:, t] = m * h_new
    return out, cache


def _lstm_scan_backward(gout, x, w, u, cache):
    n, steps, d_in = x.shape
    hid = u.shape[1]
    dz = np.zeros((n, steps, 4 * hid))
    du = np.zeros_like(u)
    gh = np.zeros((n, hid))
    gc = np.zeros((n, hid))
    for t, act, c_prev, h_prev, tch, m in reversed(cache):
        i, f, g, o = act[:, :hid], act[:, hid:2 * hid], act[:, 2 * hid:3 * hid], act[:, 3 * hid:]
        dh_new = gh + gout[:, t]
        if m is not None:
            dh_new *= m
            gc_in = m * gc
        else:
            gc_in = gc
        dc_new = gc_in + dh_new * o * (1.0 - tch * tch)
        da = dz[:, t]
        da[:, :hid] = dc_new * g * i * (1.0 - i)
        da[:, hid:2 * hid] = dc_new * c_prev * f * (1.0 - f)
        da[:, 2 * hid:3 * hid] = dc_new * i * (1.0 - g * g)
        da[:, 3 * hid:] = dh_new * tch * o * (1.0 - o)
        if m is None:
            gc = dc_new * f
            gh = da @ u
        else:
            gc = dc_new * f + (1.0 - m) * gc
            gh = da @ u + (1.0 - m) * gh
        du += da.T @ h_prev
    flat = dz.reshape(n * steps, 4 * hid)
    dw = flat.T @ x.reshape(n * steps, d_in)
    db = flat.sum(axis=0)
    dx = dz @ w
    return dx, dw, du, db


def lstm_scan(x: Tensor, w: Tensor, u: Tensor, b: Tensor, mask: np.ndarray | None = None,
              reverse: bool = False) -> Tensor:
    """Run an LSTM over a (batched) sequence as one differentiable operation.

    ``w`` is (4h, d_in), ``u`` is (4h, h), ``b`` is (4h,), gate blocks ordered
    input, forget, candidate, output.  Steps where ``mask`` is False leave the
    state unchanged and emit a zero row.
    """
    x, w, u, b = (as_tensor(t) for t in (x, w, u, b))
    batched = x.data.ndim == 3
    xd = x.data if batched else x.data[None]
    n, steps, d_in = xd.shape
    hid = u.shape[1]
    if w.shape != (4 * hid, d_in) or u.shape != (4 * hid, hid) or b.shape != (4 * hid,):
        raise ShapeError(
            f"lstm_scan: inconsistent shapes x={x.shape} w={w.shape} u={u.shape} b={b.shape}")
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=DTYPE).reshape(n, steps)
        if np.all(m == 1.0):
            m = None
    out, cache = _lstm_scan_forward(xd, w.data, u.data, b.data, m, reverse)

    def fwd(xv, wv, uv, bv):
        o, _ = _lstm_scan_forward(xv if batched else xv[None], wv, uv, bv, m, reverse)
        return o if batched else o[0]

    def back(gout):
        dx, dw, du, db = _lstm_scan_backward(gout if batched else gout[None], xd, w.data, u.data, cache)
        return (dx if batched else dx[0]), dw, du, db

    result = out if batched else out[0]
    tape = next((t.tape for t in (x, w, u, b) if t.tape is not None), None)
    if tape is None:
        return Tensor(result)
    return tape.record("lstm_scan", (x, w, u, b), result, fwd, back)


# ---------------------------------------------------------------- verification


def finite_difference_gradients(f: Callable[[ParameterStore], Tensor], store: ParameterStore,
                                eps: float = 1e-5, names: Sequence[str] | None = None,
                                ) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Analytic and central-difference gradients of ``f`` for every entry of every named parameter.

    ``f`` must build its output on a fresh tape that watches ``store``'s parameters.
    """
    names = list(store.names() if names is None else names)
    store.zero_grad()
    backward(f(store), store)
    analytic = {n: store.grad(n).copy() for n in names}
    store.zero_grad()
    out = {}
    for name in names:
        flat = store.value(name).reshape(-1)
        numeric = np.empty(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = f(store).item()
            flat[k] = orig - eps
            down = f(store).item()
            flat[k] = orig
            numeric[k] = (up - down) / (2.0 * eps)
        out[name] = (analytic[name].reshape(-1), numeric)
    return out


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)


def finite_difference_check(f: Callable[[ParameterStore], Tensor], store: ParameterStore,
                            eps: float = 1e-5, names: Sequence[str] | None = None,
                            ) -> tuple[float, dict[str, float]]:
    """Maximum relative error between analytic and central-difference gradients.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, 1e-8)``.  Returns the
    overall maximum and the maximum per parameter name.
    """
    grads = finite_difference_gradients(f, store, eps, names)
    per_name = {n: float(relative_errors(a, num).max(initial=0.0)) for n, (a, num) in grads.items()}
    return (max(per_name.values()) if per_name else 0.0), per_name
