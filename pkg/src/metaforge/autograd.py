"""Dense-tensor reverse-mode automatic differentiation with higher-order support.

Values are 64-bit floats throughout.  Every differentiable operation is
recorded on a per-context :class:`Tape`; the backward rules are themselves
written in terms of recorded operations, so ``backward(..., create_graph=True)``
yields gradients that can be differentiated again, to any order.

Tapes are confined to one evaluation context (thread-local); tensors with
``requires_grad=False`` are plain immutable values and may be shared freely.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class AutogradError(Exception):
    """Base error for tape/tensor misuse."""


class ShapeError(AutogradError):
    """Operand shapes incompatible with the requested op."""


class TapeError(AutogradError):
    """Operation attempted outside (or across) tape contexts."""


class UnusedInputError(AutogradError):
    """A differentiation target does not contribute to the output."""

    def __init__(self, indices, message):
        super().__init__(message)
        self.indices = tuple(indices)


_LOCAL = threading.local()


def _state():
    if not hasattr(_LOCAL, "tape"):
        _LOCAL.tape = None
        _LOCAL.recording = True
    return _LOCAL


class Tape:
    """Append-only op record for one evaluation context.

    ``generation`` counts nested differentiation levels: it starts at 1 and is
    bumped by every ``backward(create_graph=True)``, which is the only way
    second-order structure enters the tape.
    """

    __slots__ = ("nodes", "generation")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 1

    def __len__(self):
        return len(self.nodes)


class _Node:
    __slots__ = ("op", "parents", "inputs", "output", "aux")

    def __init__(self, op, parents, inputs, output, aux):
        self.op = op
        self.parents = parents      # node ids of grad-tracked inputs (-1 for constants)
        self.inputs = inputs        # input tensors, saved for the backward rule
        self.output = output
        self.aux = aux


class Tensor:
    """Immutable dense f64 value, optionally attached to the active tape."""

    __slots__ = ("data", "requires_grad", "node", "tape")

    def __init__(self, data: np.ndarray, requires_grad: bool, node: int | None, tape: Tape | None):
        if data.flags.writeable:
            data.setflags(write=False)
        self.data = data
        self.requires_grad = requires_grad
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, False, None, None)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar, used heavily by the layers built on top
    def __add__(self, other):
        return apply("add", self, other)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __mul__(self, other):
        return apply("mul", self, other)

    def __truediv__(self, other):
        return apply("div", self, other)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __neg__(self):
        return apply("neg", self)


@contextmanager
def tape():
    """Open a fresh Tape as the active context on this thread."""
    st = _state()
    prev = st.tape
    t = Tape()
    st.tape = t
    try:
        yield t
    finally:
        st.tape = prev


@contextmanager
def no_grad():
    """Disable recording; ops return constant tensors."""
    st = _state()
    prev = st.recording
    st.recording = False
    try:
        yield
    finally:
        st.recording = prev


def active_tape() -> Tape | None:
    return _state().tape


def _freeze(arr: np.ndarray) -> np.ndarray:
    if arr.flags.writeable:
        arr.setflags(write=False)
    return arr


def constant(data, shape: Sequence[int] | None = None) -> Tensor:
    """Wrap values as a constant (requires_grad=False) tensor."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    return Tensor(arr, False, None, None)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=np.float64), False, None, None)


def zeros_like(t: Tensor) -> Tensor:
    return zeros(t.shape)


def tensor_of(shape: Sequence[int], data, requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor; grad-tracked leaves register on the active tape."""
    shape = tuple(int(s) for s in shape)
    arr = np.array(data, dtype=np.float64).reshape(-1)
    n = 1
    for s in shape:
        if s < 0:
            raise ShapeError(f"negative extent in shape {shape}")
        n *= s
    if arr.size != n:
        raise ShapeError(
            f"shape {shape} implies {n} values but data has {arr.size}")
    arr = arr.reshape(shape)
    if not requires_grad:
        return Tensor(arr, False, None, None)
    st = _state()
    if st.tape is None:
        raise TapeError("requires_grad tensor created outside a tape context")
    out = Tensor(arr, True, len(st.tape.nodes), st.tape)
    st.tape.nodes.append(_Node("leaf", (), (), out, None))
    return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x)


# ---------------------------------------------------------------------------
# op table: forward rules on raw arrays, backward rules in terms of taped ops

def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _fw_add(a, b):
    _same_shape("add", a, b)
    return a + b


def _fw_sub(a, b):
    _same_shape("sub", a, b)
    return a - b


def _fw_mul(a, b):
    _same_shape("mul", a, b)
    return a * b


def _fw_div(a, b):
    _same_shape("div", a, b)
    return a / b


def _fw_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} invalid")
    return a @ b


def _fw_sum(a, *, axis=None):
    if axis is None:
        return np.asarray(a.sum(), dtype=np.float64)
    if a.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"sum: axis {axis} on shape {a.shape} unsupported")
    return a.sum(axis=axis)


def _fw_mean(a, *, axis=None):
    if a.size == 0:
        raise ShapeError("mean of empty tensor")
    if axis is None:
        return np.asarray(a.mean(), dtype=np.float64)
    if a.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"mean: axis {axis} on shape {a.shape} unsupported")
    return a.mean(axis=axis)


def _fw_broadcast(a, *, n):
    # leading-dimension expansion only: scalar -> (n,), (d,) -> (n, d)
    if a.ndim == 0:
        return np.broadcast_to(a, (n,))
    if a.ndim == 1:
        return np.broadcast_to(a, (n, a.shape[0]))
    raise ShapeError(f"broadcast: rank-{a.ndim} input unsupported")


def _fw_expand_cols(a, *, n):
    if a.ndim != 1:
        raise ShapeError(f"expand_cols: shape {a.shape} is not a vector")
    return np.broadcast_to(a[:, None], (a.shape[0], n))


def _fw_fill(a, *, shape):
    if a.ndim != 0 and a.size != 1:
        raise ShapeError("fill: input must be scalar")
    return np.broadcast_to(a.reshape(()), tuple(shape))


def _fw_reshape(a, *, shape):
    shape = tuple(shape)
    n = 1
    for s in shape:
        n *= s
    if n != a.size:
        raise ShapeError(f"reshape: {a.shape} -> {shape} changes element count")
    return a.reshape(shape)


def _fw_index_rows(a, *, indices):
    if a.ndim < 1:
        raise ShapeError("index_rows: scalar input")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(
            f"index_rows: index out of range for leading extent {a.shape[0]}")
    return a[idx]


def _fw_scatter_rows(a, *, indices, num_rows):
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((num_rows,) + a.shape[1:], dtype=np.float64)
    np.add.at(out, idx, a)
    return out


def _fw_log(a):
    return np.log(a)


def _fw_sqrt(a):
    return np.sqrt(a)


_FORWARD: dict[str, Callable] = {
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "div": _fw_div,
    "neg": lambda a: -a,
    "square": lambda a: a * a,
    "exp": np.exp,
    "log": _fw_log,
    "tanh": np.tanh,
    "relu": lambda a: np.maximum(a, 0.0),
    "sqrt": _fw_sqrt,
    "scale": lambda a, *, c: a * c,
    "matmul": _fw_matmul,
    "transpose": lambda a: a.T if a.ndim == 2 else (_ for _ in ()).throw(
        ShapeError(f"transpose: rank-{a.ndim} input")),
    "sum": _fw_sum,
    "mean": _fw_mean,
    "broadcast": _fw_broadcast,
    "expand_cols": _fw_expand_cols,
    "fill": _fw_fill,
    "reshape": _fw_reshape,
    "index_rows": _fw_index_rows,
    "scatter_rows": _fw_scatter_rows,
}


def _ones_like(t: Tensor) -> Tensor:
    return constant(np.ones(t.shape, dtype=np.float64))


def _vjp(node: _Node, g: Tensor) -> tuple[Tensor | None, ...]:
    op = node.op
    ins = node.inputs
    aux = node.aux or {}
    if op == "add":
        return g, g
    if op == "sub":
        return g, apply("neg", g)
    if op == "mul":
        return apply("mul", g, ins[1]), apply("mul", g, ins[0])
    if op == "div":
        ga = apply("div", g, ins[1])
        gb = apply("neg", apply("div", apply("mul", g, ins[0]),
                                apply("square", ins[1])))
        return ga, gb
    if op == "neg":
        return (apply("neg", g),)
    if op == "square":
        return (apply("scale", apply("mul", g, ins[0]), c=2.0),)
    if op == "exp":
        return (apply("mul", g, node.output),)
    if op == "log":
        return (apply("div", g, ins[0]),)
    if op == "tanh":
        sech2 = apply("sub", _ones_like(node.output), apply("square", node.output))
        return (apply("mul", g, sech2),)
    if op == "relu":
        mask = constant((ins[0].data > 0).astype(np.float64))
        return (apply("mul", g, mask),)
    if op == "sqrt":
        return (apply("scale", apply("div", g, node.output), c=0.5),)
    if op == "scale":
        return (apply("scale", g, c=aux["c"]),)
    if op == "matmul":
        ga = apply("matmul", g, apply("transpose", ins[1]))
        gb = apply("matmul", apply("transpose", ins[0]), g)
        return ga, gb
    if op == "transpose":
        return (apply("transpose", g),)
    if op == "sum":
        return (_spread(g, ins[0], aux.get("axis"), 1.0),)
    if op == "mean":
        axis = aux.get("axis")
        if axis is None:
            k = 1.0 / ins[0].data.size
        else:
            k = 1.0 / ins[0].data.shape[axis]
        return (_spread(g, ins[0], axis, k),)
    if op == "broadcast":
        if ins[0].data.ndim == 0:
            return (apply("sum", g),)
        return (apply("sum", g, axis=0),)
    if op == "expand_cols":
        return (apply("sum", g, axis=1),)
    if op == "fill":
        s = apply("sum", g)
        if ins[0].data.shape != ():
            s = apply("reshape", s, shape=ins[0].data.shape)
        return (s,)
    if op == "reshape":
        return (apply("reshape", g, shape=ins[0].data.shape),)
    if op == "index_rows":
        return (apply("scatter_rows", g, indices=aux["indices"],
                      num_rows=ins[0].data.shape[0]),)
    if op == "scatter_rows":
        return (apply("index_rows", g, indices=aux["indices"]),)
    raise AutogradError(f"no backward rule for op '{op}'")


def _spread(g: Tensor, src: Tensor, axis, k: float) -> Tensor:
    """Backward of a reduction: route g back to src's shape, scaled by k."""
    if k != 1.0:
        g = apply("scale", g, c=k)
    if axis is None:
        if src.data.ndim == 0:
            return g
        return apply("fill", g, shape=src.data.shape)
    if axis == 0:
        return apply("broadcast", g, n=src.data.shape[0])
    return apply("expand_cols", g, n=src.data.shape[1])


def apply(op: str, *args, **aux) -> Tensor:
    """Evaluate op on tensors; record it when any operand is grad-tracked."""
    fwd = _FORWARD.get(op)
    if fwd is None:
        raise AutogradError(f"unknown op '{op}'")
    tensors = tuple(as_tensor(a) for a in args)
    try:
        out_data = fwd(*(t.data for t in tensors), **aux)
    except ShapeError:
        raise
    except (ValueError, TypeError) as exc:
        raise ShapeError(f"{op}: {exc}") from exc
    out_data = _freeze(np.asarray(out_data, dtype=np.float64))

    st = _state()
    tp = st.tape
    if not st.recording or tp is None or not any(t.requires_grad for t in tensors):
        return Tensor(out_data, False, None, None)
    for t in tensors:
        if t.requires_grad and t.tape is not tp:
            raise TapeError(f"{op}: operand belongs to a different tape")
    out = Tensor(out_data, True, len(tp.nodes), tp)
    parents = tuple(t.node if t.requires_grad else -1 for t in tensors)
    tp.nodes.append(_Node(op, parents, tensors, out, aux or None))
    return out


# ---------------------------------------------------------------------------
# reverse sweep

def grad_or_none(output: Tensor, wrt: Sequence[Tensor],
                 create_graph: bool = False) -> list[Tensor | None]:
    """Like backward() but returns None for targets the output never used."""
    wrt = list(wrt)
    if output.data.size != 1:
        raise ShapeError(f"backward: output has shape {output.shape}, not scalar")
    for i, w in enumerate(wrt):
        if not isinstance(w, Tensor) or not w.requires_grad:
            raise AutogradError(
                f"backward: target #{i} has requires_grad=False; "
                "gradients are only produced for tracked tensors")

    if not output.requires_grad or output.tape is None:
        return [None] * len(wrt)
    tp: Tape = output.tape
    if create_graph:
        tp.generation += 1

    wanted: dict[int, int] = {}
    for i, w in enumerate(wrt):
        if w.tape is tp:
            wanted.setdefault(w.node, i)

    st = _state()
    prev_recording = st.recording
    st.recording = bool(create_graph)
    acc: dict[int, Tensor] = {output.node: constant(np.ones((), dtype=np.float64))
                              if output.data.shape == ()
                              else constant(np.ones(output.data.shape))}
    captured: dict[int, Tensor] = {}
    try:
        for nid in range(output.node, -1, -1):
            g = acc.pop(nid, None)
            if g is None:
                continue
            if nid in wanted:
                captured[nid] = g
            node = tp.nodes[nid]
            if node.op == "leaf":
                continue
            pgrads = _vjp(node, g)
            for pid, pg in zip(node.parents, pgrads):
                if pid < 0 or pg is None:
                    continue
                prev = acc.get(pid)
                acc[pid] = pg if prev is None else apply("add", prev, pg)
    finally:
        st.recording = prev_recording

    out: list[Tensor | None] = []
    for w in wrt:
        g = captured.get(w.node) if w.tape is tp else None
        out.append(g)
    return out


def backward(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False,
             allow_unused: bool = False) -> list[Tensor]:
    """Gradients of a scalar output with respect to each target tensor.

    With ``create_graph=True`` the returned gradients are recorded on the same
    tape and can be differentiated again.  Targets that do not influence the
    output raise :class:`UnusedInputError` unless ``allow_unused`` is set, in
    which case they receive zero gradients.
    """
    wrt = list(wrt)
    grads = grad_or_none(output, wrt, create_graph=create_graph)
    missing = [i for i, g in enumerate(grads) if g is None]
    if missing and not allow_unused:
        raise UnusedInputError(
            missing, f"backward: targets {missing} are unused by the output")
    return [g if g is not None else zeros_like(w) for g, w in zip(grads, wrt)]


def finite_diff(f: Callable[[Tensor], Tensor], theta: Tensor, step: float) -> Tensor:
    """Central-difference gradient estimate of a scalar function, per coordinate."""
    if step <= 0:
        raise ValueError(f"finite_diff: step must be positive, got {step}")
    base = np.array(theta.data, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        hi = f(constant((flat + bump).reshape(base.shape))).item()
        lo = f(constant((flat - bump).reshape(base.shape))).item()
        out[i] = (hi - lo) / (2.0 * step)
    return constant(out.reshape(base.shape))
