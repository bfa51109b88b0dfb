"""Reverse-mode automatic differentiation over float64 scalars and flat vectors.

Primitive operations are recorded on a :class:`Tape` in execution order. A
reverse sweep builds the adjoints *as tape expressions* (every partial is
itself a recorded op), so sweeping the output of a sweep yields second
derivatives: a Hessian-vector product is one extra sweep instead of an
explicit Hessian.

Values are python floats / numpy float64 scalars or 1-D float64 arrays.
The only broadcasting is scalar-with-vector; there are no tensors. Forward
values are computed eagerly, so a tape is replayable and deterministic for
fixed inputs.

NaN policy: sweeps are cheap-checked at the end; if a requested gradient is
non-finite the sweep is re-run with per-node checks to name the first
offending node, then raises :class:`NonFiniteError`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "AutodiffError",
    "NonFiniteError",
    "Tape",
    "Var",
    "grad",
    "grad_vars",
    "vjp",
    "hvp",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "tanh",
    "relu",
    "vsum",
    "vmax",
    "dot",
    "stack",
    "index",
    "narrow",
    "embed",
    "clampmin",
    "matvec",
    "track_allocations",
]


class AutodiffError(Exception):
    """Malformed use of the tape: wrong tape, bad shapes, non-scalar output."""


class NonFiniteError(AutodiffError):
    """A non-finite partial was produced; the message names the tape node."""


def _size(v) -> int:
    return 1 if np.ndim(v) == 0 else v.shape[0]


def _is_finite(v) -> bool:
    return bool(np.all(np.isfinite(v)))


# --------------------------------------------------------------------------
# allocation tracking (used by the memory-profile assertions of the
# hypergradient pipeline; inert unless a tracker is active)

_TRACK = threading.local()


class AllocationStats:
    """Float counts observed while a tracker is active.

    max_node_floats  -- largest single value allocated on any tape.
    peak_tape_floats -- per tape label, the largest total float count any
                        one tape reached (live state of that computation).
    """

    def __init__(self):
        self.max_node_floats = 0
        self.peak_tape_floats: dict[str, int] = {}

    def _record(self, label: str, node_floats: int, tape_floats: int) -> None:
        if node_floats > self.max_node_floats:
            self.max_node_floats = node_floats
        if tape_floats > self.peak_tape_floats.get(label, 0):
            self.peak_tape_floats[label] = tape_floats


@contextmanager
def track_allocations():
    """Collect allocation statistics for tapes created inside the block."""
    stats = AllocationStats()
    stack = getattr(_TRACK, "stack", None)
    if stack is None:
        stack = _TRACK.stack = []
    stack.append(stats)
    try:
        yield stats
    finally:
        stack.pop()


def _active_stats():
    stack = getattr(_TRACK, "stack", None)
    return stack[-1] if stack else None


# --------------------------------------------------------------------------
# tape and variables


class _Node:
    __slots__ = ("op", "args", "value", "aux")

    def __init__(self, op, args, value, aux=None):
        self.op = op
        self.args = args
        self.value = value
        self.aux = aux


class Tape:
    """Execution-ordered record of primitive operations.

    Nodes only ever append, so every node's operands precede it. ``mark`` /
    ``reset_to`` discard scratch nodes (the CG solver reuses one tape across
    iterations this way). A tape is single-threaded; independent tapes may
    be used concurrently.
    """

    def __init__(self, label: str = "tape"):
        self.nodes: list[_Node] = []
        self.label = label
        self._floats = 0
        self._stats = _active_stats()

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def float_count(self) -> int:
        return self._floats

    def _append(self, op, args, value, aux=None) -> "Var":
        self.nodes.append(_Node(op, args, value, aux))
        n = _size(value)
        self._floats += n
        if self._stats is not None:
            self._stats._record(self.label, n, self._floats)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> "Var":
        """Record an input variable (gradient target)."""
        return self._append("leaf", (), _coerce(value))

    def constant(self, value) -> "Var":
        """Record a constant (never differentiated)."""
        return self._append("const", (), _coerce(value))

    def wrap(self, x) -> "Var":
        if isinstance(x, Var):
            if x.tape is not self:
                raise AutodiffError("variable belongs to a different tape")
            return x
        return self.constant(x)

    def mark(self) -> int:
        return len(self.nodes)

    def reset_to(self, mark: int) -> None:
        """Drop all nodes recorded after ``mark``."""
        for node in self.nodes[mark:]:
            self._floats -= _size(node.value)
        del self.nodes[mark:]


def _coerce(value):
    # np.float64 (not python float) so scalar arithmetic keeps IEEE
    # semantics: 1/0 is inf, surfaced later at gradient extraction
    if np.ndim(value) == 0:
        return np.float64(value)
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 1:
        raise AutodiffError(f"values must be scalars or 1-D vectors, got shape {arr.shape}")
    return arr


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "index")

    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.nodes[self.index].value

    @property
    def size(self) -> int:
        return _size(self.value)

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var({node.op}@{self.index}, value={node.value!r})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _binary("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __rsub__(self, other):
        return _binary("sub", self.tape.wrap(other), self)

    def __mul__(self, other):
        return _binary("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary("div", self, other)

    def __rtruediv__(self, other):
        return _binary("div", self.tape.wrap(other), self)

    def __neg__(self):
        return self.tape._append("neg", (self.index,), -self.value)

    def __pow__(self, p):
        if isinstance(p, Var):
            raise AutodiffError("pow exponent must be a constant")
        p = float(p)
        return self.tape._append("pow", (self.index,), self.value ** p, p)

    def __getitem__(self, key):
        if isinstance(key, slice):
            start, stop, step = key.indices(self.size)
            if step != 1:
                raise AutodiffError("only unit-stride slices are supported")
            return narrow(self, start, stop)
        return index(self, int(key))


def _binary(op, a, b):
    if isinstance(a, Var):
        tape = a.tape
        b = tape.wrap(b)
    else:
        tape = b.tape
        a = tape.wrap(a)
    av, bv = a.value, b.value
    na, nb = _size(av), _size(bv)
    if na > 1 and nb > 1 and na != nb:
        raise AutodiffError(f"length mismatch in {op}: {na} vs {nb}")
    if op == "add":
        value = av + bv
    elif op == "sub":
        value = av - bv
    elif op == "mul":
        value = av * bv
    else:
        value = av / bv
    return tape._append(op, (a.index, b.index), value)


# --------------------------------------------------------------------------
# generic functional ops: accept a Var (recorded) or plain numbers/arrays
# (evaluated directly with the same numpy calls, so both modes produce
# bit-identical values)


def exp(x):
    if isinstance(x, Var):
        return x.tape._append("exp", (x.index,), np.exp(x.value))
    return np.exp(x)


def log(x):
    if isinstance(x, Var):
        return x.tape._append("log", (x.index,), np.log(x.value))
    return np.log(x)


def sqrt(x):
    if isinstance(x, Var):
        return x.tape._append("sqrt", (x.index,), np.sqrt(x.value))
    return np.sqrt(x)


def sin(x):
    if isinstance(x, Var):
        return x.tape._append("sin", (x.index,), np.sin(x.value))
    return np.sin(x)


def cos(x):
    if isinstance(x, Var):
        return x.tape._append("cos", (x.index,), np.cos(x.value))
    return np.cos(x)


def tanh(x):
    if isinstance(x, Var):
        return x.tape._append("tanh", (x.index,), np.tanh(x.value))
    return np.tanh(x)


def relu(x):
    """max(x, 0) elementwise, with subgradient 0 at 0."""
    if isinstance(x, Var):
        return x.tape._append("relu", (x.index,), np.maximum(x.value, 0.0))
    return np.maximum(x, 0.0)


def vsum(x):
    """Sum of a vector's entries (scalar passes through)."""
    if isinstance(x, Var):
        if x.size == 1:
            return x
        return x.tape._append("sum", (x.index,), np.float64(np.sum(x.value)))
    return x if np.ndim(x) == 0 else np.float64(np.sum(x))


def vmax(x):
    """Largest entry of a vector; subgradient goes to the first argmax."""
    if isinstance(x, Var):
        if x.size == 1:
            return x
        v = x.value
        return x.tape._append("max", (x.index,), v[np.argmax(v)], int(np.argmax(v)))
    return x if np.ndim(x) == 0 else x[np.argmax(x)]


def dot(a, b):
    """Inner product of two equal-length vectors."""
    if isinstance(a, Var) or isinstance(b, Var):
        tape = a.tape if isinstance(a, Var) else b.tape
        a, b = tape.wrap(a), tape.wrap(b)
        if a.size != b.size:
            raise AutodiffError(f"dot length mismatch: {a.size} vs {b.size}")
        return tape._append("dot", (a.index, b.index), np.float64(np.dot(a.value, b.value)))
    return np.float64(np.dot(a, b))


def stack(items):
    """Build a vector from scalars."""
    items = list(items)
    tape = next((x.tape for x in items if isinstance(x, Var)), None)
    if tape is None:
        return np.asarray(items, dtype=np.float64)
    items = [tape.wrap(x) for x in items]
    value = np.asarray([x.value for x in items], dtype=np.float64)
    return tape._append("stack", tuple(x.index for x in items), value)


def index(x, i: int):
    """Extract entry ``i`` of a vector as a scalar."""
    if isinstance(x, Var):
        return x.tape._append("index", (x.index,), x.value[i], i)
    return x[i]


def narrow(x, start: int, stop: int):
    """Contiguous slice ``x[start:stop]``."""
    if isinstance(x, Var):
        return x.tape._append("narrow", (x.index,), x.value[start:stop], (start, stop))
    return x[start:stop]


def embed(x, start: int, total: int):
    """Place vector ``x`` at offset ``start`` of a zero vector of length ``total``."""
    if isinstance(x, Var):
        out = np.zeros(total)
        out[start:start + x.size] = x.value
        return x.tape._append("embed", (x.index,), out, (start, total))
    out = np.zeros(total)
    xa = np.atleast_1d(x)
    out[start:start + xa.shape[0]] = xa
    return out


def clampmin(x, floor: float):
    """Elementwise max(x, floor), built from relu so it stays on the tape."""
    return floor + relu(x - floor) if isinstance(x, Var) else np.maximum(x, floor)


def matvec(mat: np.ndarray, x, trans: bool = False):
    """Product of a constant matrix (or its transpose) with a vector.

    The matrix is held as node metadata, not a tape value: it is an input
    (typically the pixel data of a batch), never a computed intermediate.
    """
    if isinstance(x, Var):
        A = mat.T if trans else mat
        return x.tape._append("matvec", (x.index,), A @ x.value, (mat, trans))
    return (mat.T if trans else mat) @ x


def _expand(tape, w, n):
    """Broadcast a scalar adjoint across a vector operand."""
    value = np.full(n, w.value)
    return tape._append("expand", (w.index,), value, n)


def _scatter(tape, w, i, n):
    """Adjoint of index/max: scalar ``w`` placed at position ``i`` of length ``n``."""
    value = np.zeros(n)
    value[i] = w.value
    return tape._append("scatter", (w.index,), value, (i, n))


# --------------------------------------------------------------------------
# reverse sweep


def _reduce(tape, w, operand_size):
    """Match an adjoint's shape to its operand (sum over a broadcast)."""
    if operand_size == 1 and w.size > 1:
        return vsum(w)
    return w


def _contribs(tape, idx, node, w):
    """Adjoint contributions of node ``idx`` to its operands, as Vars."""
    op = node.op
    args = node.args
    if op in ("add", "sub", "mul", "div", "dot"):
        a, b = Var(tape, args[0]), Var(tape, args[1])
        if op == "add":
            return ((args[0], _reduce(tape, w, a.size)), (args[1], _reduce(tape, w, b.size)))
        if op == "sub":
            return ((args[0], _reduce(tape, w, a.size)), (args[1], _reduce(tape, -w, b.size)))
        if op == "mul":
            return ((args[0], _reduce(tape, w * b, a.size)), (args[1], _reduce(tape, w * a, b.size)))
        if op == "div":
            out = Var(tape, idx)
            return ((args[0], _reduce(tape, w / b, a.size)), (args[1], _reduce(tape, -(w * out) / b, b.size)))
        # dot: w is scalar
        return ((args[0], w * b), (args[1], w * a))
    a = Var(tape, args[0]) if args else None
    out = Var(tape, idx)
    if op == "neg":
        return ((args[0], -w),)
    if op == "exp":
        return ((args[0], w * out),)
    if op == "log":
        return ((args[0], w / a),)
    if op == "sqrt":
        return ((args[0], (0.5 * w) / out),)
    if op == "sin":
        return ((args[0], w * cos(a)),)
    if op == "cos":
        return ((args[0], -(w * sin(a))),)
    if op == "tanh":
        return ((args[0], w * (1.0 - out * out)),)
    if op == "relu":
        mask = (np.asarray(a.value) > 0.0) * 1.0
        return ((args[0], w * (float(mask) if np.ndim(mask) == 0 else mask)),)
    if op == "pow":
        p = node.aux
        return ((args[0], w * (p * a ** (p - 1.0))),)
    if op == "sum":
        return ((args[0], _expand(tape, w, a.size)),)
    if op == "max":
        return ((args[0], _scatter(tape, w, node.aux, a.size)),)
    if op == "stack":
        return tuple((arg, w[i]) for i, arg in enumerate(args))
    if op == "index":
        return ((args[0], _scatter(tape, w, node.aux, a.size)),)
    if op == "narrow":
        start, _stop = node.aux
        return ((args[0], embed(w, start, a.size)),)
    if op == "embed":
        start, _total = node.aux
        return ((args[0], narrow(w, start, start + a.size)),)
    if op == "expand":
        return ((args[0], vsum(w)),)
    if op == "scatter":
        i, _n = node.aux
        return ((args[0], w[i] if w.size > 1 else w),)
    if op == "matvec":
        mat, trans = node.aux
        return ((args[0], matvec(mat, w, not trans)),)
    raise AutodiffError(f"no backward rule for op {op!r}")


def _sweep(tape: Tape, seeds, targets, check=False):
    """One reverse pass. ``seeds`` maps node index -> adjoint Var.

    Returns the adjoint Var (or None) for each index in ``targets``. All
    adjoint arithmetic is recorded on the tape, so results are themselves
    differentiable.
    """
    target_set = set(targets)
    adj: dict[int, Var] = dict(seeds)
    saved: dict[int, Var] = {}
    top = max(adj) if adj else -1
    for idx in range(top, -1, -1):
        w = adj.pop(idx, None)
        if w is None:
            continue
        if check and not _is_finite(w.value):
            node = tape.nodes[idx]
            raise NonFiniteError(
                f"non-finite partial at node {idx} (op {node.op!r}, value {node.value!r})"
            )
        if idx in target_set:
            saved[idx] = w
        node = tape.nodes[idx]
        if node.op in ("leaf", "const"):
            continue
        for arg_idx, contrib in _contribs(tape, idx, node, w):
            prev = adj.get(arg_idx)
            adj[arg_idx] = contrib if prev is None else prev + contrib
    return [saved.get(t) for t in targets]


def _zero_like(x):
    return 0.0 if x.size == 1 else np.zeros(x.size)


def _check_inputs(tape, inputs):
    for x in inputs:
        if not isinstance(x, Var) or x.tape is not tape:
            raise AutodiffError("input is not recorded on this tape")


def grad_vars(output: Var, inputs) -> list[Var]:
    """Reverse sweep returning adjoints as Vars (differentiable).

    Inputs that the output does not depend on get a zero constant.
    """
    tape = output.tape
    _check_inputs(tape, inputs)
    if output.size != 1:
        raise AutodiffError("gradient output must be scalar")
    seed = tape.constant(1.0)
    adjs = _sweep(tape, {output.index: seed}, [x.index for x in inputs])
    return [a if a is not None else tape.constant(_zero_like(x)) for a, x in zip(adjs, inputs)]


def _finalize(tape, results, mode):
    values = [r.value for r in results]
    if not all(_is_finite(v) for v in values):
        # diagnostic pass: locate the first non-finite forward value, else
        # re-sweep with adjoint checking to name the node
        for i, node in enumerate(tape.nodes):
            if not _is_finite(node.value):
                raise NonFiniteError(
                    f"non-finite value at node {i} (op {node.op!r}) during {mode}"
                )
        raise NonFiniteError(f"non-finite partial during {mode}")
    return values


def grad(output: Var, inputs) -> list:
    """d(output)/d(inputs) by one reverse sweep; deterministic for a fixed tape."""
    tape = output.tape
    results = grad_vars(output, inputs)
    return _finalize(tape, results, "grad")


def vjp(outputs, weights, inputs) -> list:
    """weights^T . Jacobian(outputs; inputs) without materializing the Jacobian.

    ``weights`` is flat and is consumed per output in order: a scalar output
    takes one weight, a vector output takes a block of its length.
    """
    outputs = list(outputs)
    if not outputs:
        raise AutodiffError("vjp needs at least one output")
    tape = outputs[0].tape
    _check_inputs(tape, list(inputs) + outputs)
    weights = np.atleast_1d(np.asarray(weights, dtype=np.float64))
    total = sum(o.size for o in outputs)
    if weights.shape[0] != total:
        raise AutodiffError(f"weights length {weights.shape[0]} != total output size {total}")
    seeds: dict[int, Var] = {}
    pos = 0
    for o in outputs:
        w = weights[pos] if o.size == 1 else weights[pos:pos + o.size]
        pos += o.size
        seed = tape.constant(w)
        seeds[o.index] = seed if o.index not in seeds else seeds[o.index] + seed
    adjs = _sweep(tape, seeds, [x.index for x in inputs])
    results = [a if a is not None else tape.constant(_zero_like(x)) for a, x in zip(adjs, inputs)]
    return _finalize(tape, results, "vjp")


def hvp(loss_builder, at, v):
    """Hessian-vector product of a scalar loss at ``at``.

    ``loss_builder(tape, theta)`` must build the loss from the single leaf
    ``theta``. Computed as the gradient of (grad(loss) . v): reverse over
    reverse, symmetric in exact arithmetic.
    """
    at = np.asarray(at, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != at.shape:
        raise AutodiffError(f"v has shape {v.shape}, expected {at.shape}")
    tape = Tape(label="hvp")
    theta = tape.leaf(at)
    loss = loss_builder(tape, theta)
    if not isinstance(loss, Var) or loss.size != 1:
        raise AutodiffError("loss_builder must return a scalar Var")
    (g,) = grad_vars(loss, [theta])
    gv = dot(g, v)
    (h,) = grad_vars(gv, [theta])
    return np.asarray(_finalize(tape, [h], "hvp")[0])
