"""Reverse-mode gradient engine over dense 2-D float64 matrices.

Define-by-run: values are computed eagerly and every interior node records
its backward rule on the active :class:`Tape`. Leaf nodes (parameters) live
outside tapes and carry persistent gradient buffers, so calling
:func:`backward` repeatedly without :func:`zero_grads` accumulates, which is
what gradient accumulation over several turns relies on.

No broadcasting except :func:`scalar_scale`; bias rows and row selections are
expressed through matmuls with constant matrices (see :func:`affine`,
:func:`select_rows`).
"""

from __future__ import annotations

import json
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

_ACTIVE_TAPE = None


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"matrices must be 2-D, got shape {arr.shape}")
    return arr


class Node:
    __slots__ = ("value", "grad", "requires_grad", "_backward", "name")

    def __init__(self, value, requires_grad=False, name=None, _backward=None):
        self.value = _as_matrix(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or ("leaf" if self._backward is None else "op")
        return f"Node({tag}, shape={self.value.shape})"


def leaf(value, name=None) -> Node:
    """A trainable parameter node; its values must be finite."""
    node = Node(value, requires_grad=True, name=name)
    if not np.all(np.isfinite(node.value)):
        raise NumericError(f"non-finite values in leaf {name!r}")
    return node


def constant(value) -> Node:
    return Node(value, requires_grad=False)


class Tape:
    """Topologically ordered record of one forward computation.

    Creation order is topological because inputs exist before outputs.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


def ensure_tape():
    """The active tape, or a fresh one when none is open.

    Lets graph-building code run standalone (decode: values only) and inside
    a caller's tape (training: gradients flow to the caller's backward).
    """
    return nullcontext(_ACTIVE_TAPE) if _ACTIVE_TAPE is not None else Tape()


def _record(value, parents, backward_rule, name=None) -> Node:
    if _ACTIVE_TAPE is None:
        raise RuntimeError("no active Tape; wrap the computation in `with Tape():`")
    requires = any(p.requires_grad for p in parents)
    node = Node(value, requires_grad=requires, name=name,
                _backward=backward_rule if requires else (lambda g, acc: None))
    _ACTIVE_TAPE.nodes.append(node)
    return node


def backward(tape: Tape, loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.value.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.value.shape}")
    local: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}

    def acc(parent: Node, contribution: np.ndarray):
        if not parent.requires_grad:
            return
        if parent._backward is None:  # leaf: persistent buffer
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += contribution
        else:
            key = id(parent)
            if key in local:
                local[key] = local[key] + contribution
            else:
                local[key] = np.array(contribution, dtype=np.float64, copy=True)

    if loss._backward is None:
        acc(loss, np.ones((1, 1)))
        return
    for node in reversed(tape.nodes):
        g = local.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        node._backward(g, acc)


def zero_grads(nodes) -> None:
    for node in nodes:
        node.zero_grad()


# ---------------------------------------------------------------------------
# Forward operations
# ---------------------------------------------------------------------------


def _want_shape(op, a, b, same=True):
    if same and a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value

    def rule(g, acc):
        acc(a, g @ bv.T)
        acc(b, av.T @ g)

    return _record(av @ bv, (a, b), rule, "matmul")


def add(a: Node, b: Node) -> Node:
    _want_shape("add", a, b)

    def rule(g, acc):
        acc(a, g)
        acc(b, g)

    return _record(a.value + b.value, (a, b), rule, "add")


def subtract(a: Node, b: Node) -> Node:
    _want_shape("subtract", a, b)

    def rule(g, acc):
        acc(a, g)
        acc(b, -g)

    return _record(a.value - b.value, (a, b), rule, "subtract")


def elementwise_multiply(a: Node, b: Node) -> Node:
    _want_shape("elementwise_multiply", a, b)
    av, bv = a.value, b.value

    def rule(g, acc):
        acc(a, g * bv)
        acc(b, g * av)

    return _record(av * bv, (a, b), rule, "elementwise_multiply")


def concat_columns(*nodes: Node) -> Node:
    if not nodes:
        raise ShapeError("concat_columns needs at least one input")
    rows = nodes[0].value.shape[0]
    for n in nodes:
        if n.value.shape[0] != rows:
            raise ShapeError(
                f"concat_columns: row counts differ "
                f"({[n.value.shape for n in nodes]})"
            )
    widths = [n.value.shape[1] for n in nodes]
    offsets = np.cumsum([0] + widths)

    def rule(g, acc):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            acc(n, g[:, lo:hi])

    return _record(np.concatenate([n.value for n in nodes], axis=1),
                   nodes, rule, "concat_columns")


def softmax_rows(a: Node) -> Node:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def rule(g, acc):
        acc(a, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _record(y, (a,), rule, "softmax_rows")


def sigmoid(a: Node) -> Node:
    # Piecewise form avoids overflow: 1/(1+e^-v) for v>=0, e^v/(1+e^v) else.
    v = a.value
    pos = 1.0 / (1.0 + np.exp(-np.where(v >= 0, v, 0.0)))
    ev = np.exp(np.where(v < 0, v, 0.0))
    s = np.where(v >= 0, pos, ev / (1.0 + ev))

    def rule(g, acc):
        acc(a, g * s * (1.0 - s))

    return _record(s, (a,), rule, "sigmoid")


def log(a: Node) -> Node:
    v = a.value

    def rule(g, acc):
        acc(a, g / v)

    return _record(np.log(v), (a,), rule, "log")


def scalar_scale(a: Node, c: float) -> Node:
    c = float(c)

    def rule(g, acc):
        acc(a, g * c)

    return _record(a.value * c, (a,), rule, "scalar_scale")


def sum(a: Node) -> Node:  # noqa: A001 - deliberate op name
    shape = a.value.shape

    def rule(g, acc):
        acc(a, np.full(shape, g[0, 0]))

    return _record([[a.value.sum()]], (a,), rule, "sum")


def mean(a: Node) -> Node:
    shape = a.value.shape
    size = shape[0] * shape[1]

    def rule(g, acc):
        acc(a, np.full(shape, g[0, 0] / size))

    return _record([[a.value.mean()]], (a,), rule, "mean")


def transpose(a: Node) -> Node:
    def rule(g, acc):
        acc(a, g.T)

    return _record(a.value.T, (a,), rule, "transpose")


# ---------------------------------------------------------------------------
# Compositions used by the model (no new backward rules)
# ---------------------------------------------------------------------------


def negate(a: Node) -> Node:
    return scalar_scale(a, -1.0)


def tanh(a: Node) -> Node:
    # tanh(x) = 2*sigmoid(2x) - 1
    two_sig = scalar_scale(sigmoid(scalar_scale(a, 2.0)), 2.0)
    return subtract(two_sig, constant(np.ones(a.value.shape)))


def concat_rows(*nodes: Node) -> Node:
    if len(nodes) == 1:
        return nodes[0]
    return transpose(concat_columns(*[transpose(n) for n in nodes]))


def affine(x: Node, w: Node, bias: Node) -> Node:
    """x @ w + bias, with the 1-row bias repeated via a constant ones column."""
    ones_col = constant(np.ones((x.value.shape[0], 1)))
    return add(matmul(x, w), matmul(ones_col, bias))


def select_rows(x: Node, indices) -> Node:
    """Gather rows by index through a constant one-hot matmul."""
    indices = list(indices)
    sel = np.zeros((len(indices), x.value.shape[0]))
    sel[np.arange(len(indices)), indices] = 1.0
    return matmul(constant(sel), x)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def ok(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in sorted(self.errors.items())]
        lines.append(f"max {self.max_error:.3e} (tolerance {self.tolerance:.1e})")
        return "\n".join(lines)


def grad_check(builder, params: dict[str, Node], step: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``builder(params)`` to central differences.

    ``builder`` must be deterministic; it is re-run twice per parameter entry.
    """
    if step <= 0:
        raise ValueError("step must be positive")

    def run():
        with Tape() as tape:
            loss = builder(params)
        value = float(loss.value[0, 0])
        if not np.isfinite(value):
            raise NumericError("builder produced a non-finite loss")
        return value, tape, loss

    zero_grads(params.values())
    _, tape, loss = run()
    backward(tape, loss)
    analytic = {
        name: (np.zeros_like(p.value) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    errors = {}
    for name, p in params.items():
        worst = 0.0
        flat = p.value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up, _, _ = run()
            flat[idx] = orig - step
            down, _, _ = run()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * step)
            a = analytic[name].reshape(-1)[idx]
            denom = max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, abs(a - numeric) / denom)
        errors[name] = worst
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------------------
# Parameter checkpoint format
# ---------------------------------------------------------------------------

PARAMS_FORMAT_VERSION = 1


def params_to_dict(params: dict) -> dict:
    """Serializable map: block name -> shape + row-major values."""
    out = {}
    for name in sorted(params):
        arr = params[name].value if isinstance(params[name], Node) else params[name]
        arr = _as_matrix(arr)
        out[name] = {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
    return {"format_version": PARAMS_FORMAT_VERSION, "params": out}


def params_from_dict(obj: dict) -> dict[str, np.ndarray]:
    if obj.get("format_version") != PARAMS_FORMAT_VERSION:
        raise NumericError(
            f"unsupported checkpoint format_version: {obj.get('format_version')}"
        )
    out = {}
    for name, block in obj["params"].items():
        rows, cols = block["shape"]
        out[name] = np.array(block["values"], dtype=np.float64).reshape(rows, cols)
    return out


def save_params(params: dict, fh) -> None:
    json.dump(params_to_dict(params), fh, sort_keys=True)


def load_params(fh) -> dict[str, np.ndarray]:
    return params_from_dict(json.load(fh))
