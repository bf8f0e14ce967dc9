"""Reverse-mode differentiation over a fixed primitive set.

Values flow eagerly through numpy while a tape records, in creation
order (hence already topologically sorted), the backward closures needed
for reverse sweep. The primitive set is exactly what the toy encoder and
both adapter families need: matmul, transpose, add, scalar-scale,
row-softmax, sum-over-rows, gelu/relu, layer-norm,
cross-entropy-with-logits, mse.

Frozen leaves never receive gradient accumulation; trainable leaves
always appear in the backward result (zeros if disconnected).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import sqrt, pi

import numpy as np
from scipy.special import erf

from .linalg import ShapeError, as_matrix, row_softmax as _row_softmax

__all__ = [
    "UnsupportedPrimitiveError",
    "Node",
    "Tape",
    "backward",
    "record_forward",
    "finite_diff_grad",
    "grad_check",
    "GradCheckReport",
    "save_gradcheck_csv",
]

LAYER_NORM_EPS = 1e-5
_INV_SQRT2 = 1.0 / sqrt(2.0)
_INV_SQRT_2PI = 1.0 / sqrt(2.0 * pi)


class UnsupportedPrimitiveError(ValueError):
    """Program used an op outside the supported primitive set."""

    def __init__(self, name: str):
        super().__init__(
            f"unsupported primitive {name!r}; supported: {', '.join(sorted(Tape.PRIMITIVES))}"
        )
        self.primitive = name


class Node:
    """One tape value: a float64 matrix plus backward bookkeeping."""

    __slots__ = ("value", "requires_grad", "grad", "vjps")

    def __init__(self, value: np.ndarray, requires_grad: bool = False):
        self.value = value
        self.requires_grad = requires_grad
        self.grad = None
        self.vjps = None  # list of (input Node, fn(upstream) -> contribution)

    @property
    def shape(self):
        return self.value.shape


def _identity_vjp(g):
    return g


class Tape:
    """Records a forward pass; single-threaded during record and backward."""

    PRIMITIVES = frozenset({
        "matmul", "transpose", "add", "scale", "row_softmax", "sum_rows",
        "gelu", "relu", "layer_norm", "cross_entropy", "mse",
    })

    def __init__(self, grad_enabled: bool = True):
        self.grad_enabled = grad_enabled
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.trainable: dict[str, bool] = {}

    # -- leaves ------------------------------------------------------------

    def constant(self, value) -> Node:
        return Node(as_matrix(value))

    def param(self, name: str, value, trainable: bool = True) -> Node:
        """Named leaf, memoized: repeated calls return the same node."""
        node = self.params.get(name)
        if node is not None:
            return node
        node = Node(as_matrix(value), requires_grad=trainable and self.grad_enabled)
        self.params[name] = node
        self.trainable[name] = trainable
        return node

    def _wrap(self, x) -> Node:
        return x if isinstance(x, Node) else self.constant(x)

    def _finish(self, value: np.ndarray, vjps: list) -> Node:
        if not vjps:
            return Node(value)
        out = Node(value, requires_grad=True)
        out.vjps = vjps
        self.nodes.append(out)
        return out

    def apply(self, primitive: str, *args, **kwargs) -> Node:
        """Dispatch by primitive name; unknown names are rejected at build time."""
        if primitive not in self.PRIMITIVES:
            raise UnsupportedPrimitiveError(primitive)
        return getattr(self, primitive)(*args, **kwargs)

    # -- primitives --------------------------------------------------------
    # Hot path: backward closures are only constructed when recording is on
    # and the input actually needs a gradient.

    def matmul(self, a, b) -> Node:
        if type(a) is not Node:
            a = self.constant(a)
        if type(b) is not Node:
            b = self.constant(b)
        av, bv = a.value, b.value
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul {av.shape} x {bv.shape}")
        value = av @ bv
        if not self.grad_enabled:
            return Node(value)
        vjps = []
        if a.requires_grad:
            vjps.append((a, lambda g: g @ bv.T))
        if b.requires_grad:
            vjps.append((b, lambda g: av.T @ g))
        return self._finish(value, vjps)

    def transpose(self, a) -> Node:
        a = self._wrap(a)
        if not (self.grad_enabled and a.requires_grad):
            return Node(a.value.T)
        return self._finish(a.value.T, [(a, lambda g: g.T)])

    def add(self, a, b) -> Node:
        if type(a) is not Node:
            a = self.constant(a)
        if type(b) is not Node:
            b = self.constant(b)
        if a.value.shape != b.value.shape:
            raise ShapeError(f"add {a.value.shape} vs {b.value.shape}")
        value = a.value + b.value
        if not self.grad_enabled:
            return Node(value)
        vjps = []
        if a.requires_grad:
            vjps.append((a, _identity_vjp))
        if b.requires_grad:
            vjps.append((b, _identity_vjp))
        return self._finish(value, vjps)

    def scale(self, a, s) -> Node:
        """Scalar multiply; ``s`` is a float or a 1x1 node (gradient flows to both)."""
        a = self._wrap(a)
        if isinstance(s, Node):
            if s.value.size != 1:
                raise ShapeError(f"scale factor must be 1x1, got {s.value.shape}")
            sv = s.value.reshape(1, 1)
            value = a.value * sv
            if not self.grad_enabled:
                return Node(value)
            vjps = []
            if a.requires_grad:
                vjps.append((a, lambda g: g * sv))
            if s.requires_grad:
                av = a.value
                vjps.append((s, lambda g: np.sum(g * av).reshape(1, 1)))
            return self._finish(value, vjps)
        c = float(s)
        value = a.value * c
        if not (self.grad_enabled and a.requires_grad):
            return Node(value)
        return self._finish(value, [(a, lambda g: g * c)])

    def row_softmax(self, a) -> Node:
        a = self._wrap(a)
        y = _row_softmax(a.value)
        if not (self.grad_enabled and a.requires_grad):
            return Node(y)

        def back(g):
            return y * (g - np.sum(g * y, axis=1, keepdims=True))

        return self._finish(y, [(a, back)])

    def sum_rows(self, a) -> Node:
        a = self._wrap(a)
        rows = a.value.shape[0]
        y = a.value.sum(axis=0, keepdims=True)
        if not (self.grad_enabled and a.requires_grad):
            return Node(y)
        return self._finish(y, [
            (a, lambda g: np.broadcast_to(g, (rows, g.shape[1]))),
        ])

    def gelu(self, a) -> Node:
        a = self._wrap(a)
        x = a.value
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        y = x * cdf
        if not (self.grad_enabled and a.requires_grad):
            return Node(y)

        def back(g):
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            return g * (cdf + x * pdf)

        return self._finish(y, [(a, back)])

    def relu(self, a) -> Node:
        a = self._wrap(a)
        x = a.value
        y = np.maximum(x, 0.0)
        if not (self.grad_enabled and a.requires_grad):
            return Node(y)
        return self._finish(y, [(a, lambda g: g * (x > 0.0))])

    def layer_norm(self, a, eps: float = LAYER_NORM_EPS) -> Node:
        """Row-wise normalization to mean 0, variance 1 (no affine part)."""
        a = self._wrap(a)
        x = a.value
        mean = x.mean(axis=1, keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv
        if not (self.grad_enabled and a.requires_grad):
            return Node(y)

        def back(g):
            gm = g.mean(axis=1, keepdims=True)
            gx = (g * xc).mean(axis=1, keepdims=True)
            return inv * (g - gm - xc * gx * inv * inv)

        return self._finish(y, [(a, back)])

    def cross_entropy(self, logits, labels) -> Node:
        """Mean over rows of logsumexp(row) - row[label]; scalar 1x1 output."""
        logits = self._wrap(logits)
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        z = logits.value
        if y.shape[0] != z.shape[0]:
            raise ShapeError(f"{y.shape[0]} labels for {z.shape[0]} logit rows")
        n = z.shape[0]
        m = np.max(z, axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.sum(np.exp(z - m), axis=1))
        picked = z[np.arange(n), y]
        loss = np.array([[np.mean(lse - picked)]])
        if not (self.grad_enabled and logits.requires_grad):
            return Node(loss)

        def back(g):
            p = np.exp(z - m)
            p /= np.sum(p, axis=1, keepdims=True)
            p[np.arange(n), y] -= 1.0
            return p * (g.reshape(()) / n)

        return self._finish(loss, [(logits, back)])

    def mse(self, a, b) -> Node:
        a, b = self._wrap(a), self._wrap(b)
        if a.value.shape != b.value.shape:
            raise ShapeError(f"mse {a.value.shape} vs {b.value.shape}")
        diff = a.value - b.value
        size = diff.size
        loss = np.array([[np.mean(diff * diff)]])
        if not self.grad_enabled:
            return Node(loss)
        vjps = []
        if a.requires_grad:
            vjps.append((a, lambda g: diff * (2.0 * g.reshape(()) / size)))
        if b.requires_grad:
            vjps.append((b, lambda g: diff * (-2.0 * g.reshape(()) / size)))
        return self._finish(loss, vjps)


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every trainable leaf on the tape."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar-valued, got shape {loss.value.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None or node.vjps is None:
            continue
        for inp, fn in node.vjps:
            contrib = fn(g)
            cur = inp.grad
            inp.grad = contrib if cur is None else cur + contrib
    grads = {}
    for name, node in tape.params.items():
        if not tape.trainable[name]:
            continue
        grads[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        node.grad = None
    return grads


def record_forward(program, inputs) -> tuple[Tape, object]:
    """Run ``program(tape, inputs)`` on a fresh recording tape."""
    tape = Tape(grad_enabled=True)
    outputs = program(tape, inputs)
    return tape, outputs


def evaluate(program, inputs) -> object:
    """Tape-free evaluation: same code path with recording disabled."""
    return program(Tape(grad_enabled=False), inputs)


def finite_diff_grad(program, params: dict[str, np.ndarray], eps: float = 1e-5,
                     ) -> dict[str, np.ndarray]:
    """Central-difference gradients, one entry at a time.

    ``program(tape, params) -> scalar node``; this is the oracle the tape
    is checked against, so it never touches backward().
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def value_at(p):
        out = evaluate(program, p)
        return float(np.asarray(out.value).reshape(-1)[0])

    grads = {}
    for name in params:
        base = as_matrix(params[name]).copy()
        g = np.zeros_like(base)
        work = dict(params)
        for idx in np.ndindex(base.shape):
            bumped = base.copy()
            bumped[idx] = base[idx] + eps
            work[name] = bumped
            f_plus = value_at(work)
            bumped[idx] = base[idx] - eps
            f_minus = value_at(work)
            g[idx] = (f_plus - f_minus) / (2.0 * eps)
        grads[name] = g
    return grads


@dataclass
class GradCheckReport:
    """Per-parameter worst-case errors from an analytic-vs-numeric compare."""

    rows: list  # (name, max_rel_err, max_abs_err, passed)
    rel_tol: float
    abs_tol: float

    @property
    def passed(self) -> bool:
        return all(r[3] for r in self.rows)

    def worst(self):
        """(name, max_rel_err) of the least accurate parameter."""
        name, rel, _, _ = max(self.rows, key=lambda r: r[1])
        return name, rel


def grad_check(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray],
               rel_tol: float = 1e-4, abs_tol: float = 1e-6) -> GradCheckReport:
    """Entrywise |a-n| <= abs_tol + rel_tol*max(|a|,|n|), reported per parameter."""
    if set(analytic) != set(numeric):
        raise ValueError(
            f"parameter name mismatch: {sorted(set(analytic) ^ set(numeric))}")
    rows = []
    for name in sorted(analytic):
        a = as_matrix(analytic[name])
        n = as_matrix(numeric[name])
        if a.shape != n.shape:
            raise ValueError(f"shape mismatch for {name}: {a.shape} vs {n.shape}")
        diff = np.abs(a - n)
        mag = np.maximum(np.abs(a), np.abs(n))
        ok = bool(np.all(diff <= abs_tol + rel_tol * mag))
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.where(mag > 0, diff / mag, 0.0)
        max_rel = float(np.max(rel)) if rel.size else 0.0
        max_abs = float(np.max(diff)) if diff.size else 0.0
        rows.append((name, max_rel, max_abs, ok))
    return GradCheckReport(rows, rel_tol, abs_tol)


def save_gradcheck_csv(path, report: GradCheckReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for name, max_rel, max_abs, ok in report.rows:
            w.writerow([name, f"{max_rel:.17g}", f"{max_abs:.17g}", str(ok).lower()])
