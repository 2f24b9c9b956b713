"""Dense float64 arrays, deterministic RNG streams, a reverse-mode tape, and AdamW.

Everything numeric in this package runs through here. Arrays are plain
2-D C-contiguous float64 ``numpy.ndarray`` (the ``DenseMatrix``
representation); the tape records primitive ops define-by-run and is
rebuilt every training step. All kernels are single-threaded numpy calls
with a fixed reduction order, so results are bitwise reproducible for
identical inputs.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

# A DenseMatrix is a 2-D C-contiguous float64 ndarray; ParamSet maps
# parameter names to such arrays (vectors stored as (1, n)).
DenseMatrix = np.ndarray
ParamSet = dict


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


def matrix(rows: int, cols: int, data: Iterable[float]) -> DenseMatrix:
    """Build a DenseMatrix from row-major data, validating the length."""
    a = np.asarray(list(data), dtype=np.float64)
    if a.size != rows * cols:
        raise ShapeError(f"expected {rows * cols} entries, got {a.size}")
    return np.ascontiguousarray(a.reshape(rows, cols))


def as_matrix(data) -> DenseMatrix:
    """Coerce to a 2-D C-contiguous float64 array; 1-D input becomes a row."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected 1-D or 2-D data, got ndim={a.ndim}")
    return np.ascontiguousarray(a)


def require_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name} contains non-finite entries")
    return a


# ---------------------------------------------------------------------------
# Seeded RNG streams
# ---------------------------------------------------------------------------


class SeededRng:
    """Named, independent RNG streams derived from one master seed.

    Streams are Philox counter-based generators keyed by
    ``(seed, crc32(label))``, so adding or reordering consumers of one
    stream never perturbs another. Calling :meth:`stream` twice with the
    same label returns a fresh generator positioned at the stream head.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**63:
            raise ContractError(f"seed must be a nonnegative 63-bit int, got {seed}")
        self.seed = int(seed)

    def stream(self, label: str) -> np.random.Generator:
        key = np.array([self.seed, zlib.crc32(label.encode("utf-8"))], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------

# A vjp maps the adjoint of a node's output to adjoints of its parents.
Vjp = Callable[[np.ndarray], tuple[np.ndarray, ...]]


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    vjp: Vjp | None
    requires_grad: bool


class Var:
    """Handle to a tape node; supports the arithmetic the models need."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __matmul__(self, other: "Var") -> "Var":
        return matmul(self, other)

    def __add__(self, other) -> "Var":
        return add(self, other)

    def __radd__(self, other) -> "Var":
        return add(self, other)

    def __sub__(self, other) -> "Var":
        return sub(self, other)

    def __mul__(self, other) -> "Var":
        return mul(self, other)

    def __rmul__(self, other) -> "Var":
        return mul(self, other)

    def __neg__(self) -> "Var":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        node = self.tape.nodes[self.nid]
        return f"Var(nid={self.nid}, op={node.op!r}, shape={node.value.shape})"


class Tape:
    """Append-only record of primitive ops; node ids are topologically ordered."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, op: str, parents: tuple[int, ...], value: np.ndarray,
                vjp: Vjp | None, requires_grad: bool) -> Var:
        self.nodes.append(Node(op, parents, value, vjp, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str = "leaf") -> Var:
        """Register a differentiable input (a parameter)."""
        return self._record(name, (), as_matrix(value), None, True)

    def const(self, value) -> Var:
        """Register a non-differentiable input (data, fixed weights)."""
        return self._record("const", (), as_matrix(value), None, False)


def _tape_of(*vars_: Var) -> Tape:
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise ContractError("operands recorded on different tapes")
    return tape


def matmul(a, b):
    """Matrix product. On Vars, records the op; on arrays, plain kernel."""
    if isinstance(a, Var):
        tape = _tape_of(a, b)
        av, bv = a.value, b.value
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul {av.shape} x {bv.shape}")
        out = av @ bv

        def vjp(g: np.ndarray):
            return g @ bv.T, av.T @ g

        return tape._record("matmul", (a.nid, b.nid), out, vjp, True)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} x {b.shape}")
    return a @ b


def add(a: Var, b) -> Var:
    """a + b where b is a Var of equal shape, a (1, c) row bias, or a scalar."""
    if not isinstance(b, Var):
        tape = a.tape
        out = a.value + float(b)
        return tape._record("add_const", (a.nid,), out, lambda g: (g,), True)
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        return tape._record("add", (a.nid, b.nid), av + bv, lambda g: (g, g), True)
    if bv.shape == (1, av.shape[1]):
        def vjp(g: np.ndarray):
            return g, g.sum(axis=0, keepdims=True)

        return tape._record("add_bias", (a.nid, b.nid), av + bv, vjp, True)
    raise ShapeError(f"add {av.shape} + {bv.shape}")


def sub(a: Var, b) -> Var:
    if not isinstance(b, Var):
        return add(a, -float(b))
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError(f"sub {av.shape} - {bv.shape}")
    return tape._record("sub", (a.nid, b.nid), av - bv, lambda g: (g, -g), True)


def mul(a: Var, b) -> Var:
    """Elementwise product (equal shapes) or scalar scaling."""
    if not isinstance(b, Var):
        return scale(a, float(b))
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError(f"mul {av.shape} * {bv.shape}")
    return tape._record("mul", (a.nid, b.nid), av * bv, lambda g: (g * bv, g * av), True)


def scale(a: Var, s: float) -> Var:
    s = float(s)
    return a.tape._record("scale", (a.nid,), a.value * s, lambda g: (g * s,), True)


def tanh(x):
    if isinstance(x, Var):
        out = np.tanh(x.value)
        return x.tape._record("tanh", (x.nid,), out, lambda g: (g * (1.0 - out * out),), True)
    return np.tanh(x)


def exp(x):
    if isinstance(x, Var):
        out = np.exp(x.value)
        return x.tape._record("exp", (x.nid,), out, lambda g: (g * out,), True)
    return np.exp(x)


def ssum(x: Var) -> Var:
    """Sum of all entries, as a (1, 1) scalar node."""
    out = np.array([[x.value.sum()]])
    ones = np.ones_like(x.value)
    return x.tape._record("sum", (x.nid,), out, lambda g: (g[0, 0] * ones,), True)


def smean(x: Var) -> Var:
    n = x.value.size
    return scale(ssum(x), 1.0 / n)


def smooth_l1(x):
    """Elementwise smooth-L1 (huber, beta=1): 0.5 x^2 inside, |x| - 0.5 outside."""
    def _fwd(v: np.ndarray) -> np.ndarray:
        a = np.abs(v)
        return np.where(a <= 1.0, 0.5 * v * v, a - 0.5)

    if isinstance(x, Var):
        v = x.value
        out = _fwd(v)

        def vjp(g: np.ndarray):
            return (g * np.where(np.abs(v) <= 1.0, v, np.sign(v)),)

        return x.tape._record("smooth_l1", (x.nid,), out, vjp, True)
    return _fwd(x)


def pairwise_sqdist(a, b):
    """Pairwise squared Euclidean distances between rows of a (n,d) and b (m,d)."""
    if isinstance(a, Var):
        tape = _tape_of(a, b)
        av, bv = a.value, b.value
        if av.shape[1] != bv.shape[1]:
            raise ShapeError(f"pairwise_sqdist dims {av.shape} vs {bv.shape}")
        out = _sqdist_values(av, bv)

        def vjp(g: np.ndarray):
            # d D_ij / d a_i = 2 (a_i - b_j); accumulate with weights g_ij
            ga = 2.0 * (av * g.sum(axis=1, keepdims=True) - g @ bv)
            gb = 2.0 * (bv * g.sum(axis=0)[:, None] - g.T @ av)
            return ga, gb

        return tape._record("pairwise_sqdist", (a.nid, b.nid), out, vjp, True)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sqdist dims {a.shape} vs {b.shape}")
    return _sqdist_values(a, b)


def _sqdist_values(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def backward(tape: Tape, root: Var) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar root; returns adjoints of differentiable leaves.

    Visits nodes exactly once in reverse id order; adjoints of nodes not
    reachable from the root stay zero.
    """
    if root.tape is not tape:
        raise ContractError("root recorded on a different tape")
    if root.value.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.value.shape}")
    adjoints: list[np.ndarray | None] = [None] * len(tape.nodes)
    adjoints[root.nid] = np.ones_like(tape.nodes[root.nid].value)
    for nid in range(root.nid, -1, -1):
        g = adjoints[nid]
        node = tape.nodes[nid]
        if g is None or node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if not tape.nodes[pid].requires_grad and not tape.nodes[pid].parents:
                continue
            if adjoints[pid] is None:
                adjoints[pid] = pg.copy()
            else:
                adjoints[pid] += pg
    grads: dict[int, np.ndarray] = {}
    for nid, node in enumerate(tape.nodes):
        if node.requires_grad and not node.parents:
            g = adjoints[nid]
            grads[nid] = np.zeros_like(node.value) if g is None else g
    return grads


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    """First/second moment buffers and the step counter, keyed like the params."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @staticmethod
    def init(params: Mapping[str, np.ndarray]) -> "AdamWState":
        return AdamWState(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One decoupled-weight-decay Adam update with bias-corrected moments."""
    b1, b2 = betas
    t = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {k!r}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[k] = p - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)
        new_m[k] = m
        new_v[k] = v
    return new_params, AdamWState(m=new_m, v=new_v, step=t)
