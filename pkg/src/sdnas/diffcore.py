"""Minimal dense-tensor reverse-mode differentiation engine.

Everything is numpy-backed, double precision by default, and define-by-run:
a :class:`Tape` is rebuilt on every forward pass, ops record themselves onto
the innermost active tape whenever a tracked tensor is involved, and
``Tape.gradients`` walks the node list in reverse exactly once.

The op set is deliberately small: the dense primitives the mixed-operation
supernet and its losses need, nothing else. No GPU, no convolutions, no
broadcasting beyond the documented scalar / bias cases.
"""
from __future__ import annotations

import hashlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "RngState",
    "derive_seed",
    "draw",
    "forward_primitive",
    "backward",
    "gradient_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "div",
    "relu",
    "tanh",
    "abs_",
    "sqrt_",
    "log",
    "clamp_min",
    "softmax_lastdim",
    "sum_",
    "mean_",
    "rowsum",
    "row",
    "at",
    "cross_entropy",
]


class ShapeError(ValueError):
    """Raised when operands do not conform to a primitive's shape rule."""


# ---------------------------------------------------------------------------
# tensors and tapes
# ---------------------------------------------------------------------------


class Tensor:
    """A dense array plus a flag marking it as a trainable leaf.

    ``requires_grad`` tensors are parameters: the first op that consumes one
    under an active tape registers it as a leaf node of that tape.  Op outputs
    carry ``_tape``/``_nid`` instead; they are tracked only on the tape that
    produced them and act as constants anywhere else.
    """

    __slots__ = ("data", "requires_grad", "_tape", "_nid")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self._tape = None
        self._nid = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "bwd")

    def __init__(self, op: str, inputs: tuple[int, ...], bwd):
        self.op = op
        self.inputs = inputs
        self.bwd = bwd


_ACTIVE: list["Tape"] = []


class Tape:
    """Append-only record of one forward pass.

    Nodes are stored in execution order, which for define-by-run is already a
    topological order, so the backward sweep is a single reverse scan.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_nid: dict[int, int] = {}
        self._leaf_of: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    # -- recording -----------------------------------------------------

    def _leaf(self, t: Tensor) -> int:
        nid = self._leaf_nid.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(_Node("leaf", (), None))
            self._leaf_nid[id(t)] = nid
            self._leaf_of[nid] = t
        return nid

    def _nid_of(self, t: Tensor) -> int:
        if t._tape is self:
            return t._nid
        if t.requires_grad:
            return self._leaf(t)
        return -1

    def _push(self, op: str, inputs: tuple[int, ...], bwd) -> int:
        nid = len(self.nodes)
        self.nodes.append(_Node(op, inputs, bwd))
        return nid

    # -- backward ------------------------------------------------------

    def gradients(self, loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
        """Chain-rule gradients of a scalar ``loss`` w.r.t. ``params``.

        Parameters that never touched this tape come back as zeros.  The walk
        is pure: calling it twice gives bit-identical results.
        """
        if loss._tape is not self:
            raise ValueError("backward: loss tensor was not produced on this tape")
        if loss.data.shape != ():
            raise ValueError(
                f"backward: output must be scalar, got shape {loss.data.shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss._nid] = np.ones((), dtype=loss.data.dtype)
        for nid in range(loss._nid, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.bwd is None:
                continue
            for inp, gin in zip(node.inputs, node.bwd(g)):
                if inp < 0 or gin is None:
                    continue
                if grads[inp] is None:
                    grads[inp] = gin
                else:
                    grads[inp] = grads[inp] + gin
        out: dict[Tensor, np.ndarray] = {}
        for p in params:
            nid = self._leaf_nid.get(id(p))
            g = grads[nid] if nid is not None else None
            out[p] = np.zeros_like(p.data) if g is None else np.asarray(g)
        return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Function form of :meth:`Tape.gradients`."""
    return tape.gradients(loss, params)


def _active_tape(*tensors: Tensor) -> Tape | None:
    if not _ACTIVE:
        return None
    tape = _ACTIVE[-1]
    for t in tensors:
        if isinstance(t, Tensor) and (t.requires_grad or t._tape is tape):
            return tape
    return None


def _emit(out_data: np.ndarray, op: str, tape: Tape | None, srcs: Sequence[Tensor], bwd) -> Tensor:
    out = object.__new__(Tensor)  # hot path: out_data is always a float ndarray
    out.data = out_data
    out.requires_grad = False
    out._tape = None
    out._nid = -1
    if tape is not None:
        ids = tuple(tape._nid_of(s) for s in srcs)
        out._nid = tape._push(op, ids, bwd)
        out._tape = tape
    return out


def _shape_fail(op: str, a, b=None) -> ShapeError:
    if b is None:
        return ShapeError(f"{op}: invalid input shape {tuple(np.shape(a))}")
    return ShapeError(
        f"{op}: incompatible shapes {tuple(np.shape(a))} and {tuple(np.shape(b))}"
    )


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``(n,k) @ (k,m)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise _shape_fail("matmul", a.data, b.data)
    tape = _active_tape(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, "matmul", tape, (a, b), bwd)


def _addsub(op: str, a: Tensor, b, sign: float) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    b = _as_tensor(b)
    ad, bd = a.data, b.data
    if bd.shape == ad.shape:
        mode = "same"
    elif bd.shape == () or bd.shape == (1,):
        mode = "scalar"
    elif ad.ndim == 2 and bd.shape == (ad.shape[1],):
        mode = "bias"
    else:
        raise _shape_fail(op, ad, bd)
    tape = _active_tape(a, b)

    def bwd(g):
        ga = g
        if mode == "same":
            gb = sign * g
        elif mode == "scalar":
            gb = sign * np.sum(g).reshape(bd.shape)
        else:
            gb = sign * np.sum(g, axis=0)
        return ga, gb

    return _emit(ad + sign * bd, op, tape, (a, b), bwd)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum.  ``b`` may share ``a``'s shape, be a scalar, or be a
    bias vector matching the last dim of a 2-D ``a``."""
    return _addsub("add", a, b, 1.0)


def sub(a: Tensor, b) -> Tensor:
    """Elementwise difference, same shape rules as :func:`add`."""
    return _addsub("sub", a, b, -1.0)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; either operand may be a 0-d scalar tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if not (ad.shape == bd.shape or ad.shape == () or bd.shape == ()):
        raise _shape_fail("mul", ad, bd)
    tape = _active_tape(a, b)

    def bwd(g):
        ga = g * bd
        gb = g * ad
        if ad.shape == () and bd.shape != ():
            ga = np.sum(ga).reshape(())
        if bd.shape == () and ad.shape != ():
            gb = np.sum(gb).reshape(())
        return ga, gb

    return _emit(ad * bd, "mul", tape, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python-float constant."""
    x = _as_tensor(x)
    c = float(c)
    tape = _active_tape(x)
    return _emit(x.data * c, "scale", tape, (x,), lambda g: (g * c,))


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient of same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise _shape_fail("div", ad, bd)
    tape = _active_tape(a, b)

    def bwd(g):
        return g / bd, -g * ad / (bd * bd)

    return _emit(ad / bd, "div", tape, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    tape = _active_tape(x)
    xd = x.data
    return _emit(np.maximum(xd, 0.0), "relu", tape, (x,), lambda g: (g * (xd > 0),))


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    tape = _active_tape(x)
    y = np.tanh(x.data)
    return _emit(y, "tanh", tape, (x,), lambda g: (g * (1.0 - y * y),))


def abs_(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    tape = _active_tape(x)
    xd = x.data
    return _emit(np.abs(xd), "abs", tape, (x,), lambda g: (g * np.sign(xd),))


def sqrt_(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative input")
    tape = _active_tape(x)
    y = np.sqrt(x.data)
    return _emit(y, "sqrt", tape, (x,), lambda g: (g / (2.0 * y),))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    tape = _active_tape(x)
    xd = x.data
    return _emit(np.log(xd), "log", tape, (x,), lambda g: (g / xd,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    x = _as_tensor(x)
    floor = float(floor)
    tape = _active_tape(x)
    xd = x.data
    return _emit(
        np.maximum(xd, floor), "clamp_min", tape, (x,), lambda g: (g * (xd > floor),)
    )


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-wise softmax over the last dim of a 1-D or 2-D tensor."""
    x = _as_tensor(x)
    if x.data.ndim not in (1, 2):
        raise _shape_fail("softmax_lastdim", x.data)
    tape = _active_tape(x)
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g):
        gy = g * y
        return (gy - y * np.sum(gy, axis=-1, keepdims=True),)

    return _emit(y, "softmax_lastdim", tape, (x,), bwd)


def sum_(x: Tensor) -> Tensor:
    """Full reduction to a scalar."""
    x = _as_tensor(x)
    tape = _active_tape(x)
    shape = x.data.shape
    dt = x.data.dtype
    return _emit(
        np.sum(x.data).reshape(()),
        "sum",
        tape,
        (x,),
        lambda g: (np.broadcast_to(g, shape).astype(dt, copy=False),),
    )


def mean_(x: Tensor) -> Tensor:
    """Full mean reduction to a scalar."""
    x = _as_tensor(x)
    tape = _active_tape(x)
    shape = x.data.shape
    n = float(x.data.size)
    dt = x.data.dtype
    return _emit(
        np.mean(x.data).reshape(()),
        "mean",
        tape,
        (x,),
        lambda g: (np.broadcast_to(g / n, shape).astype(dt, copy=False),),
    )


def rowsum(x: Tensor) -> Tensor:
    """Sum over the last dim of a 2-D tensor, yielding one value per row."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise _shape_fail("rowsum", x.data)
    tape = _active_tape(x)
    d = x.data.shape[1]

    def bwd(g):
        return (np.repeat(g[:, None], d, axis=1),)

    return _emit(np.sum(x.data, axis=1), "rowsum", tape, (x,), bwd)


def row(x: Tensor, i: int) -> Tensor:
    """Extract row ``i`` of a 2-D tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise _shape_fail("row", x.data)
    i = int(i)
    if not 0 <= i < x.data.shape[0]:
        raise IndexError(f"row: index {i} out of range for shape {x.data.shape}")
    tape = _active_tape(x)
    shape = x.data.shape
    dt = x.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dt)
        full[i] = g
        return (full,)

    return _emit(x.data[i].copy(), "row", tape, (x,), bwd)


def at(x: Tensor, i: int) -> Tensor:
    """Extract element ``i`` of a 1-D tensor as a 0-d scalar."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise _shape_fail("at", x.data)
    i = int(i)
    if not 0 <= i < x.data.shape[0]:
        raise IndexError(f"at: index {i} out of range for shape {x.data.shape}")
    tape = _active_tape(x)
    shape = x.data.shape
    dt = x.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dt)
        full[i] = g
        return (full,)

    return _emit(x.data[i].reshape(()), "at", tape, (x,), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Fuses log-softmax and NLL so large logits cannot overflow.
    """
    logits = _as_tensor(logits)
    lab = np.asarray(labels)
    if logits.data.ndim != 2 or lab.ndim != 1 or lab.shape[0] != logits.data.shape[0]:
        raise _shape_fail("cross_entropy", logits.data, lab)
    if lab.size and (lab.min() < 0 or lab.max() >= logits.data.shape[1]):
        raise ValueError("cross_entropy: label out of range")
    tape = _active_tape(logits)
    z = logits.data
    n = z.shape[0]
    m = np.max(z, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(z - m), axis=1))
    picked = z[np.arange(n), lab]
    loss = np.mean(lse - picked).reshape(())

    def bwd(g):
        p = np.exp(z - m)
        p /= np.sum(p, axis=1, keepdims=True)
        p[np.arange(n), lab] -= 1.0
        return (p * (g / n),)

    return _emit(loss, "cross_entropy", tape, (logits,), bwd)


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "div": div,
    "relu": relu,
    "tanh": tanh,
    "abs": abs_,
    "sqrt": sqrt_,
    "log": log,
    "clamp_min": clamp_min,
    "softmax_lastdim": softmax_lastdim,
    "sum": sum_,
    "mean": mean_,
    "rowsum": rowsum,
    "row": row,
    "at": at,
    "cross_entropy": cross_entropy,
}


def forward_primitive(op: str, *inputs) -> Tensor:
    """Apply a primitive by name; the tape records it when any input is tracked."""
    fn = _PRIMITIVES.get(op)
    if fn is None:
        raise ValueError(f"unknown primitive {op!r}")
    return fn(*inputs)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter values
    on each call; entries are perturbed in place one at a time.  The error for
    an entry is |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError("gradient_check: step must be positive")
    with Tape() as tape:
        loss = loss_fn()
    analytic = tape.gradients(loss, params)
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        an = analytic[p].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = float(loss_fn().data)
            flat[i] = orig - step
            lm = float(loss_fn().data)
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise ValueError(
                    f"gradient_check: non-finite loss at parameter {pi}, entry {i}"
                )
            numeric = (lp - lm) / (2.0 * step)
            err = abs(an[i] - numeric) / max(1.0, abs(an[i]))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# deterministic RNG (splitmix64)
# ---------------------------------------------------------------------------

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_INV53 = 1.0 / float(1 << 53)


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def derive_seed(*parts) -> int:
    """Stable 64-bit seed derived from arbitrary labelled parts.

    Hash-based, so independent streams (per epoch, per split, per genotype)
    can be derived statelessly and reproduce across platforms.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


class RngState:
    """splitmix64 stream: identical seed, identical draws, any platform."""

    algorithm = "splitmix64"

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = (np.arange(1, n + 1, dtype=np.uint64)) * _GOLDEN
            states = self._state + steps
            self._state = np.uint64((int(self._state) + n * int(_GOLDEN)) & 0xFFFFFFFFFFFFFFFF)
        return _mix64(states)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        if low > high:
            raise ValueError(f"uniform: low {low} > high {high}")
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _INV53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError(f"normal: std must be >= 0, got {std}")
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        z = self.next_u64(2 * pairs)
        u1 = ((z[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53  # (0, 1]
        u2 = (z[pairs:] >> np.uint64(11)).astype(np.float64) * _INV53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return (mean + std * out[:n]).reshape(shape)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n draws from [0, bound). Modulo construction; fine at lab scale."""
        return (self.next_u64(n) % np.uint64(bound)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        draws = self.next_u64(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def draw(rng: RngState, shape, distribution, dtype=None) -> Tensor:
    """Sample a tensor from ``("uniform", a, b)`` or ``("normal", mean, std)``."""
    kind, p0, p1 = distribution
    if kind == "uniform":
        data = rng.uniform(tuple(shape), float(p0), float(p1))
    elif kind == "normal":
        data = rng.normal(tuple(shape), float(p0), float(p1))
    else:
        raise ValueError(f"draw: unknown distribution {kind!r}")
    return Tensor(data, dtype=dtype)


def array_checksum(*arrays: np.ndarray) -> str:
    """SHA-256 over raw bytes; used by tests to prove state was untouched."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
