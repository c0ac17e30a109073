"""Self-distillation: stored teacher probabilities, voting, and the loss term.

The teacher is never re-run: each epoch's output probabilities are recorded
per example, the last K sealed epochs stay addressable, and the teacher signal
for epoch t is the element-wise mean of epochs t-1 .. t-K.  Recordings for the
epoch in progress accumulate in a staging buffer so lookups of the previous K
epochs stay valid mid-epoch; sealing commits the buffer and evicts the slot
that held epoch t-K.
"""
from __future__ import annotations

import re
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

METRICS = ("KL", "ED", "MD", "CD", "KL_REV")
PROB_FLOOR = 1e-8  # inside-log clamp; far below any float64 softmax output here
_SUM_TOL = 1e-9


class _SplitStore:
    def __init__(self, window: int, n: int, classes: int):
        self.data = np.full((window, n, classes), np.nan)
        self.epoch = np.full(window, -1, dtype=np.int64)
        self.mask = np.zeros((window, n), dtype=bool)
        self.staging = np.full((n, classes), np.nan)
        self.staging_mask = np.zeros(n, dtype=bool)
        self.staging_epoch = -1


class TeacherBank:
    """Per-split circular store of the last K epochs of output probabilities."""

    def __init__(self, window: int, n_examples: int, class_count: int, splits: Sequence[str] = ("train", "valid")):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.n_examples = n_examples
        self.class_count = class_count
        self._stores = {s: _SplitStore(window, n_examples, class_count) for s in splits}

    def _store(self, split: str) -> _SplitStore:
        st = self._stores.get(split)
        if st is None:
            raise KeyError(f"unknown split {split!r}")
        return st

    def _validate(self, probs: np.ndarray) -> np.ndarray:
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape[-1] != self.class_count:
            raise ValueError(
                f"probability vector length {probs.shape[-1]} != class count {self.class_count}"
            )
        if np.any(probs < -1e-12):
            raise ValueError("probabilities must be non-negative")
        sums = probs.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > _SUM_TOL):
            bad = float(np.asarray(sums).reshape(-1)[0])
            raise ValueError(f"probabilities must sum to 1 (got {bad:.12g})")
        return probs

    def record(self, split: str, epoch: int, example_id, probs) -> None:
        """Store probabilities for (epoch, id); re-recording overwrites.

        Starting a new epoch seals the previous one automatically.
        """
        st = self._store(split)
        probs = self._validate(probs)
        ids = np.atleast_1d(np.asarray(example_id, dtype=np.int64))
        probs = probs.reshape(len(ids), self.class_count)
        if st.staging_epoch not in (-1, epoch):
            self.seal(split, st.staging_epoch)
        st.staging_epoch = epoch
        st.staging[ids] = probs
        st.staging_mask[ids] = True

    def seal(self, split: str, epoch: int) -> None:
        """Commit the staging buffer for ``epoch`` into its circular slot."""
        st = self._store(split)
        if st.staging_epoch != epoch:
            raise ValueError(
                f"cannot seal epoch {epoch}: staging holds epoch {st.staging_epoch}"
            )
        slot = epoch % self.window
        st.data[slot] = st.staging
        st.mask[slot] = st.staging_mask
        st.epoch[slot] = epoch
        st.staging = np.full_like(st.staging, np.nan)
        st.staging_mask = np.zeros_like(st.staging_mask)
        st.staging_epoch = -1

    def seal_epoch(self, epoch: int) -> None:
        for split, st in self._stores.items():
            if st.staging_epoch == epoch:
                self.seal(split, epoch)

    def stored(self, split: str, epoch: int, example_id: int) -> np.ndarray:
        """Read back one stored vector, staged or sealed."""
        st = self._store(split)
        if st.staging_epoch == epoch:
            if not st.staging_mask[example_id]:
                raise KeyError(f"no probabilities staged for id {example_id} at epoch {epoch}")
            return st.staging[example_id].copy()
        slot = epoch % self.window
        if st.epoch[slot] != epoch:
            raise KeyError(f"epoch {epoch} is not held by the {split} bank")
        if not st.mask[slot, example_id]:
            raise KeyError(f"no probabilities stored for id {example_id} at epoch {epoch}")
        return st.data[slot, example_id].copy()

    def stored_batch(self, split: str, epoch: int, ids: np.ndarray) -> np.ndarray:
        st = self._store(split)
        slot = epoch % self.window
        if st.epoch[slot] != epoch:
            raise KeyError(f"epoch {epoch} is not held by the {split} bank")
        ids = np.asarray(ids, dtype=np.int64)
        if not st.mask[slot, ids].all():
            missing = int(ids[~st.mask[slot, ids]][0])
            raise KeyError(f"id {missing} has no stored probabilities for epoch {epoch}")
        return st.data[slot][ids].copy()

    def vote(self, split: str, current_epoch: int, ids) -> np.ndarray:
        """Mean stored probability over epochs t-1 .. t-K for each id."""
        ids = np.asarray(ids, dtype=np.int64)
        acc = np.zeros((len(ids), self.class_count))
        for k in range(1, self.window + 1):
            acc += self.stored_batch(split, current_epoch - k, ids)
        return acc / self.window


# ---------------------------------------------------------------------------
# correlation metrics and the distillation loss
# ---------------------------------------------------------------------------


def _check_probs(name: str, values: np.ndarray) -> None:
    if np.any(values < -1e-12) or np.any(np.abs(values.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError(f"{name} rows must be probability vectors for KL")


def correlation(student_probs, teacher_probs, metric: str) -> Tensor:
    """Batch-mean student/teacher discrepancy, differentiable in the student.

    The teacher enters as stored constants, never as live graph nodes.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown correlation metric {metric!r}; expected one of {METRICS}")
    s = student_probs if isinstance(student_probs, Tensor) else Tensor(student_probs)
    t = np.asarray(teacher_probs.data if isinstance(teacher_probs, Tensor) else teacher_probs, dtype=np.float64)
    if s.data.ndim not in (1, 2) or s.data.shape != t.shape:
        raise dc.ShapeError(f"correlation: incompatible shapes {s.data.shape} and {t.shape}")
    single = s.data.ndim == 1
    n = 1 if single else s.data.shape[0]
    if metric in ("KL", "KL_REV"):
        _check_probs("student", np.atleast_2d(s.data))
        _check_probs("teacher", np.atleast_2d(t))
    tc = Tensor(t)

    if metric == "KL":
        log_t = Tensor(np.log(np.maximum(t, PROB_FLOOR)))
        terms = dc.mul(s, dc.sub(dc.log(dc.clamp_min(s, PROB_FLOOR)), log_t))
        return dc.scale(dc.sum_(terms), 1.0 / n)
    if metric == "KL_REV":
        log_t = Tensor(np.log(np.maximum(t, PROB_FLOOR)))
        terms = dc.mul(tc, dc.sub(log_t, dc.log(dc.clamp_min(s, PROB_FLOOR))))
        return dc.scale(dc.sum_(terms), 1.0 / n)
    if metric == "ED":
        d = dc.sub(s, tc)
        return dc.scale(dc.sum_(dc.mul(d, d)), 1.0 / n)
    if metric == "MD":
        d = dc.sub(s, tc)
        return dc.scale(dc.sum_(dc.abs_(d)), 1.0 / n)
    # CD: mean over the batch of (1 - cosine similarity)
    if single:
        dot = dc.sum_(dc.mul(s, tc))
        snorm = dc.sqrt_(dc.sum_(dc.mul(s, s)))
        cos = dc.div(dot, dc.scale(snorm, float(np.linalg.norm(t))))
        return dc.add(dc.scale(cos, -1.0), 1.0)
    dot = dc.rowsum(dc.mul(s, tc))
    snorm = dc.sqrt_(dc.rowsum(dc.mul(s, s)))
    cos = dc.div(dot, dc.mul(snorm, Tensor(np.linalg.norm(t, axis=1))))
    return dc.add(dc.scale(dc.mean_(cos), -1.0), 1.0)


def distill_loss(logits: Tensor, labels, teacher_probs, lam: float, metric: str = "KL") -> Tensor:
    """Classification loss plus ``lam`` times the teacher-correlation term.

    At lam == 0 the correlation graph is never built, so the result is
    bit-identical to the plain cross-entropy.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    ce = dc.cross_entropy(logits, labels)
    if lam == 0:
        return ce
    probs = dc.softmax_lastdim(logits)
    return dc.add(ce, dc.scale(correlation(probs, teacher_probs, metric), lam))


# ---------------------------------------------------------------------------
# bank snapshot dump (debugging aid)
# ---------------------------------------------------------------------------

_BANK_HEADER_RE = re.compile(r"^bank v1; K=(\d+); N=(\d+); C=(\d+); split=(\w+)$")


def dump_bank(bank: TeacherBank, split: str, path) -> None:
    st = bank._store(split)
    header = f"bank v1; K={bank.window}; N={bank.n_examples}; C={bank.class_count}; split={split}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(st.data.astype("<f8").tobytes())


def load_bank_dump(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").rstrip("\n")
        m = _BANK_HEADER_RE.match(header)
        if not m:
            raise ValueError(f"bad bank header: {header!r}")
        k, n, c = int(m.group(1)), int(m.group(2)), int(m.group(3))
        raw = fh.read()
    expected = k * n * c * 8
    if len(raw) != expected:
        raise ValueError(f"bank payload has {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f8").reshape(k, n, c).copy()
    return {"K": k, "N": n, "C": c, "split": m.group(4)}, data
