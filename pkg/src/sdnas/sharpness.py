"""Loss-landscape analytics for the mixing logits.

Sharpness is tracked three ways on a fixed probe batch: the raw gradient
norm, its rho-scaled sharpness estimate, and the dominant eigenvalue of the
validation-loss Hessian obtained by power iteration over finite-difference
Hessian-vector products.  All measurements leave the network bit-identical
to how they found it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from . import diffcore as dc
from .diffcore import RngState, derive_seed


@dataclass
class SharpnessConfig:
    rho: float = 0.01
    hvp_eps: float = 1e-3  # relative step; absolute step is eps * (1 + |alpha|)
    power_max_steps: int = 50
    power_tol: float = 1e-3  # relative eigenvalue change
    cadence: int = 1  # measure every n-th epoch; 0 disables
    probe_size: int = 256

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if self.hvp_eps <= 0:
            raise ValueError("hvp_eps must be > 0")


@dataclass
class SharpnessSample:
    epoch: int
    grad_norm: float
    sharpness: float
    lambda_max: float
    residual: float
    converged: bool
    probe_loss: float
    loss_delta: float | None = None  # L_t - L_{t+1}, filled once t+1 is measured


def sharpness_estimate(grad_norm: float, rho: float) -> float:
    """First-order sharpness: rho times the gradient norm."""
    if rho <= 0:
        raise ValueError("rho must be > 0")
    return rho * grad_norm


# ---------------------------------------------------------------------------
# generic vector core (exercised directly by the quadratic/dense oracles)
# ---------------------------------------------------------------------------


def hvp_from_grad_fn(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, v: np.ndarray, eps: float) -> np.ndarray:
    """Central-difference Hessian-vector product scaled back to |v|.

    Uses the unit direction and step eps * (1 + |theta|), so the probe size
    adapts to the parameter scale.
    """
    v = np.asarray(v, dtype=np.float64)
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0:
        raise ValueError("hvp: direction must be nonzero")
    vhat = v / vnorm
    delta = eps * (1.0 + float(np.linalg.norm(theta)))
    gp = grad_fn(theta + delta * vhat)
    gm = grad_fn(theta - delta * vhat)
    if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gm))):
        raise ValueError("hvp: non-finite gradient at perturbed point")
    return (gp - gm) / (2.0 * delta) * vnorm


def power_iteration(
    matvec: Callable[[np.ndarray], np.ndarray],
    start: np.ndarray,
    max_steps: int,
    tol: float,
) -> tuple[float, float, bool]:
    """Largest-|lambda| eigenvalue via power iteration with Rayleigh quotients.

    Returns (eigenvalue, residual |Hv - lambda v| for unit v, converged).
    Non-convergence is reported, not raised.
    """
    v = np.asarray(start, dtype=np.float64)
    nv = float(np.linalg.norm(v))
    if nv == 0:
        raise ValueError("power iteration: start vector must be nonzero")
    v = v / nv
    lam_prev = None
    converged = False
    for _ in range(max_steps):
        h = matvec(v)
        lam = float(v @ h)
        hn = float(np.linalg.norm(h))
        if hn == 0.0:  # zero operator: eigenvalue 0 exactly
            return 0.0, 0.0, True
        v = h / hn
        if lam_prev is not None and abs(lam - lam_prev) <= tol * max(1e-12, abs(lam)):
            converged = True
            break
        lam_prev = lam
    h = matvec(v)
    lam = float(v @ h)
    residual = float(np.linalg.norm(h - lam * v))
    return lam, residual, converged


def dense_hessian(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Column-by-column finite-difference Hessian, symmetrized. Oracle use only."""
    theta = np.asarray(theta, dtype=np.float64)
    d = theta.size
    H = np.empty((d, d))
    delta = eps * (1.0 + float(np.linalg.norm(theta)))
    for i in range(d):
        e = np.zeros(d)
        e[i] = delta
        H[:, i] = (grad_fn(theta + e) - grad_fn(theta - e)) / (2.0 * delta)
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# supernet-facing measurements
# ---------------------------------------------------------------------------


def _probe_loss_and_grad(net, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    with dc.Tape() as tape:
        loss = dc.cross_entropy(net.forward(X), y)
    g = tape.gradients(loss, [net.alpha])[net.alpha]
    return loss.item(), g.reshape(-1)


def alpha_grad_norm(net, probe_batch: tuple[np.ndarray, np.ndarray]) -> float:
    """L2 norm of the validation-loss gradient w.r.t. the mixing logits."""
    X, y = probe_batch
    if len(y) == 0:
        raise ValueError("probe batch is empty")
    _, g = _probe_loss_and_grad(net, X, y)
    return float(np.linalg.norm(g))


def _net_grad_fn(net, X: np.ndarray, y: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    shape = net.alpha.data.shape
    original = net.alpha.data

    def grad_fn(theta: np.ndarray) -> np.ndarray:
        net.alpha.data = np.asarray(theta, dtype=np.float64).reshape(shape)
        try:
            _, g = _probe_loss_and_grad(net, X, y)
        finally:
            net.alpha.data = original
        return g

    return grad_fn


def hvp(net, v: np.ndarray, probe_batch: tuple[np.ndarray, np.ndarray], eps: float = 1e-3) -> np.ndarray:
    """Hessian-vector product of the probe validation loss w.r.t. the mixing
    logits; the perturbation is applied and exactly reverted."""
    X, y = probe_batch
    grad_fn = _net_grad_fn(net, X, y)
    theta = net.alpha.data.reshape(-1).copy()
    return hvp_from_grad_fn(grad_fn, theta, np.asarray(v).reshape(-1), eps)


def dominant_eigenvalue(
    net,
    probe_batch: tuple[np.ndarray, np.ndarray],
    cfg: SharpnessConfig,
    seed: int = 0,
) -> tuple[float, float, bool]:
    """Top-|lambda| eigenvalue of the probe-loss Hessian w.r.t. the logits."""
    X, y = probe_batch
    grad_fn = _net_grad_fn(net, X, y)
    theta = net.alpha.data.reshape(-1).copy()
    start = RngState(derive_seed(seed, "power-start")).normal((theta.size,))
    return power_iteration(
        lambda v: hvp_from_grad_fn(grad_fn, theta, v, cfg.hvp_eps),
        start,
        cfg.power_max_steps,
        cfg.power_tol,
    )


def measure(net, probe_batch, cfg: SharpnessConfig, seed: int, epoch: int) -> SharpnessSample:
    """One trace row: gradient norm, sharpness, dominant eigenvalue, probe loss."""
    X, y = probe_batch
    loss, g = _probe_loss_and_grad(net, X, y)
    gn = float(np.linalg.norm(g))
    lam, residual, converged = dominant_eigenvalue(
        net, probe_batch, cfg, seed=derive_seed(seed, "eig", epoch)
    )
    return SharpnessSample(
        epoch=epoch,
        grad_norm=gn,
        sharpness=sharpness_estimate(gn, cfg.rho),
        lambda_max=lam,
        residual=residual,
        converged=converged,
        probe_loss=loss,
    )


def fill_loss_deltas(trace: list[SharpnessSample]) -> None:
    """Attach L_t - L_{t+1} to each consecutive pair of measured epochs.

    Traces read back from CSV have no probe losses; their persisted deltas
    are left alone.
    """
    for a, b in zip(trace, trace[1:]):
        if np.isnan(a.probe_loss) or np.isnan(b.probe_loss):
            continue
        a.loss_delta = a.probe_loss - b.probe_loss


TRACE_CSV_COLUMNS = "epoch,grad_norm,sharpness_R,lambda_max,residual,converged,loss_delta"


def write_trace_csv(trace: list[SharpnessSample], path) -> None:
    lines = [TRACE_CSV_COLUMNS]
    for s in trace:
        delta = "" if s.loss_delta is None else repr(s.loss_delta)
        lines.append(
            f"{s.epoch},{s.grad_norm!r},{s.sharpness!r},{s.lambda_max!r},"
            f"{s.residual!r},{str(s.converged).lower()},{delta}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace_csv(path) -> list[SharpnessSample]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != TRACE_CSV_COLUMNS:
        raise ValueError(f"bad sharpness trace header in {path}")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        out.append(
            SharpnessSample(
                epoch=int(parts[0]),
                grad_norm=float(parts[1]),
                sharpness=float(parts[2]),
                lambda_max=float(parts[3]),
                residual=float(parts[4]),
                converged=parts[5] == "true",
                probe_loss=float("nan"),
                loss_delta=float(parts[6]) if parts[6] else None,
            )
        )
    return out


def loss_delta_proxy(trace: list[SharpnessSample], lr: float, rho: float):
    """Pairs (observed L_t - L_{t+1}, predicted (lr/rho^2) * R_t^2) plus their
    Spearman rank correlation.  Purely descriptive; the prediction is a
    first-order approximation and is not judged here."""
    if len(trace) < 3:
        raise ValueError(f"need at least 3 consecutive measurements, got {len(trace)}")
    fill_loss_deltas(trace)
    observed = [s.loss_delta for s in trace[:-1]]
    predicted = [(lr / rho**2) * sharpness_estimate(s.grad_norm, rho) ** 2 for s in trace[:-1]]
    if all(o == 0 for o in observed) and all(p == 0 for p in predicted):
        corr = 1.0
    else:
        corr = float(stats.spearmanr(observed, predicted).statistic)
    return list(zip(observed, predicted)), corr
