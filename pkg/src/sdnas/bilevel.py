"""Alternating bilevel search with self-distillation.

Each iteration takes one optimizer step on the mixing logits against a
validation batch, then one step on the operation weights against a training
batch; after warm-up both losses gain the teacher-correlation term.  Every
float op in a run is a pure function of the config seed, so a run is
replayable bit for bit.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .datasets import Dataset, Split, epoch_batches, split as make_split
from .diffcore import RngState, Tape, Tensor, derive_seed
from .distill import METRICS, TeacherBank, correlation
from .searchspace import (
    OP_ORDER,
    CellTopology,
    DiscreteNet,
    Genotype,
    Supernet,
    discretize,
    genotype_serialize,
)
from .sharpness import SharpnessConfig, SharpnessSample, fill_loss_deltas, measure


class ConfigError(ValueError):
    """A configuration field violates its invariant."""


@dataclass
class SearchConfig:
    total_epochs: int = 50
    warmup_epochs: int = 25
    window: int = 2
    lam: float = 1.0
    batch_size: int = 64
    metric: str = "KL"
    retain: object = "all"
    seed: int = 0
    teacher_capture: str = "streaming"  # or "end_of_epoch"
    teacher_mode: str = "vote"  # or "direct" (window == 1 only)
    warmup_freeze_alpha: bool = False
    valid_fraction: float = 0.5
    num_cells: int = 4
    feature_dim: int = 16
    w_lr: float = 0.025
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    alpha_lr: float = 3e-4
    alpha_betas: tuple[float, float] = (0.5, 0.999)
    alpha_weight_decay: float = 1e-3
    alpha_eps: float = 1e-8
    w_grad_clip: float = 5.0  # global-norm clip on the weight step; 0 disables

    def validate(self) -> None:
        if not 0 < self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"warmup_epochs must satisfy 0 < {self.warmup_epochs} < total_epochs"
                f" {self.total_epochs}"
            )
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.warmup_epochs < self.window:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} must be >= window {self.window}"
                " so voting always sees a full window"
            )
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.teacher_capture not in ("streaming", "end_of_epoch"):
            raise ConfigError("teacher_capture must be streaming|end_of_epoch")
        if self.teacher_mode not in ("vote", "direct"):
            raise ConfigError("teacher_mode must be vote|direct")
        if self.teacher_mode == "direct" and self.window != 1:
            raise ConfigError("teacher_mode=direct requires window=1")
        if not 0 < self.valid_fraction < 1:
            raise ConfigError(f"valid_fraction must be in (0, 1), got {self.valid_fraction}")
        if self.retain != "all" and (not isinstance(self.retain, int) or self.retain < 1):
            raise ConfigError(f"retain must be 'all' or a positive int, got {self.retain!r}")


@dataclass
class EpochLog:
    epoch: int
    phase: str  # warmup | sd
    train_loss: float
    valid_loss: float
    distill_train: float
    distill_valid: float
    alpha_grad_norm: float
    w_grad_norm: float
    lr_w: float
    lr_alpha: float
    wall_ms: float


EPOCH_CSV_COLUMNS = (
    "epoch,phase,train_loss,valid_loss,distill_train,distill_valid,"
    "alpha_grad_norm,w_grad_norm,lr_w,lr_alpha,wall_ms"
)


def cosine_lr(base: float, epoch_index: float, total_epochs: int) -> float:
    """Cosine anneal from ``base`` at index 0 to exactly 0 at index E."""
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch_index / total_epochs))


class SgdState:
    """SGD with momentum; L2 weight decay is folded into the gradient."""

    def __init__(self, named_params: dict[str, Tensor], lr: float, momentum: float, weight_decay: float):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in named_params.items()}

    def step(self, named_params: dict[str, Tensor], grads: dict[Tensor, np.ndarray], lr: float) -> None:
        for name, t in named_params.items():
            g = grads[t] + self.weight_decay * t.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            t.data = t.data - lr * v


class AdamState:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, named_params, lr: float, betas=(0.5, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.m = {name: np.zeros_like(t.data) for name, t in named_params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in named_params.items()}

    def step(self, named_params: dict[str, Tensor], grads: dict[Tensor, np.ndarray]) -> None:
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for name, t in named_params.items():
            g = grads[t] + self.weight_decay * t.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            t.data = t.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _global_norm(grads: dict[Tensor, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: dict[Tensor, np.ndarray], max_norm: float) -> float:
    """Scale gradients so their global norm is at most ``max_norm``; returns
    the pre-clip norm.  Keeps deep identity-sum genotypes trainable at the
    standard learning rate."""
    norm = _global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for t in grads:
            grads[t] = grads[t] * factor
    return norm


def _teacher_for(bank: TeacherBank, cfg: SearchConfig, split_name: str, epoch: int, ids) -> np.ndarray:
    if cfg.teacher_mode == "direct":
        return bank.stored_batch(split_name, epoch - 1, ids)
    return bank.vote(split_name, epoch, ids)


def _alternating_epoch(
    net: Supernet,
    ds: Dataset,
    sp: Split,
    bank: TeacherBank,
    sgd: SgdState,
    adam: AdamState,
    cfg: SearchConfig,
    epoch: int,
    lam: float,
    phase: str,
) -> EpochLog:
    t0 = time.perf_counter()
    X, y = ds.features, ds.labels
    train_b = epoch_batches(sp.train_ids, cfg.batch_size, cfg.seed, epoch, "train")
    valid_b = epoch_batches(sp.valid_ids, cfg.batch_size, cfg.seed, epoch, "valid")
    lr_w = cosine_lr(cfg.w_lr, epoch - 1, cfg.total_epochs)
    iters = max(len(train_b), len(valid_b))
    w_list = net.w_tensors()
    streaming = cfg.teacher_capture == "streaming"
    freeze_alpha = phase == "warmup" and cfg.warmup_freeze_alpha
    v_loss = t_loss = v_dist = t_dist = a_norm = w_norm = 0.0

    for i in range(iters):
        vids = valid_b[i % len(valid_b)]
        tids = train_b[i % len(train_b)]

        # -- logits-mixing step against the validation batch
        teacher = _teacher_for(bank, cfg, "valid", epoch, vids) if lam > 0 else None
        with Tape() as tape:
            logits = net.forward(X[vids])
            probs = dc.softmax_lastdim(logits)
            ce = dc.cross_entropy(logits, y[vids])
            if lam > 0:
                h = correlation(probs, teacher, cfg.metric)
                loss = dc.add(ce, dc.scale(h, lam))
            else:
                loss = ce
        if not math.isfinite(loss.item()):
            raise RuntimeError(
                f"non-finite validation loss at epoch {epoch}, iteration {i} ({phase})"
            )
        if not freeze_alpha:
            ga = tape.gradients(loss, [net.alpha])
            adam.step({"alpha": net.alpha}, ga)
            a_norm += float(np.linalg.norm(ga[net.alpha]))
        if streaming:
            bank.record("valid", epoch, vids, probs.data)
        v_loss += ce.item()
        if lam > 0:
            v_dist += h.item()

        # -- operation-weight step against the training batch
        teacher = _teacher_for(bank, cfg, "train", epoch, tids) if lam > 0 else None
        with Tape() as tape:
            logits = net.forward(X[tids])
            probs = dc.softmax_lastdim(logits)
            ce = dc.cross_entropy(logits, y[tids])
            if lam > 0:
                h = correlation(probs, teacher, cfg.metric)
                loss = dc.add(ce, dc.scale(h, lam))
            else:
                loss = ce
        if not math.isfinite(loss.item()):
            raise RuntimeError(
                f"non-finite training loss at epoch {epoch}, iteration {i} ({phase})"
            )
        gw = tape.gradients(loss, w_list)
        w_norm += clip_global_norm(gw, cfg.w_grad_clip)
        sgd.step(net.params, gw, lr_w)
        if streaming:
            bank.record("train", epoch, tids, probs.data)
        t_loss += ce.item()
        if lam > 0:
            t_dist += h.item()

    if cfg.teacher_capture == "end_of_epoch":
        _record_full_pass(net, ds, sp, bank, epoch, cfg.batch_size)
    bank.seal_epoch(epoch)
    return EpochLog(
        epoch=epoch,
        phase=phase,
        train_loss=t_loss / iters,
        valid_loss=v_loss / iters,
        distill_train=t_dist / iters,
        distill_valid=v_dist / iters,
        alpha_grad_norm=a_norm / iters,
        w_grad_norm=w_norm / iters,
        lr_w=lr_w,
        lr_alpha=cfg.alpha_lr,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


def _record_full_pass(net, ds, sp, bank, epoch, batch_size):
    """Post-update capture over both splits (the end_of_epoch ablation)."""
    for name, ids in (("train", sp.train_ids), ("valid", sp.valid_ids)):
        for lo in range(0, len(ids), batch_size):
            chunk = ids[lo : lo + batch_size]
            logits = net.forward(ds.features[chunk])
            probs = dc.softmax_lastdim(logits)
            bank.record(name, epoch, chunk, probs.data)


def warmup_epoch(net, ds, sp, bank, sgd, adam, cfg, epoch) -> EpochLog:
    """One plain alternating epoch; probabilities are still captured so the
    first distilled epoch sees a full teacher window."""
    if epoch > cfg.warmup_epochs:
        raise ValueError(f"epoch {epoch} is past the warm-up phase")
    return _alternating_epoch(net, ds, sp, bank, sgd, adam, cfg, epoch, 0.0, "warmup")


def sd_epoch(net, ds, sp, bank, sgd, adam, cfg, epoch) -> EpochLog:
    """One self-distilled alternating epoch (teacher-correlation active)."""
    if epoch <= cfg.warmup_epochs:
        raise ValueError(f"epoch {epoch} is still in warm-up")
    return _alternating_epoch(net, ds, sp, bank, sgd, adam, cfg, epoch, cfg.lam, "sd")


@dataclass
class SearchResult:
    genotype: Genotype
    genotype_text: str
    logs: list[EpochLog]
    trace: list[SharpnessSample]
    config: SearchConfig
    final_alpha: np.ndarray | None = None


def probe_batch(ds: Dataset, sp: Split, probe_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed validation subset used for every sharpness measurement of a run."""
    rng = RngState(derive_seed(seed, "probe"))
    take = min(probe_size, len(sp.valid_ids))
    ids = sp.valid_ids[rng.permutation(len(sp.valid_ids))][:take]
    ids = np.sort(ids)
    return ds.features[ids], ds.labels[ids]


def run_search(cfg: SearchConfig, ds: Dataset, sharp_cfg: SharpnessConfig | None = None) -> SearchResult:
    """Warm up, then alternate self-distilled updates; returns the discretized
    genotype plus per-epoch logs and the sharpness trace."""
    cfg.validate()
    sp = make_split(ds, cfg.valid_fraction, cfg.seed)
    topo = CellTopology.complete(2)
    net = Supernet.init(
        cfg.seed,
        topo=topo,
        ops=OP_ORDER,
        num_cells=cfg.num_cells,
        feature_dim=cfg.feature_dim,
        in_dim=ds.features.shape[1],
        class_count=ds.class_count,
    )
    bank = TeacherBank(cfg.window, ds.n, ds.class_count)
    sgd = SgdState(net.params, cfg.w_lr, cfg.w_momentum, cfg.w_weight_decay)
    adam = AdamState(
        {"alpha": net.alpha}, cfg.alpha_lr, cfg.alpha_betas, cfg.alpha_eps, cfg.alpha_weight_decay
    )
    measure_sharp = sharp_cfg is not None and sharp_cfg.cadence > 0
    probe = probe_batch(ds, sp, sharp_cfg.probe_size, cfg.seed) if measure_sharp else None
    logs: list[EpochLog] = []
    trace: list[SharpnessSample] = []
    for epoch in range(1, cfg.total_epochs + 1):
        if epoch <= cfg.warmup_epochs:
            logs.append(warmup_epoch(net, ds, sp, bank, sgd, adam, cfg, epoch))
        else:
            logs.append(sd_epoch(net, ds, sp, bank, sgd, adam, cfg, epoch))
        if measure_sharp and epoch % sharp_cfg.cadence == 0:
            trace.append(measure(net, probe, sharp_cfg, cfg.seed, epoch))
    fill_loss_deltas(trace)
    genotype = discretize(net.alpha.data, topo, OP_ORDER, cfg.retain)
    return SearchResult(
        genotype=genotype,
        genotype_text=genotype_serialize(genotype),
        logs=logs,
        trace=trace,
        config=cfg,
        final_alpha=net.alpha.data.copy(),
    )


def reference_darts_run(cfg: SearchConfig, ds: Dataset) -> tuple[Genotype, list[EpochLog]]:
    """Straight-line plain alternating-descent baseline.

    Deliberately re-states the whole loop without any teacher machinery; it is
    the oracle the lam=0 reduction is checked against.
    """
    cfg.validate()
    sp = make_split(ds, cfg.valid_fraction, cfg.seed)
    topo = CellTopology.complete(2)
    net = Supernet.init(
        cfg.seed,
        topo=topo,
        ops=OP_ORDER,
        num_cells=cfg.num_cells,
        feature_dim=cfg.feature_dim,
        in_dim=ds.features.shape[1],
        class_count=ds.class_count,
    )
    sgd = SgdState(net.params, cfg.w_lr, cfg.w_momentum, cfg.w_weight_decay)
    adam = AdamState(
        {"alpha": net.alpha}, cfg.alpha_lr, cfg.alpha_betas, cfg.alpha_eps, cfg.alpha_weight_decay
    )
    X, y = ds.features, ds.labels
    w_list = net.w_tensors()
    logs: list[EpochLog] = []
    for epoch in range(1, cfg.total_epochs + 1):
        t0 = time.perf_counter()
        train_b = epoch_batches(sp.train_ids, cfg.batch_size, cfg.seed, epoch, "train")
        valid_b = epoch_batches(sp.valid_ids, cfg.batch_size, cfg.seed, epoch, "valid")
        lr_w = cosine_lr(cfg.w_lr, epoch - 1, cfg.total_epochs)
        iters = max(len(train_b), len(valid_b))
        v_loss = t_loss = a_norm = w_norm = 0.0
        for i in range(iters):
            vids = valid_b[i % len(valid_b)]
            tids = train_b[i % len(train_b)]
            with Tape() as tape:
                loss = dc.cross_entropy(net.forward(X[vids]), y[vids])
            ga = tape.gradients(loss, [net.alpha])
            adam.step({"alpha": net.alpha}, ga)
            a_norm += float(np.linalg.norm(ga[net.alpha]))
            v_loss += loss.item()
            with Tape() as tape:
                loss = dc.cross_entropy(net.forward(X[tids]), y[tids])
            gw = tape.gradients(loss, w_list)
            w_norm += clip_global_norm(gw, cfg.w_grad_clip)
            sgd.step(net.params, gw, lr_w)
            t_loss += loss.item()
        logs.append(
            EpochLog(
                epoch=epoch,
                phase="warmup" if epoch <= cfg.warmup_epochs else "sd",
                train_loss=t_loss / iters,
                valid_loss=v_loss / iters,
                distill_train=0.0,
                distill_valid=0.0,
                alpha_grad_norm=a_norm / iters,
                w_grad_norm=w_norm / iters,
                lr_w=lr_w,
                lr_alpha=cfg.alpha_lr,
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
        )
    genotype = discretize(net.alpha.data, topo, OP_ORDER, cfg.retain)
    return genotype, logs


def train_discrete(
    genotype: Genotype,
    ds: Dataset,
    epochs: int,
    seed: int,
    batch_size: int = 64,
    num_cells: int = 4,
    feature_dim: int = 16,
    lr: float = 0.025,
    momentum: float = 0.9,
    weight_decay: float = 3e-4,
    valid_fraction: float = 0.5,
    grad_clip: float = 5.0,
) -> float:
    """Train a standalone realization of ``genotype`` from scratch and return
    its held-out accuracy."""
    sp = make_split(ds, valid_fraction, seed)
    net = DiscreteNet.init(
        genotype,
        num_cells=num_cells,
        feature_dim=feature_dim,
        in_dim=ds.features.shape[1],
        class_count=ds.class_count,
        seed=seed,
    )
    sgd = SgdState(net.params, lr, momentum, weight_decay)
    X, y = ds.features, ds.labels
    w_list = net.w_tensors()
    batch_seed = derive_seed(seed, "discrete-batches")
    for epoch in range(1, epochs + 1):
        lr_e = cosine_lr(lr, epoch - 1, epochs)
        for i, ids in enumerate(epoch_batches(sp.train_ids, batch_size, batch_seed, epoch, "train")):
            with Tape() as tape:
                loss = dc.cross_entropy(net.forward(X[ids]), y[ids])
            if not math.isfinite(loss.item()):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, batch {i}")
            gw = tape.gradients(loss, w_list)
            clip_global_norm(gw, grad_clip)
            sgd.step(net.params, gw, lr_e)
    correct = 0
    for lo in range(0, len(sp.valid_ids), 512):
        ids = sp.valid_ids[lo : lo + 512]
        logits = net.forward(X[ids]).data
        correct += int(np.sum(np.argmax(logits, axis=1) == y[ids]))
    return correct / len(sp.valid_ids)


def write_epoch_csv(logs: list[EpochLog], path, zero_wall: bool = True) -> None:
    """Epoch-log CSV; wall_ms is zeroed in deterministic mode so reruns of the
    same manifest produce byte-identical files."""
    lines = [EPOCH_CSV_COLUMNS]
    for log in logs:
        wall = 0.0 if zero_wall else log.wall_ms
        lines.append(
            f"{log.epoch},{log.phase},{log.train_loss!r},{log.valid_loss!r},"
            f"{log.distill_train!r},{log.distill_valid!r},{log.alpha_grad_norm!r},"
            f"{log.w_grad_norm!r},{log.lr_w!r},{log.lr_alpha!r},{wall!r}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
