"""AdamW, cosine schedule, global-norm clipping and the epoch loop."""

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from gemkit import autodiff as ad
from gemkit import density, metrics

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "loss_total", "loss_pred", "loss_kl", "loss_fi", "loss_ebm",
                   "loss_unc", "skipped_steps", "val_acc", "val_ece")
RNG_STREAMS = ("init", "data", "dropout", "vos", "density")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, breakdown=None, epoch=None, step=None):
        super().__init__(message)
        self.breakdown = breakdown
        self.epoch = epoch
        self.step = step


@dataclass
class TrainSchedule:
    epochs: int = 50
    batch_size: int = 64
    base_lr: float = 5e-4
    weight_decay: float = 1e-4
    max_grad_norm: float = 1.0
    density_refit_every: int = 1
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.density_refit_every < 1:
            raise ValueError("density_refit_every must be >= 1")


@dataclass
class OptimState:
    lr: float
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def optimizer_step(params, state):
    """One AdamW update in place; returns False (and skips) on non-finite grads.

    ``params`` maps name -> Tensor with ``grad`` populated (None counts as 0).
    """
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("optimizer_step: non-finite gradient, step skipped (%d so far)", state.skipped)
        return False
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        if state.weight_decay:
            t.data -= state.lr * state.weight_decay * t.data
        t.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


def cosine_lr(step, total_steps, base_lr):
    if total_steps <= 0:
        return base_lr
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def global_norm(grads):
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


def clip_global_norm(grads, max_norm=1.0):
    """Scale a list of arrays so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


def rng_streams(seed):
    """Independent named generators derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, children)}


def stratified_split(y, fraction, rng):
    """Indices (train, val) with ``fraction`` of each class held out."""
    y = np.asarray(y)
    val = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        val.extend(idx[: int(round(fraction * len(idx)))])
    val = np.sort(np.asarray(val, dtype=int))
    train = np.setdiff1d(np.arange(len(y)), val)
    return train, val


@dataclass
class FitResult:
    model: object
    history: list
    train_idx: np.ndarray
    val_idx: np.ndarray
    total_steps: int
    optim: OptimState

    def history_csv(self):
        return history_to_csv(self.history)


def history_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in HISTORY_COLUMNS])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def fit(model, x, y, schedule, seed=0, x_val=None, y_val=None, streams=None, on_epoch=None):
    """Train ``model`` on (x, y).

    If no validation set is given, a stratified ``schedule.val_fraction`` of
    the training rows is held out. The density model is fitted before epoch
    1, refitted every ``density_refit_every`` epochs and once more at the end.
    """
    cfg = model.config
    streams = streams or rng_streams(seed)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if x_val is None:
        tr_idx, va_idx = stratified_split(y, schedule.val_fraction, streams["data"])
        x_tr, y_tr, x_va, y_va = x[tr_idx], y[tr_idx], x[va_idx], y[va_idx]
    else:
        tr_idx, va_idx = np.arange(len(y)), np.zeros(0, dtype=int)
        x_tr, y_tr, x_va, y_va = x, y, np.asarray(x_val), np.asarray(y_val, dtype=int)

    n = len(y_tr)
    steps_per_epoch = max(1, math.ceil(n / schedule.batch_size))
    total_steps = steps_per_epoch * schedule.epochs
    params = model.parameters()
    optim = OptimState(lr=schedule.base_lr, weight_decay=schedule.weight_decay)
    history = []
    needs_density = cfg.uses_density or cfg.vos_active
    step = 0

    for epoch in range(schedule.epochs):
        if needs_density and epoch % schedule.density_refit_every == 0:
            model.fit_density(x_tr, y_tr, seed=int(streams["density"].integers(2**31)))
        order = streams["data"].permutation(n)
        sums = {k: 0.0 for k in ("loss_total", "loss_pred", "loss_kl", "loss_fi", "loss_ebm", "loss_unc")}
        skipped_before = optim.skipped
        for b in range(steps_per_epoch):
            idx = order[b * schedule.batch_size:(b + 1) * schedule.batch_size]
            optim.lr = cosine_lr(step, total_steps, schedule.base_lr)
            model.zero_grad()
            total, breakdown = model.objective(x_tr[idx], y_tr[idx], epoch=epoch, rng=streams["dropout"],
                                               vos_rng=streams["vos"])
            if not np.isfinite(breakdown.total):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch + 1}, step {step}",
                                       breakdown, epoch + 1, step)
            ad.backward(total)
            grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in params.values()]
            if all(np.all(np.isfinite(g)) for g in grads):
                clipped, _ = clip_global_norm(grads, schedule.max_grad_norm)
                for t, g in zip(params.values(), clipped):
                    t.grad = g
            optimizer_step(params, optim)
            for k, v in breakdown.as_row().items():
                sums[k] += v
            step += 1
        row = {"epoch": epoch + 1, "lr": optim.lr}
        row.update({k: v / steps_per_epoch for k, v in sums.items()})
        row["skipped_steps"] = optim.skipped - skipped_before
        row.update(_val_metrics(model, x_va, y_va))
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)

    if needs_density:
        model.fit_density(x_tr, y_tr, seed=int(streams["density"].integers(2**31)))
    calibrate_energy(model, x_tr)
    return FitResult(model, history, tr_idx, va_idx, total_steps, optim)


def calibrate_energy(model, x_train):
    """Fit the 1-99% energy calibration used by the energy OOD score."""
    diag = model.predict(x_train)
    gmm_e = None
    if model.density_ready:
        gmm_e = density.gmm_energy(model.gmm, model.features(x_train))
    logit_e = density.logit_energy(diag.logits.mean(axis=0))
    model.energy_calibration = density.select_energy_calibration(diag.E, gmm_e, logit_e)
    return model.energy_calibration


def _val_metrics(model, x_va, y_va):
    if len(y_va) == 0:
        return {"val_acc": float("nan"), "val_ece": float("nan")}
    p = model.predict(x_va).p_hat
    pred = p.argmax(axis=1)
    correct = pred == y_va
    return {"val_acc": float(correct.mean()), "val_ece": metrics.ece(p.max(axis=1), correct)}
