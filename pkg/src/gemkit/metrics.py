"""Detection and calibration metrics.

Detection scores are oriented so that larger means "more likely positive";
for OOD tasks the positive class is OOD.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax
from scipy.stats import rankdata

from gemkit import density
from gemkit.dirichlet import entropy, mutual_information

ECE_BINS = 15


@dataclass
class ScoredEvalSet:
    scores: np.ndarray
    positives: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.positives = np.asarray(self.positives, dtype=bool).reshape(-1)
        if self.scores.shape != self.positives.shape:
            raise ValueError("scores and positives must have the same length")

    def check_both_classes(self):
        n_pos = int(self.positives.sum())
        if n_pos == 0 or n_pos == len(self.positives):
            raise ValueError("AUROC/AUPR need at least one positive and one negative")
        return n_pos


def _as_set(scores, positives=None):
    if isinstance(scores, ScoredEvalSet):
        return scores
    return ScoredEvalSet(scores, positives)


def auroc(scores, positives=None):
    """P(score_pos > score_neg) + 0.5 P(tie), from tie-averaged ranks."""
    s = _as_set(scores, positives)
    n_pos = s.check_both_classes()
    n_neg = len(s.scores) - n_pos
    ranks = rankdata(s.scores)
    return float((ranks[s.positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def aupr(scores, positives=None):
    """Step-interpolated area under precision-recall; tied scores form one threshold."""
    s = _as_set(scores, positives)
    n_pos = s.check_both_classes()
    order = np.argsort(-s.scores, kind="mergesort")
    sc = s.scores[order]
    pos = s.positives[order]
    tp = np.cumsum(pos)
    fp = np.cumsum(~pos)
    # last index of each block of equal scores
    ends = np.r_[np.flatnonzero(np.diff(sc) != 0), len(sc) - 1]
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class CalibrationReport:
    ece: float
    brier: float
    nll: float
    accuracy: float
    bins: list  # (lower, upper, mean confidence, accuracy, count)

    @property
    def brier_x100(self):
        return 100.0 * self.brier


def bin_index(confidences, n_bins=ECE_BINS):
    """Right-closed equal-width bins; 0 goes to the first bin, 1 to the last."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.searchsorted(edges, np.asarray(confidences, dtype=np.float64), side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


def ece_bins(confidences, correct, n_bins=ECE_BINS):
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    idx = bin_index(conf, n_bins)
    rows = []
    for b in range(n_bins):
        m = idx == b
        cnt = int(m.sum())
        rows.append((b / n_bins, (b + 1) / n_bins,
                     float(conf[m].mean()) if cnt else 0.0,
                     float(corr[m].mean()) if cnt else 0.0,
                     cnt))
    return rows


def ece(confidences, correct, n_bins=ECE_BINS):
    """sum_b (n_b / N) |acc_b - conf_b|; empty bins contribute nothing."""
    rows = ece_bins(confidences, correct, n_bins)
    n = sum(r[4] for r in rows)
    if n == 0:
        return 0.0
    return float(sum(cnt / n * abs(acc - conf) for _, _, conf, acc, cnt in rows))


def brier(probs, labels):
    """Multi-class Brier, summed over classes, averaged over samples (no 1/C)."""
    p = np.asarray(probs, dtype=np.float64)
    onehot = np.eye(p.shape[1])[np.asarray(labels, dtype=int)]
    return float(((p - onehot) ** 2).sum(axis=1).mean())


def nll(probs, labels, floor=1e-12):
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    return float(-np.log(p[np.arange(len(y)), y] + floor).mean())


def calibration_report(probs, labels, n_bins=ECE_BINS):
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    pred = p.argmax(axis=1)
    correct = pred == y
    conf = p.max(axis=1)
    return CalibrationReport(ece=ece(conf, correct, n_bins), brier=brier(p, y), nll=nll(p, y),
                             accuracy=float(correct.mean()), bins=ece_bins(conf, correct, n_bins))


def misclassification_aupr(probs, labels):
    """AUPR with correct predictions as positives and max probability as the score."""
    p = np.asarray(probs, dtype=np.float64)
    correct = p.argmax(axis=1) == np.asarray(labels, dtype=int)
    if correct.all() or not correct.any():
        return float("nan")
    return aupr(p.max(axis=1), correct)


# ------------------------------------------------------ uncertainty scores

SCORE_NAMES = ("maxp", "entropy", "alpha0", "mi", "energy")


@dataclass
class UncertaintyScores:
    maxp: np.ndarray
    entropy: np.ndarray
    alpha0: np.ndarray
    mi: np.ndarray
    energy: np.ndarray
    mi_is_zero: bool = False

    def as_dict(self):
        return {name: getattr(self, name) for name in SCORE_NAMES}

    @property
    def aleatoric(self):
        return self.maxp

    @property
    def epistemic(self):
        return self.alpha0 if self.mi_is_zero else self.mi


def uncertainty_scores(diag, energy_calibration=None, energy_values=None):
    """OOD-oriented per-sample scores (higher = more likely OOD).

    maxp and alpha0 are negated; energy is the negated energy confidence.
    MI is computed on the ungated mixture and is identically 0 for K = 1.
    """
    p_hat = diag.p_hat
    k = diag.n_heads
    if k == 1:
        mi = np.zeros(len(p_hat))
    else:
        mi = np.maximum(mutual_information(diag.pi, diag.head_probs), 0.0)
    if energy_values is None:
        source = None if energy_calibration is None else energy_calibration.source
        if source == "gmm":
            raise ValueError("GMM-calibrated energy needs energy_values (see GemModel.energy_values)")
        if source == "logits":
            energy_values = density.logit_energy(diag.logits.mean(axis=0))
        else:
            energy_values = diag.E
    if energy_calibration is None:
        energy_calibration = density.select_energy_calibration(energy_values)
    conf = density.energy_scalar(energy_values, energy_calibration)
    return UncertaintyScores(maxp=-p_hat.max(axis=1), entropy=entropy(p_hat), alpha0=-diag.alpha0_mix,
                             mi=mi, energy=-conf, mi_is_zero=(k == 1))


# ------------------------------------------------------ temperature scaling

def _nll_at(logits, labels, t):
    lp = log_softmax(logits / t, axis=1)
    return float(-lp[np.arange(len(labels)), labels].mean())


def fit_temperature(logits, labels, lo=0.1, hi=10.0, tol=1e-4):
    """Scalar T > 0 minimising NLL of softmax(logits / T) by golden-section on log T.

    Falls back to T = 1 if the search ends worse than no scaling.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise ValueError("temperature fitting needs a non-empty validation set")
    f = lambda lt: _nll_at(logits, labels, math.exp(lt))  # noqa: E731
    a, b = math.log(lo), math.log(hi)
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    t = math.exp((a + b) / 2.0)
    if _nll_at(logits, labels, t) > _nll_at(logits, labels, 1.0) + 1e-9:
        return 1.0
    return t


def apply_temperature(logits, t):
    lp = log_softmax(np.asarray(logits, dtype=np.float64) / t, axis=1)
    return np.exp(lp)
