"""Dirichlet evidence, predictive means, KL to Dir(1), entropy and MI.

Array functions operate row-wise on (N, C) inputs (a 1D vector is treated as
a single row). The ``*_t`` variants build the same quantities on the autodiff
tape for use inside losses.
"""

import math
from dataclasses import dataclass

import numpy as np

from gemkit import autodiff as ad
from gemkit.special import digamma, lgamma

EPS = 1e-8
TAU = 10.0


@dataclass(frozen=True)
class DirichletParams:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if np.any(~(a > 0)):
            raise ValueError("Dirichlet concentrations must be positive")
        object.__setattr__(self, "alpha", a)

    @property
    def alpha0(self):
        return self.alpha.sum(axis=-1)


def alpha_from_logits(u, tau=TAU, eps=EPS, rho=1.0):
    """alpha = rho * exp(clip(u, -tau, tau)) + eps."""
    if tau <= 0 or eps <= 0:
        raise ValueError("tau and eps must be positive")
    u = np.asarray(u, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    if u.ndim == 2 and rho.ndim == 1:
        rho = rho[:, None]
    return DirichletParams(rho * np.exp(np.clip(u, -tau, tau)) + eps)


def predictive_mean(params):
    a = params.alpha if isinstance(params, DirichletParams) else np.asarray(params, dtype=np.float64)
    return a / a.sum(axis=-1, keepdims=True)


def kl_to_uniform(params):
    """KL[Dir(alpha) || Dir(1)], row-wise, computed in log-gamma space."""
    a = params.alpha if isinstance(params, DirichletParams) else np.asarray(params, dtype=np.float64)
    if np.any(~(a > 0)):
        raise ValueError("kl_to_uniform needs alpha > 0")
    c = a.shape[-1]
    a0 = a.sum(axis=-1, keepdims=True)
    out = (lgamma(a0)[..., 0] - lgamma(a).sum(axis=-1) - math.lgamma(c)
           + ((a - 1.0) * (digamma(a) - digamma(a0))).sum(axis=-1))
    if np.ndim(out) == 0:
        return float(out)
    return out


def entropy(p):
    """Shannon entropy (nats) with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    out = -terms.sum(axis=-1)
    if np.ndim(out) == 0:
        return float(out)
    return out


def mutual_information(pi, head_probs):
    """H(sum_k pi_k p_k) - sum_k pi_k H(p_k).

    pi: (N, K) or (K,); head_probs: (K, N, C) or (K, C).
    """
    pi = np.asarray(pi, dtype=np.float64)
    hp = np.asarray(head_probs, dtype=np.float64)
    if pi.ndim == 1:
        pi = pi[None, :]
        hp = hp[:, None, :]
        squeeze = True
    else:
        squeeze = False
    mix = np.einsum("nk,knc->nc", pi, hp)
    head_h = np.stack([entropy(hp[k]) for k in range(hp.shape[0])], axis=1)
    mi = entropy(mix) - (pi * head_h).sum(axis=1)
    return float(mi[0]) if squeeze else mi


# ---------------------------------------------------------------- tape forms

def alpha_from_logits_t(u, rho=None, tau=TAU, eps=EPS):
    """Tape version; ``rho`` is an (N, 1) array treated as a constant."""
    ev = ad.exp(ad.clip(u, -tau, tau))
    if rho is not None:
        ev = ad.mul(ev, np.asarray(rho, dtype=np.float64).reshape(-1, 1))
    return ad.add(ev, eps)


def kl_to_uniform_t(alpha):
    """Row-wise KL to Dir(1) as an (N, 1) tensor."""
    c = alpha.shape[1]
    a0 = ad.sum(alpha, axis=1)
    term = ad.mul(ad.sub(alpha, 1.0), ad.sub(ad.digamma(alpha), ad.digamma(a0)))
    return ad.sub(ad.sub(ad.add(ad.lgamma(a0), ad.sum(term, axis=1)),
                         ad.sum(ad.lgamma(alpha), axis=1)), math.lgamma(c))


def entropy_t(p):
    """Row-wise entropy of strictly positive rows, (N, 1)."""
    return ad.neg(ad.sum(ad.mul(p, ad.log(p)), axis=1))
