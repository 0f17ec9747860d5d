"""Feature-space densities: GMM via EM, the rho scaler, DAEDL lambda, VOS sampling."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
DEFAULT_GAMMA = 1.2
LAMBDA_MIN = 0.1
_LOG_2PI = np.log(2.0 * np.pi)


class NotFittedError(RuntimeError):
    pass


@dataclass
class GmmModel:
    n_components: int
    weights: np.ndarray = None
    means: np.ndarray = None
    covariances: np.ndarray = None  # (K, d) diagonal or (K, d, d) full
    full: bool = False
    fitted: bool = False
    loglik_history: list = field(default_factory=list)
    n_reseeds: int = 0

    @property
    def dim(self):
        return self.means.shape[1]

    def component_log_density(self, z):
        """(N, K) matrix of log N(z | mu_k, Sigma_k)."""
        if not self.fitted:
            raise NotFittedError("GMM has not been fitted")
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        d = z.shape[1]
        out = np.empty((z.shape[0], self.n_components))
        for k in range(self.n_components):
            diff = z - self.means[k]
            if self.full:
                cov = self.covariances[k]
                chol = np.linalg.cholesky(cov)
                sol = np.linalg.solve(chol, diff.T)
                maha = (sol * sol).sum(axis=0)
                logdet = 2.0 * np.log(np.diag(chol)).sum()
            else:
                var = self.covariances[k]
                maha = (diff * diff / var).sum(axis=1)
                logdet = np.log(var).sum()
            out[:, k] = -0.5 * (d * _LOG_2PI + logdet + maha)
        return out

    def log_likelihood(self, z):
        """Per-row log p(z)."""
        return logsumexp(self.component_log_density(z) + np.log(self.weights), axis=1)

    def to_dict(self):
        return {
            "n_components": self.n_components,
            "full": self.full,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            n_components=int(d["n_components"]),
            weights=np.asarray(d["weights"], dtype=np.float64),
            means=np.asarray(d["means"], dtype=np.float64),
            covariances=np.asarray(d["covariances"], dtype=np.float64),
            full=bool(d["full"]),
            fitted=True,
        )


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _floor_full(cov, floor):
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


def gmm_fit(features, n_components, max_iters=100, tol=1e-6, seed=0, full=None,
            var_floor=VAR_FLOOR):
    """Fit a Gaussian mixture by EM.

    Covariances are full when the feature dim is <= 2 (unless ``full`` says
    otherwise) and diagonal above that. Eigenvalues / variances are floored at
    ``var_floor``, which is the constrained M-step, so the log-likelihood stays
    non-decreasing except across a re-seed of a dead component.
    """
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if n < 10 * n_components:
        raise ValueError(f"need at least {10 * n_components} rows for {n_components} components, got {n}")
    if full is None:
        full = d <= 2
    rng = np.random.default_rng(seed)
    model = GmmModel(n_components=n_components, full=full)
    model.means = _kmeanspp(x, n_components, rng)
    model.weights = np.full(n_components, 1.0 / n_components)
    global_var = np.maximum(x.var(axis=0), var_floor)
    if full:
        base = _floor_full(np.cov(x, rowvar=False).reshape(d, d), var_floor)
        model.covariances = np.repeat(base[None], n_components, axis=0)
    else:
        model.covariances = np.repeat(global_var[None], n_components, axis=0)
    model.fitted = True

    prev = -np.inf
    for _ in range(max_iters):
        weighted = model.component_log_density(x) + np.log(model.weights)
        norm = logsumexp(weighted, axis=1)
        ll = float(norm.mean())
        model.loglik_history.append(ll)
        resp = np.exp(weighted - norm[:, None])
        nk = resp.sum(axis=0)
        for k in range(n_components):
            if nk[k] < 1e-8 * n:
                model.means[k] = x[rng.integers(n)]
                model.covariances[k] = base if full else global_var
                nk[k] = 0.0
                model.n_reseeds += 1
                log.info("gmm_fit: re-seeded empty component %d", k)
                continue
            r = resp[:, k]
            mu = r @ x / nk[k]
            diff = x - mu
            if full:
                cov = (r[:, None] * diff).T @ diff / nk[k]
                model.covariances[k] = _floor_full(cov, var_floor)
            else:
                model.covariances[k] = np.maximum(r @ (diff * diff) / nk[k], var_floor)
            model.means[k] = mu
        nk = np.maximum(nk, 1e-12 * n)
        model.weights = nk / nk.sum()
        if ll - prev < tol:
            break
        prev = ll
    return model


def rho_score(model, z, gamma=DEFAULT_GAMMA):
    """sigmoid(log p(z)) ** gamma, computed in log space."""
    if model is None or not model.fitted:
        raise NotFittedError("rho_score needs a fitted GMM")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    lp = model.log_likelihood(z)
    return rho_from_loglik(lp, gamma)


def rho_from_loglik(loglik, gamma=DEFAULT_GAMMA):
    # log sigmoid(l) = -softplus(-l)
    log_rho = -gamma * np.logaddexp(0.0, -np.asarray(loglik, dtype=np.float64))
    return np.maximum(np.exp(log_rho), np.finfo(np.float64).tiny)


@dataclass
class DensityCalibration:
    q01: float
    q99: float

    def __post_init__(self):
        if self.q01 > self.q99:
            raise ValueError("q01 must not exceed q99")

    @classmethod
    def fit(cls, scores):
        q01, q99 = np.quantile(np.asarray(scores, dtype=np.float64), [0.01, 0.99])
        return cls(float(q01), float(q99))

    @property
    def span(self):
        return self.q99 - self.q01


def daedl_lambda(model, z, calib, lam_min=LAMBDA_MIN):
    """Quantile-affine map of log p(z) onto [lam_min, 1]."""
    lp = model.log_likelihood(z)
    return lambda_from_loglik(lp, calib, lam_min)


def lambda_from_loglik(loglik, calib, lam_min=LAMBDA_MIN):
    loglik = np.asarray(loglik, dtype=np.float64)
    if calib.span <= 0:
        log.warning("daedl_lambda: degenerate calibration range, using lambda = 1")
        return np.ones_like(loglik)
    t = np.clip((loglik - calib.q01) / calib.span, 0.0, 1.0)
    return lam_min + (1.0 - lam_min) * t


@dataclass
class ClassGaussians:
    means: np.ndarray
    variances: np.ndarray
    present: np.ndarray

    @classmethod
    def fit(cls, features, labels, n_classes, var_floor=VAR_FLOOR):
        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels)
        d = x.shape[1]
        means = np.zeros((n_classes, d))
        variances = np.ones((n_classes, d))
        present = np.zeros(n_classes, dtype=bool)
        for c in range(n_classes):
            xc = x[y == c]
            if len(xc) == 0:
                continue
            present[c] = True
            means[c] = xc.mean(axis=0)
            variances[c] = np.maximum(xc.var(axis=0), var_floor)
        return cls(means, variances, present)

    def mahalanobis(self, c, v):
        diff = v - self.means[c]
        return np.sqrt((diff * diff / self.variances[c]).sum(axis=1))

    def to_dict(self):
        return {"means": self.means.tolist(), "variances": self.variances.tolist(),
                "present": self.present.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["means"], dtype=np.float64),
                   np.asarray(d["variances"], dtype=np.float64),
                   np.asarray(d["present"], dtype=bool))


def vos_sample(gaussians, c, n, tail_quantile=0.95, rng=None, n_calibration=2000):
    """Virtual outliers for class ``c`` from the low-density tail of N(mu_c, Sigma_c).

    The Mahalanobis threshold is the ``tail_quantile`` of a held-out batch of
    draws; candidates below it are rejected.
    """
    if not (0 <= c < len(gaussians.present)) or not gaussians.present[c]:
        raise ValueError(f"class {c} was not seen when fitting the class Gaussians")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    mu = gaussians.means[c]
    sd = np.sqrt(gaussians.variances[c])
    d = mu.shape[0]
    if tail_quantile <= 0:
        return mu + sd * rng.standard_normal((n, d))
    calib = mu + sd * rng.standard_normal((n_calibration, d))
    threshold = np.quantile(gaussians.mahalanobis(c, calib), tail_quantile)
    kept = []
    total = 0
    batch = max(64, int(np.ceil(n / max(1e-3, 1.0 - tail_quantile) * 1.2)))
    while total < n:
        cand = mu + sd * rng.standard_normal((batch, d))
        sel = cand[gaussians.mahalanobis(c, cand) >= threshold]
        kept.append(sel)
        total += len(sel)
    return np.concatenate(kept, axis=0)[:n]


def vos_acceptance_rate(gaussians, c, n, tail_quantile, rng, n_calibration=2000):
    """Fraction of n raw draws that pass the tail filter (diagnostic)."""
    mu = gaussians.means[c]
    sd = np.sqrt(gaussians.variances[c])
    d = mu.shape[0]
    calib = mu + sd * rng.standard_normal((n_calibration, d))
    threshold = np.quantile(gaussians.mahalanobis(c, calib), tail_quantile)
    draws = mu + sd * rng.standard_normal((n, d))
    return float(np.mean(gaussians.mahalanobis(c, draws) >= threshold))


# ------------------------------------------------------------ energy scalar

def logit_energy(logits):
    """-log sum_c exp(u_c), row-wise."""
    return -logsumexp(np.asarray(logits, dtype=np.float64), axis=1)


def gmm_energy(model, z):
    """-log sum_k exp(log p(z | k))."""
    return -logsumexp(model.component_log_density(z), axis=1)


@dataclass
class EnergyCalibration:
    source: str  # "head", "gmm" or "logits"
    q01: float
    q99: float

    def to_dict(self):
        return {"source": self.source, "q01": self.q01, "q99": self.q99}

    @classmethod
    def from_dict(cls, d):
        return cls(d["source"], float(d["q01"]), float(d["q99"]))


def select_energy_calibration(head_energy, gmm_energy_values=None, logit_energy_values=None,
                              min_span=1e-6):
    """Pick the energy source with the wider 1-99% span; fall back to logit energy."""
    candidates = [("head", DensityCalibration.fit(head_energy))]
    if gmm_energy_values is not None:
        candidates.append(("gmm", DensityCalibration.fit(gmm_energy_values)))
    source, cal = max(candidates, key=lambda sc: sc[1].span)
    if cal.span < min_span and logit_energy_values is not None:
        source, cal = "logits", DensityCalibration.fit(logit_energy_values)
    return EnergyCalibration(source, cal.q01, cal.q99)


def energy_scalar(energies, calib):
    """Confidence s = clip(1 - (E - q01) / (q99 - q01), 0, 1); 1 means well supported."""
    e = np.asarray(energies, dtype=np.float64)
    span = calib.q99 - calib.q01
    if span <= 0:
        return np.where(e <= calib.q01, 1.0, 0.0)
    return np.clip(1.0 - (e - calib.q01) / span, 0.0, 1.0)
