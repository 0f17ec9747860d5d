"""Log-gamma, digamma and trigamma for positive real arrays.

Vectorised over numpy arrays; no scipy dependency so the autodiff engine can
differentiate through them with exact local derivatives.
"""

import numpy as np

# Lanczos approximation, g = 7, n = 9.
_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

# Bernoulli numbers B_2, B_4, ..., B_14 for the asymptotic series.
_BERNOULLI = np.array([
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
])
_ASYMPTOTIC_CUTOFF = 6.0


def _check_domain(x, name):
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x > 0)):
        raise ValueError(f"{name} is only defined for x > 0 here; got min {np.nanmin(x)!r}")
    return x


def _lanczos_lgamma(x):
    # valid for x >= 0.5
    xm = x - 1.0
    acc = np.full_like(xm, _LANCZOS_COEF[0])
    for i in range(1, len(_LANCZOS_COEF)):
        acc = acc + _LANCZOS_COEF[i] / (xm + i)
    t = xm + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (xm + 0.5) * np.log(t) - t + np.log(acc)


def lgamma(x):
    """Natural log of the gamma function for x > 0."""
    x = _check_domain(x, "lgamma")
    out = np.empty_like(x)
    big = x >= 0.5
    out[big] = _lanczos_lgamma(x[big])
    small = ~big
    if np.any(small):
        # Gamma(x) = Gamma(x + 1) / x keeps the Lanczos sum in its accurate range
        xs = x[small]
        out[small] = _lanczos_lgamma(xs + 1.0) - np.log(xs)
    if out.ndim == 0:
        return float(out)
    return out


def digamma(x):
    """psi(x) via upward recurrence to x >= 6 and the asymptotic series."""
    x = _check_domain(x, "digamma")
    x = np.array(x, dtype=np.float64, copy=True)
    acc = np.zeros_like(x)
    while True:
        low = x < _ASYMPTOTIC_CUTOFF
        if not np.any(low):
            break
        acc[low] -= 1.0 / x[low]
        x[low] += 1.0
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    power = inv2.copy()
    for n, b in enumerate(_BERNOULLI, start=1):
        series += b / (2 * n) * power
        power = power * inv2
    out = acc + np.log(x) - 0.5 / x - series
    if out.ndim == 0:
        return float(out)
    return out


def trigamma(x):
    """psi'(x); same recurrence/asymptotic scheme as :func:`digamma`."""
    x = _check_domain(x, "trigamma")
    x = np.array(x, dtype=np.float64, copy=True)
    acc = np.zeros_like(x)
    while True:
        low = x < _ASYMPTOTIC_CUTOFF
        if not np.any(low):
            break
        acc[low] += 1.0 / (x[low] * x[low])
        x[low] += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = np.zeros_like(x)
    power = inv2 * inv
    for b in _BERNOULLI:
        series += b * power
        power = power * inv2
    out = acc + inv + 0.5 * inv2 + series
    if out.ndim == 0:
        return float(out)
    return out
