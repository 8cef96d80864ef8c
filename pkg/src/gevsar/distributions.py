"""Generalized extreme value distribution and the lognormal nugget.

These are the two marginal families the field simulator and the likelihood
code are built on: GEV(mu, sigma, xi) for innovations, and a mean-one
lognormal whose variance is the nugget parameter tau^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .rng import polar_normal

# Below this |xi| the exact Gumbel branch is used: (.)**(-1/xi) loses all
# precision long before xi underflows.
XI_GUMBEL_THRESHOLD = 1e-9


@dataclass(frozen=True)
class GevParams:
    """Location / scale / shape triple of a GEV distribution."""

    mu: float
    sigma: float
    xi: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"GEV scale must be positive, got sigma={self.sigma}")

    @classmethod
    def innovation(cls, xi: float) -> "GevParams":
        """The GEV(1, xi, xi) family used for SAR innovations (xi > 0)."""
        if not xi > 0:
            raise DomainError(f"innovation shape must be positive, got xi={xi}")
        return cls(mu=1.0, sigma=float(xi), xi=float(xi))


@dataclass(frozen=True)
class NuggetSpec:
    """Mean-one lognormal nugget with variance tau2.

    The log-scale parameters are derived on construction:
    sigma_p2 = ln(1 + tau2) and mu_p = -sigma_p2 / 2, which make the
    implied mean exactly 1 and the implied variance exactly tau2.
    """

    tau2: float
    sigma_p2: float = field(init=False)
    mu_p: float = field(init=False)

    def __post_init__(self):
        if self.tau2 < 0:
            raise DomainError(f"nugget variance must be nonnegative, got tau2={self.tau2}")
        s2 = math.log1p(self.tau2)
        object.__setattr__(self, "sigma_p2", s2)
        object.__setattr__(self, "mu_p", -0.5 * s2)


def _as_float_array(t) -> tuple[np.ndarray, bool]:
    a = np.asarray(t, dtype=float)
    return np.atleast_1d(a), a.ndim == 0


def gev_cdf(t, p: GevParams):
    """GEV cumulative distribution function, total on the reals.

    Returns 0 below the lower support endpoint when xi > 0 and 1 above the
    upper endpoint when xi < 0. Accepts scalars or arrays.
    """
    x, scalar = _as_float_array(t)
    x = (x - p.mu) / p.sigma
    if abs(p.xi) < XI_GUMBEL_THRESHOLD:
        out = np.exp(-np.exp(-x))
    else:
        out = np.full(x.shape, 0.0 if p.xi > 0 else 1.0)
        inside = 1.0 + p.xi * x > 0
        # z**(-1/xi) computed as exp(-log1p(xi*x)/xi): stable down to tiny |xi|
        out[inside] = np.exp(-np.exp(-np.log1p(p.xi * x[inside]) / p.xi))
    return float(out[0]) if scalar else out


def gev_quantile(prob, p: GevParams):
    """Inverse of `gev_cdf` on (0, 1)."""
    q, scalar = _as_float_array(prob)
    if np.any((q <= 0.0) | (q >= 1.0)):
        raise DomainError("quantile probabilities must lie strictly in (0, 1)")
    loglog = np.log(-np.log(q))
    if abs(p.xi) < XI_GUMBEL_THRESHOLD:
        out = p.mu - p.sigma * loglog
    else:
        # ((-ln q)**(-xi) - 1) via expm1 to avoid cancellation for small xi
        out = p.mu + p.sigma / p.xi * np.expm1(-p.xi * loglog)
    return float(out[0]) if scalar else out


def gev_logpdf(t, p: GevParams):
    """Log density of the GEV distribution; -inf outside the support."""
    x, scalar = _as_float_array(t)
    x = (x - p.mu) / p.sigma
    logsigma = math.log(p.sigma)
    if abs(p.xi) < XI_GUMBEL_THRESHOLD:
        out = -x - np.exp(-x) - logsigma
    else:
        out = np.full(x.shape, -np.inf)
        inside = 1.0 + p.xi * x > 0
        lz = np.log1p(p.xi * x[inside])
        out[inside] = -logsigma - (1.0 + 1.0 / p.xi) * lz - np.exp(-lz / p.xi)
    return float(out[0]) if scalar else out


def gev_sample(p: GevParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-transform GEV sample of size n."""
    if n < 1:
        raise DomainError(f"sample size must be >= 1, got {n}")
    u = rng.random(n)
    return gev_quantile(u, p)


def nugget_sample(spec: NuggetSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample n positive nugget factors; exactly 1 when tau2 == 0."""
    if n < 1:
        raise DomainError(f"sample size must be >= 1, got {n}")
    if spec.tau2 == 0.0:
        return np.ones(n)
    z = polar_normal(rng, n)
    return np.exp(spec.mu_p + math.sqrt(spec.sigma_p2) * z)
