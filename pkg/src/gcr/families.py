"""Exponential-family marginals with canonical parameter ``theta = h(eta)``.

Each family supplies the cumulant derivatives the fitter needs: the mean
``a'(theta)``, the unit variance ``a''(theta)`` and the standardized fourth
cumulant ``a''''(theta) / a''(theta)**2``.  With dispersion ``phi`` the
marginal variance is ``phi * a''(theta)`` and the fourth moment of the
standardized response is ``3 + phi * kurt_ratio``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import NumericalError, ValidationError

ETA_CLAMP = 30.0
VAR_FLOOR = 1e-300


@dataclass(frozen=True)
class MomentBundle:
    theta: np.ndarray
    mu: np.ndarray
    var_unit: np.ndarray
    kurt_ratio: np.ndarray
    dmu_deta: np.ndarray


@dataclass(frozen=True)
class Family:
    """A canonical-link exponential family.

    Attributes
    ----------
    name : str
        One of ``"gaussian"``, ``"poisson"``, ``"bernoulli"``, ``"gamma"``.
    dispersion_known : bool
        True when ``phi`` is fixed at one (Poisson, Bernoulli).
    """

    name: str
    dispersion_known: bool

    def moments(self, eta) -> MomentBundle:
        eta = np.asarray(eta, dtype=float)
        if self.name == "gaussian":
            one = np.ones_like(eta)
            return MomentBundle(eta, eta, one, np.zeros_like(eta), one)
        if self.name == "poisson":
            mu = np.exp(eta)
            return MomentBundle(eta, mu, mu, 1.0 / mu, mu)
        if self.name == "bernoulli":
            theta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
            p = expit(theta)
            v = p * (1.0 - p)
            return MomentBundle(theta, p, v, (1.0 - 6.0 * v) / v, v)
        if self.name == "gamma":
            # theta = -exp(-eta) so that mu = -1/theta = exp(eta)
            mu = np.exp(eta)
            theta = -1.0 / mu
            v = mu**2
            return MomentBundle(theta, mu, v, np.full_like(eta, 6.0), mu)
        raise ValidationError(f"unknown family {self.name!r}")

    def mean(self, eta):
        return self.moments(eta).mu

    def validate_response(self, y) -> None:
        y = np.asarray(y, dtype=float)
        if self.name == "bernoulli" and not np.all((y == 0) | (y == 1)):
            raise ValidationError("bernoulli responses must be 0 or 1")
        if self.name == "poisson" and (np.any(y < 0) or np.any(y != np.floor(y))):
            raise ValidationError("poisson responses must be nonnegative integers")
        if self.name == "gamma" and np.any(y <= 0):
            raise ValidationError("gamma responses must be positive")


FAMILIES = {
    "gaussian": Family("gaussian", dispersion_known=False),
    "poisson": Family("poisson", dispersion_known=True),
    "bernoulli": Family("bernoulli", dispersion_known=True),
    "gamma": Family("gamma", dispersion_known=False),
}


def get_family(family) -> Family:
    if isinstance(family, Family):
        return family
    try:
        return FAMILIES[str(family).lower()]
    except KeyError:
        raise ValidationError(
            f"unknown family {family!r}; choose from {sorted(FAMILIES)}"
        ) from None


def family_moments(family, eta, phi: float = 1.0) -> MomentBundle:
    """Canonical parameter, mean, unit variance and kurtosis ratio at ``eta``."""
    fam = get_family(family)
    if not phi > 0:
        raise ValidationError("phi must be positive")
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise ValidationError("linear predictor must be finite")
    return fam.moments(eta)


def pearson_residual(family, y, eta, phi: float = 1.0):
    """``(y - mu) / sqrt(a''(theta))``; the dispersion is deliberately left out."""
    mb = family_moments(family, eta, phi)
    if np.any(mb.var_unit < VAR_FLOOR):
        raise NumericalError("unit variance underflow in Pearson residual")
    return (np.asarray(y, dtype=float) - mb.mu) / np.sqrt(mb.var_unit)
