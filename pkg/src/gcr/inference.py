"""Standard errors and Wald tests for fitted mean and correlation parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import corr_manifold as cm
from .errors import InferenceError
from .fitter import FitResult, _CorrPart, _MeanPart, _cluster_scores, _gee_parts, _score
from .families import get_family
from .formula import DesignBundle


@dataclass(frozen=True)
class Covariances:
    cov_beta: np.ndarray
    cov_alpha: np.ndarray

    @property
    def se_beta(self):
        return np.sqrt(np.diag(self.cov_beta))

    @property
    def se_alpha(self):
        return np.sqrt(np.diag(self.cov_alpha))


@dataclass(frozen=True)
class WaldRow:
    name: str
    estimate: float
    std_error: float
    z_stat: float
    p_value: float

    @property
    def stars(self) -> str:
        return significance_stars(self.p_value)

    def to_dict(self) -> dict:
        return {"name": self.name, "estimate": self.estimate, "std_error": self.std_error,
                "z": self.z_stat, "p_value": self.p_value, "stars": self.stars}


@dataclass(frozen=True)
class WaldTable:
    rows: tuple

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i):
        return self.rows[i]

    def to_dicts(self) -> list:
        return [r.to_dict() for r in self.rows]

    def format(self) -> str:
        lines = [f"{'':<28}{'estimate':>12}{'std.err':>12}{'z':>9}{'p':>11}"]
        for r in self.rows:
            lines.append(f"{r.name:<28}{r.estimate:>12.5g}{r.std_error:>12.4g}"
                         f"{r.z_stat:>9.3f}{r.p_value:>11.3g} {r.stars}")
        return "\n".join(lines)


def significance_stars(p: float) -> str:
    for cut, mark in ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, ".")):
        if p < cut:
            return mark
    return ""


def wald_p_value(z):
    """Two-sided normal p-value."""
    return 2.0 * ndtr(-np.abs(z))


def _parts(fit: FitResult, designs: DesignBundle, alpha=None):
    fam = get_family(fit.family)
    mp = _MeanPart(designs, fam, fit.beta, fit.phi)
    cp = _CorrPart(designs, fit.alpha if alpha is None else alpha)
    return mp, cp


def numerical_hessian(fit: FitResult, designs: DesignBundle, h=None) -> np.ndarray:
    """Symmetrized central differences of the correlation score at ``alpha_hat``.

    Column ``j`` is ``[S2(alpha + h_j e_j) - S2(alpha - h_j e_j)] / (2 h_j)``;
    the default step is ``h_j = 1e-5 * max(1, |alpha_j|)``.
    """
    d = designs.d
    alpha = np.asarray(fit.alpha, dtype=float)
    if h is None:
        steps = 1e-5 * np.maximum(1.0, np.abs(alpha))
    else:
        steps = np.broadcast_to(np.asarray(h, dtype=float), (d,)).copy()
    if np.any(steps <= 0):
        raise InferenceError("Hessian step must be positive")
    mp, _ = _parts(fit, designs)
    a = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = steps[j]
        up = _score(mp, _CorrPart(designs, alpha + e), d)
        dn = _score(mp, _CorrPart(designs, alpha - e), d)
        a[:, j] = (up - dn) / (2 * steps[j])
    a = 0.5 * (a + a.T)
    if not np.all(np.isfinite(a)):
        raise InferenceError("numerical Hessian has non-finite entries; try a larger step")
    return a


def _inverse(h, what):
    cond = np.linalg.cond(h)
    if not np.isfinite(cond) or cond > 1e14:
        raise InferenceError(f"{what} is singular (condition {cond:.3g})")
    inv = np.linalg.inv(h)
    return 0.5 * (inv + inv.T)


def _score_outer(mp: _MeanPart, cp: _CorrPart, designs: DesignBundle, fam) -> np.ndarray:
    """Sum of outer products of per-cluster correlation scores.

    When the dispersion is estimated, each cluster score is augmented by
    ``D * psi_i``, where ``D = dS2/dphi`` and ``psi_i`` is the cluster's
    influence on the Pearson dispersion estimate.  Without this the sandwich
    treats ``phi_hat`` as known and understates the variance of the
    correlation intercept.
    """
    d = designs.d
    scores = _cluster_scores(mp, cp, d)
    if fam.dispersion_known:
        return sum((s.T @ s for s in scores.values()), np.zeros((d, d)))
    phi = mp.phi
    n, p = designs.n_obs, designs.p
    # standardized residuals scale as phi^(-1/2), so S2 moves only via u u^T
    dscore = np.zeros(d)
    for m, s in scores.items():
        c, b = cp.batches[m], mp.batches[m]
        u = np.einsum("bij,bj->bi", c["Rinv"], b["nu"])
        dscore -= np.einsum("bpk,bp->k", c["JW"], cm.vecl(u[:, :, None] * u[:, None, :])) / phi
    h = np.zeros((d, d))
    for m, b in mp.batches.items():
        psi = (phi * np.sum(b["nu"] ** 2, axis=1) - m * phi * (n - p) / n) / (n - p)
        adj = psi[:, None] * dscore
        if m in scores:
            adj = adj + scores[m]
        h += adj.T @ adj
    return h


def param_covariances(fit: FitResult, designs: DesignBundle, h=None) -> Covariances:
    """Model-based ``H1^-1`` for beta; sandwich ``A^-1 H2 A^-1`` for alpha.

    ``A`` is the numerical Hessian of the pseudo-log-likelihood and ``H2``
    the sum of outer products of the per-cluster correlation scores, adjusted
    for the estimated dispersion where there is one.
    """
    mp, cp = _parts(fit, designs)
    _, h1 = _gee_parts(mp, cp if designs.d else None, designs.p)
    cov_beta = _inverse(h1, "mean information")
    if designs.d:
        ainv = _inverse(numerical_hessian(fit, designs, h), "correlation Hessian")
        cov_alpha = ainv @ _score_outer(mp, cp, designs, get_family(fit.family)) @ ainv
        cov_alpha = 0.5 * (cov_alpha + cov_alpha.T)
    else:
        cov_alpha = np.zeros((0, 0))
    return Covariances(cov_beta, cov_alpha)


def wald_table(fit: FitResult, covs: Covariances) -> WaldTable:
    """z statistics and two-sided normal p-values, mean parameters first."""
    names = [f"beta:{n}" for n in fit.mean_names] + [f"alpha:{n}" for n in fit.corr_names]
    est = np.concatenate([fit.beta, fit.alpha])
    var = np.concatenate([np.diag(covs.cov_beta), np.diag(covs.cov_alpha)])
    if np.any(~(var > 0)):
        bad = names[int(np.flatnonzero(~(var > 0))[0])]
        raise InferenceError(f"nonpositive variance for {bad}")
    se = np.sqrt(var)
    z = est / se
    p = wald_p_value(z)
    return WaldTable(tuple(WaldRow(n, float(e), float(s), float(zz), float(pp))
                           for n, e, s, zz, pp in zip(names, est, se, z, p)))
