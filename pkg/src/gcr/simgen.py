"""Correlated Gaussian, Poisson and Bernoulli clusters, and preset simulation designs.

Non-Gaussian responses use a latent multivariate normal: Bernoulli margins
threshold the latent variables, Poisson margins push them through the normal
CDF and the Poisson quantile function.  In both cases the latent correlation
of every pair is solved so that the observed responses attain the target
correlation.

Random numbers come from Philox streams, one child stream per cluster, so a
dataset is a pure function of ``(study, n_clusters, seed)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import ndtr, ndtri, pdtr

from . import corr_manifold as cm
from .data import ClusteredDataset
from .errors import FeasibilityError, ScenarioError, ValidationError

MAX_RETRIES = 1000
BISECT_TOL = 1e-10
POISSON_SERIES_TERMS = 160
POISSON_TAIL = 1e-15


def cluster_rngs(seed: int, n: int) -> list:
    """Independent Philox generators, one per cluster."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def _cholesky(sigma, what="covariance"):
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise FeasibilityError(f"{what} matrix is not positive definite") from None


def gen_gaussian_cluster(mu, sigma, rng, size=None) -> np.ndarray:
    """``mu + L z`` with ``L`` the Cholesky factor of ``sigma``."""
    mu = np.asarray(mu, dtype=float)
    L = _cholesky(np.asarray(sigma, dtype=float))
    shape = (len(mu),) if size is None else (size, len(mu))
    z = rng.standard_normal(shape)
    return mu + z @ L.T


# --------------------------------------------------------------------------
# bivariate normal CDF and tetrachoric matching
# --------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _legendre_01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 1.0 + x, w


def _bvn_upper(h, k, r):
    """P(X > h, Y > k) for standard bivariate normal with correlation r (Genz)."""
    out = np.empty_like(h)
    tp = 2 * np.pi
    ar = np.abs(r)
    for lo, hi, n in ((0.0, 0.3, 6), (0.3, 0.75, 12), (0.75, 1.0, 20)):
        sel = (ar >= lo) & (ar < hi) if hi < 1 else (ar >= lo)
        if not np.any(sel):
            continue
        x, w = _legendre_01(n)
        hh, kk, rr = h[sel], k[sel], r[sel]
        hk = hh * kk
        res = np.empty_like(hh)
        mid = np.abs(rr) < 0.925
        if np.any(mid):
            a, b, c, t = hh[mid], kk[mid], rr[mid], hk[mid]
            hs = (a * a + b * b) / 2
            asr = np.arcsin(c) / 2
            sn = np.sin(asr[:, None] * x)
            val = np.exp((sn * t[:, None] - hs[:, None]) / (1 - sn**2)) @ w
            res[mid] = val * asr / tp + ndtr(-a) * ndtr(-b)
        high = ~mid
        if np.any(high):
            a, b, c, t = hh[high], kk[high].copy(), rr[high], hk[high].copy()
            neg = c < 0
            b[neg] = -b[neg]
            t[neg] = -t[neg]
            bvn = np.zeros_like(a)
            inner = np.abs(c) < 1
            if np.any(inner):
                ai, bi, ti = a[inner], b[inner], t[inner]
                ci = c[inner]
                as_ = 1 - ci**2
                sa = np.sqrt(as_)
                bs = (ai - bi) ** 2
                asr = -(bs / as_ + ti) / 2
                cc = (4 - ti) / 8
                dd = (12 - ti) / 80
                v = np.where(asr > -100,
                             sa * np.exp(asr) * (1 - cc * (bs - as_) * (1 - dd * bs) / 3
                                                 + cc * dd * as_**2), 0.0)
                bb = np.sqrt(bs)
                sp = np.sqrt(tp) * ndtr(-bb / sa)
                v = np.where(ti > -100,
                             v - np.exp(-ti / 2) * sp * bb * (1 - cc * bs * (1 - dd * bs) / 3), v)
                half = sa / 2
                xs = (half[:, None] * x) ** 2
                asr2 = -(bs[:, None] / xs + ti[:, None]) / 2
                spx = 1 + cc[:, None] * xs * (1 + 5 * dd[:, None] * xs)
                rs = np.sqrt(1 - xs)
                ep = np.exp(-(ti[:, None] / 2) * xs / (1 + rs) ** 2) / rs
                terms = np.where(asr2 > -100, np.exp(asr2) * (spx - ep), 0.0)
                bvn[inner] = (half * (terms @ w) - v) / tp
            pos = c > 0
            bvn[pos] = bvn[pos] + ndtr(-np.maximum(a[pos], b[pos]))
            ng = ~pos
            ge = ng & (a >= b)
            bvn[ge] = -bvn[ge]
            lt = ng & (a < b)
            lval = np.where(a < 0, ndtr(b) - ndtr(a), ndtr(-a) - ndtr(-b))
            bvn[lt] = lval[lt] - bvn[lt]
            res[high] = bvn
        out[sel] = res
    return np.clip(out, 0.0, 1.0)


def bvn_cdf(h, k, rho):
    """P(Z1 <= h, Z2 <= k) for a standard bivariate normal with correlation ``rho``.

    Genz's adaptation of the Drezner-Wesolowsky method; absolute error is
    near double precision.  Arguments broadcast; infinite limits are allowed.
    """
    h, k, rho = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (h, k, rho)))
    if np.any(np.abs(rho) > 1):
        raise ValidationError("correlation must lie in [-1, 1]")
    shape = h.shape
    h, k, rho = (np.atleast_1d(a).ravel().copy() for a in (h, k, rho))
    out = np.empty_like(h)
    # bvn_cdf(h, k) = P(X > -h, Y > -k)
    uh, uk = -h, -k
    inf_h = np.isinf(uh)
    inf_k = np.isinf(uk)
    done = inf_h | inf_k
    out[(uh == np.inf) | (uk == np.inf)] = 0.0
    both = (uh == -np.inf) & (uk == -np.inf)
    out[both] = 1.0
    only_h = (uh == -np.inf) & np.isfinite(uk)
    out[only_h] = ndtr(-uk[only_h])
    only_k = (uk == -np.inf) & np.isfinite(uh)
    out[only_k] = ndtr(-uh[only_k])
    zero = ~done & (rho == 0)
    out[zero] = ndtr(-uh[zero]) * ndtr(-uk[zero])
    rest = ~done & ~zero
    if np.any(rest):
        out[rest] = _bvn_upper(uh[rest], uk[rest], rho[rest])
    return float(out[0]) if shape == () else out.reshape(shape)


def frechet_bounds(p1, p2):
    """Attainable correlation range of two Bernoulli variables with means p1, p2."""
    p1, p2 = np.asarray(p1, float), np.asarray(p2, float)
    s = np.sqrt(p1 * (1 - p1) * p2 * (1 - p2))
    lo = (np.maximum(0.0, p1 + p2 - 1) - p1 * p2) / s
    hi = (np.minimum(p1, p2) - p1 * p2) / s
    return lo, hi


def _bisect(f, target, lo, hi, tol):
    """Vectorized bisection for increasing ``f`` on [lo, hi]."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    while np.max(hi - lo, initial=0.0) > tol:
        mid = 0.5 * (lo + hi)
        below = f(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def bvn_pdf(h, k, rho):
    """Standard bivariate normal density; also d bvn_cdf / d rho."""
    h, k, rho = (np.asarray(a, dtype=float) for a in (h, k, rho))
    s = 1.0 - rho**2
    return np.exp(-(h * h - 2 * rho * h * k + k * k) / (2 * s)) / (2 * np.pi * np.sqrt(s))


def _newton_bracketed(f, fprime, target, lo, hi, tol, maxiter=200):
    """Newton's method for increasing ``f`` inside a shrinking bisection bracket.

    Every iterate tightens the bracket; a Newton step leaving it is replaced
    by the midpoint, so convergence is never worse than bisection.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    x = 0.5 * (lo + hi)
    for _ in range(maxiter):
        val = f(x) - target
        lo = np.where(val < 0, x, lo)
        hi = np.where(val < 0, hi, x)
        slope = fprime(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            nx = x - val / slope
        inside = np.isfinite(nx) & (nx >= lo) & (nx <= hi)
        nx = np.where(val == 0, x, np.where(inside, nx, 0.5 * (lo + hi)))
        step = np.abs(nx - x)
        x = nx
        if np.all((step < tol) | (hi - lo < tol)):
            break
    return x


def solve_tetrachoric(p1, p2, target_corr, tol: float = BISECT_TOL):
    """Latent normal correlation giving two thresholded Bernoullis the target correlation.

    Solves ``Phi2(Phi^-1(p1), Phi^-1(p2); delta) = p1 p2 + target * sqrt(p1 q1 p2 q2)``
    on ``delta`` in (-1, 1); the left side increases with ``delta`` and its
    derivative is the bivariate normal density, so Newton steps are taken
    inside a bisection bracket.
    """
    p1, p2, t = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (p1, p2, target_corr)))
    if np.any((p1 <= 0) | (p1 >= 1) | (p2 <= 0) | (p2 >= 1)):
        raise ValidationError("probabilities must lie strictly between 0 and 1")
    lo, hi = frechet_bounds(p1, p2)
    bad = (t < lo - 1e-12) | (t > hi + 1e-12)
    if np.any(bad):
        i = np.flatnonzero(bad.ravel())[0]
        raise FeasibilityError(
            f"target correlation {t.ravel()[i]:.4g} violates the Frechet bounds "
            f"[{lo.ravel()[i]:.4g}, {hi.ravel()[i]:.4g}] for p=({p1.ravel()[i]:.4g}, "
            f"{p2.ravel()[i]:.4g})"
        )
    a, b = ndtri(p1), ndtri(p2)
    joint = p1 * p2 + t * np.sqrt(p1 * (1 - p1) * p2 * (1 - p2))
    delta = _newton_bracketed(lambda d: bvn_cdf(a, b, d), lambda d: bvn_pdf(a, b, d), joint,
                              np.full(t.shape, -1.0), np.full(t.shape, 1.0), tol)
    delta = np.where(t == 0, 0.0, delta)
    return float(delta) if delta.ndim == 0 else delta


def _pairwise_targets(r):
    r = cm.check_corr_matrix(np.asarray(r, dtype=float))
    return r, cm.vecl(r)


def gen_bernoulli_cluster(p, r_target, rng, size=None, return_latent=False):
    """Binary vector with means ``p`` and correlation ``r_target`` (latent thresholding)."""
    p = np.asarray(p, dtype=float)
    r, rho = _pairwise_targets(r_target)
    m = len(p)
    j, k = cm.vecl_indices(m)
    delta = cm.vecl_inverse(np.atleast_1d(solve_tetrachoric(p[j], p[k], rho)), m, 1.0)
    L = _cholesky(delta, "latent correlation")
    shape = (m,) if size is None else (size, m)
    z = rng.standard_normal(shape) @ L.T
    y = (z <= ndtri(p)).astype(float)
    return (y, delta) if return_latent else y


# --------------------------------------------------------------------------
# Poisson matching
# --------------------------------------------------------------------------


def _poisson_thresholds(mu: float) -> np.ndarray:
    """Latent cut points: F^-1(Phi(z)) counts how many of these lie below z."""
    top = int(mu + 40 * np.sqrt(mu) + 40)
    cdf = pdtr(np.arange(top), mu)
    return ndtri(cdf[cdf < 1 - POISSON_TAIL])


def _hermite_coefs(mu, n_terms: int = POISSON_SERIES_TERMS) -> np.ndarray:
    """Rows ``c_n(mu)``, n = 1..N, with ``cov(X1, X2) = sum_n r^n c_n(mu1) c_n(mu2)``.

    For ``X = F^-1(Phi(Z))`` the coefficients are ``sum_k phi(t_k) h_{n-1}(t_k) / sqrt(n)``
    over the latent cut points ``t_k``, with ``h`` the orthonormal Hermite polynomials.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    top = int(np.max(mu + 40 * np.sqrt(mu) + 40))
    cdf = pdtr(np.arange(top)[None, :], mu[:, None])
    keep = cdf < 1 - POISSON_TAIL
    c = np.where(keep, ndtri(np.where(keep, cdf, 0.5)), 0.0)
    phi = np.where(keep, np.exp(-0.5 * c**2) / np.sqrt(2 * np.pi), 0.0)
    out = np.empty((len(mu), n_terms))
    h_prev = np.zeros_like(c)
    h = np.ones_like(c)
    for n in range(1, n_terms + 1):
        out[:, n - 1] = np.sum(phi * h, axis=1) / np.sqrt(n)
        h_prev, h = h, (c * h - np.sqrt(n - 1) * h_prev) / np.sqrt(n)
    return out


def poisson_latent_corr(mu1, mu2, r, n_terms: int = POISSON_SERIES_TERMS):
    """Correlation of ``F1^-1(Phi(Z1))`` and ``F2^-1(Phi(Z2))`` when corr(Z1, Z2) = r.

    Uses the Mehler expansion of the bivariate normal density, which is exact
    for the step-function integrand (truncated at ``n_terms``).
    """
    a, b = _hermite_coefs([float(mu1), float(mu2)], n_terms)
    r = np.asarray(r, dtype=float)
    powers = r[..., None] ** np.arange(1, n_terms + 1)
    return powers @ (a * b) / np.sqrt(float(mu1) * float(mu2))


def poisson_corr_bounds(mu1: float, mu2: float):
    """Extreme correlations of two Poisson variables (co- and counter-monotone couplings)."""
    u1 = ndtr(_poisson_thresholds(mu1))
    u2 = ndtr(_poisson_thresholds(mu2))
    s = np.sqrt(mu1 * mu2)
    # X = #{k: U > u1_k}; E[XY] sums P(U > u1_k, U > u2_l) or P(U > u1_k, 1 - U > u2_l)
    hi = np.sum(1 - np.maximum.outer(u1, u2))
    lo = np.sum(np.clip(1 - u1[:, None] - u2[None, :], 0, None))
    return float((lo - mu1 * mu2) / s), float((hi - mu1 * mu2) / s)


def _match_poisson_pairs(mu, j, k, target, tol):
    coefs = _hermite_coefs(mu)
    pair = coefs[j] * coefs[k] / np.sqrt(mu[j] * mu[k])[:, None]
    powers = np.arange(1, coefs.shape[1] + 1)
    f = lambda r: np.sum(r[:, None] ** powers * pair, axis=1)  # noqa: E731
    bound = np.full(len(target), 1.0 - 1e-9)
    lo, hi = f(-bound), f(bound)
    bad = ~((lo < target) & (target < hi))
    if np.any(bad):
        i = np.flatnonzero(bad)[0]
        raise FeasibilityError(
            f"target correlation {target[i]:.4g} is unattainable for Poisson means "
            f"({mu[j[i]]:.4g}, {mu[k[i]]:.4g}); attainable range about "
            f"({lo[i]:.4g}, {hi[i]:.4g})"
        )
    out = _bisect(f, target, -bound, bound, tol)
    return np.where(target == 0, 0.0, out)


def match_poisson_latent(mu1: float, mu2: float, target: float, tol: float = 1e-10) -> float:
    """Latent normal correlation giving two Poisson margins the target correlation."""
    mu = np.array([mu1, mu2], dtype=float)
    if np.any(mu <= 0):
        raise ValidationError("Poisson means must be positive")
    return float(_match_poisson_pairs(mu, np.array([0]), np.array([1]),
                                      np.array([float(target)]), tol)[0])


def gen_poisson_cluster(mu, r_target, rng, size=None, return_latent=False):
    """Counts with means ``mu`` and correlation ``r_target`` (NORTA)."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0):
        raise ValidationError("Poisson means must be positive")
    r, rho = _pairwise_targets(r_target)
    m = len(mu)
    j, k = cm.vecl_indices(m)
    lat = _match_poisson_pairs(mu, j, k, rho, 1e-10)
    delta = cm.vecl_inverse(lat, m, 1.0)
    L = _cholesky(delta, "latent correlation")
    shape = (m,) if size is None else (size, m)
    z = rng.standard_normal(shape) @ L.T
    # F^-1(Phi(z)) is the number of latent cut points below z
    y = np.empty(z.shape)
    for t in range(m):
        y[..., t] = np.searchsorted(_poisson_thresholds(mu[t]), z[..., t], side="left")
    return (y, delta) if return_latent else y


# --------------------------------------------------------------------------
# preset designs
# --------------------------------------------------------------------------

STUDIES = (
    "study1_gaussian", "study1_poisson", "study1_bernoulli",
    "study2_case1", "study2_case2", "study2_case3", "study2_case4",
)

SUGGESTED_CORR = {
    "study1_gaussian": "intercept + diff(u) + sqdiff(u)",
    "study1_poisson": "intercept + diff(u) + sqdiff(u)",
    "study1_bernoulli": "intercept + same(v)",
    "study2_case1": "intercept + same(u)",
    "study2_case2": "intercept + same(u) + absdiff(x1) + absdiff(x2) + absdiff(v)",
    "study2_case3": "intercept + absdiff(index)",
    "study2_case4": "intercept + absdiff(index) + absdiff(x1) + absdiff(x2) + absdiff(v)",
}

BETA0 = (1.0, -0.5, 0.5)
ALPHA0 = {
    "study1_gaussian": (0.2, -0.2, 0.3),
    "study1_poisson": (0.2, -0.2, 0.3),
    "study1_bernoulli": (0.05, 0.15),
}
RULES = {
    "study2_case1": "0.05 + 0.15*1(u_j=u_k=0) + 0.2*1(u_j=u_k=1)",
    "study2_case2": "0.05 + 0.15*1(u_j=u_k=0) + 0.2*1(u_j=u_k=1)"
                    " - 0.05|x1_j-x1_k| - 0.05|x2_j-x2_k| - 0.05|v_j-v_k|",
    "study2_case3": "0.4*0.6^|j-k|",
    "study2_case4": "0.4*0.6^|j-k| - 0.05|x1_j-x1_k| - 0.05|x2_j-x2_k| - 0.05|v_j-v_k|",
}


@dataclass(frozen=True)
class ScenarioSpec:
    study: str
    n_clusters: int
    seed: int = 0

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ScenarioError(f"unknown study {self.study!r}; choose from {list(STUDIES)}")
        if int(self.n_clusters) < 1:
            raise ScenarioError("n_clusters must be at least 1")

    @property
    def family(self) -> str:
        if self.study == "study1_gaussian":
            return "gaussian"
        return "poisson" if self.study == "study1_poisson" else "bernoulli"


@dataclass
class GeneratedData:
    dataset: ClusteredDataset
    mu0: list
    sigma0: list
    corr0: list
    spec: ScenarioSpec
    params: dict = field(default_factory=dict)

    @property
    def family(self) -> str:
        return self.spec.family

    @property
    def mean_formula(self) -> str:
        return "x1 + x2"

    @property
    def corr_formula(self) -> str:
        return SUGGESTED_CORR[self.spec.study]


def _raw_corr(study, x, u, v, idx):
    j, k = cm.vecl_indices(len(u))
    if study in ("study2_case1", "study2_case2"):
        rho = 0.05 + 0.15 * ((u[j] == 0) & (u[k] == 0)) + 0.2 * ((u[j] == 1) & (u[k] == 1))
    else:
        rho = 0.4 * 0.6 ** np.abs(idx[j] - idx[k])
    if study in ("study2_case2", "study2_case4"):
        rho = rho - 0.05 * (np.abs(x[j, 0] - x[k, 0]) + np.abs(x[j, 1] - x[k, 1])
                            + np.abs(v[j] - v[k]))
    return rho


_X_CHOL = np.linalg.cholesky(np.array([[1.0, 0.5], [0.5, 1.0]]))


def _draw_cluster(study, rng):
    study1 = study.startswith("study1")
    m = int(rng.binomial(6, 0.8) + 1) if study1 else int(rng.binomial(5, 0.8) + 2)
    x = rng.standard_normal((m, 2)) @ _X_CHOL.T
    if study1:
        u = rng.uniform(size=m)
        v = rng.binomial(1, 0.5, size=m).astype(float)
    else:
        u = rng.binomial(1, 0.5, size=m).astype(float)
        v = rng.binomial(4, 0.5, size=m).astype(float)
    idx = np.arange(1, m + 1, dtype=float)
    eta = BETA0[0] + x @ np.array(BETA0[1:])
    j, k = cm.vecl_indices(m)
    if study in ("study1_gaussian", "study1_poisson"):
        du = u[j] - u[k]
        gamma = np.column_stack([np.ones_like(du), du, du**2]) @ np.array(ALPHA0[study])
        r = cm.gz_inverse(gamma) if m > 1 else np.ones((1, 1))
    elif study == "study1_bernoulli":
        same = (v[j] == v[k]).astype(float)
        gamma = np.column_stack([np.ones_like(same), same]) @ np.array(ALPHA0[study])
        r = cm.gz_inverse(gamma) if m > 1 else np.ones((1, 1))
    else:
        r = cm.vecl_inverse(_raw_corr(study, x, u, v, idx), m, 1.0)
        if np.min(np.linalg.eigvalsh(r)) <= 0:
            raise FeasibilityError("target correlation matrix is not positive definite")
    if study == "study1_gaussian":
        mu = eta
        var = np.ones(m)
        y = gen_gaussian_cluster(mu, r, rng)
    elif study == "study1_poisson":
        mu = np.exp(eta)
        var = mu
        y = gen_poisson_cluster(mu, r, rng)
    else:
        mu = 1.0 / (1.0 + np.exp(-eta))
        var = mu * (1 - mu)
        y = gen_bernoulli_cluster(mu, r, rng)
    sd = np.sqrt(var)
    return dict(x=x, u=u, v=v, idx=idx, y=y, mu=mu, r=r, sigma=r * np.outer(sd, sd))


def make_scenario(spec: ScenarioSpec) -> GeneratedData:
    """Simulate one dataset of a preset design together with its true moments.

    Clusters whose target is infeasible (non-PD, outside the Frechet bounds
    or unattainable for the margins) are redrawn whole from the same stream,
    at most ``MAX_RETRIES`` times.
    """
    n = int(spec.n_clusters)
    clusters = []
    for i, rng in enumerate(cluster_rngs(spec.seed, n)):
        for _attempt in range(MAX_RETRIES):
            try:
                clusters.append(_draw_cluster(spec.study, rng))
                break
            except FeasibilityError:
                continue
        else:
            raise ScenarioError(f"cluster {i + 1}: no feasible draw in {MAX_RETRIES} attempts")
    ids = np.concatenate([[str(i + 1)] * len(c["y"]) for i, c in enumerate(clusters)])
    cat = lambda key: np.concatenate([c[key] for c in clusters])  # noqa: E731
    x = np.concatenate([c["x"] for c in clusters])
    y = cat("y")
    columns = {"y": y, "x1": x[:, 0], "x2": x[:, 1], "u": cat("u"), "v": cat("v"),
               "index": cat("idx")}
    ds = ClusteredDataset.from_columns(ids, y, columns, response_name="y", cluster_name="id")
    params = {"beta0": list(BETA0), "phi0": 1.0, "family": spec.family,
              "mean_formula": "x1 + x2", "corr_formula": SUGGESTED_CORR[spec.study]}
    if spec.study in ALPHA0:
        params["alpha0"] = list(ALPHA0[spec.study])
    else:
        params["corr_rule"] = RULES[spec.study]
    return GeneratedData(
        dataset=ds,
        mu0=[c["mu"] for c in clusters],
        sigma0=[c["sigma"] for c in clusters],
        corr0=[c["r"] for c in clusters],
        spec=spec,
        params=params,
    )
