"""Correlation matrices <-> unconstrained vectors via the matrix logarithm.

A correlation matrix ``R`` is mapped to ``gamma = vecl(log R)``, the strictly
lower-triangular entries of its matrix logarithm.  Every finite ``gamma``
corresponds to exactly one correlation matrix; the inverse map recovers it by
solving for the diagonal of ``log R`` with a fixed-point iteration.

``vecl`` order is column-major over the strictly lower triangle:
``(1,0), (2,0), ..., (m-1,0), (2,1), ...`` (zero-based row, column).  The
same order is used for pair covariates everywhere in the package.

All public functions accept single matrices.  The ``*_batch`` helpers operate
on stacks of equal-size matrices (leading batch axis) and are what the fitter
uses internally.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import DomainError, NumericalError, ValidationError

SYM_TOL = 1e-12
PD_TOL = 1e-12
DEGENERATE_EIG_TOL = 1e-10
FIXED_POINT_TOL = 1e-12
FIXED_POINT_MAXITER = 200


def n_pairs(m: int) -> int:
    return m * (m - 1) // 2


@lru_cache(maxsize=None)
def vecl_indices(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices of the strictly lower triangle in vecl order."""
    # triu in row-major order is the lower triangle in column-major order
    cols, rows = np.triu_indices(m, 1)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def dim_from_pairs(n: int) -> int:
    m = int(round((1 + np.sqrt(1 + 8 * n)) / 2))
    if n_pairs(m) != n:
        raise ValidationError(f"length {n} is not m(m-1)/2 for any integer m")
    return m


def vecl(a: np.ndarray) -> np.ndarray:
    """Strictly lower-triangular entries of ``a`` (last two axes) in vecl order."""
    a = np.asarray(a)
    r, c = vecl_indices(a.shape[-1])
    return a[..., r, c]


def vecl_inverse(v: np.ndarray, m: int | None = None, diag=0.0) -> np.ndarray:
    """Symmetric matrix with off-diagonal entries ``v`` and the given diagonal."""
    v = np.asarray(v, dtype=float)
    if m is None:
        m = dim_from_pairs(v.shape[-1])
    r, c = vecl_indices(m)
    out = np.zeros(v.shape[:-1] + (m, m))
    out[..., r, c] = v
    out[..., c, r] = v
    idx = np.arange(m)
    out[..., idx, idx] = diag
    return out


def _check_symmetric(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValidationError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("matrix has non-finite entries")
    asym = np.max(np.abs(a - np.swapaxes(a, -1, -2)), initial=0.0)
    if asym >= SYM_TOL:
        raise ValidationError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def sym_matrix_function(a: np.ndarray, which: str) -> np.ndarray:
    """Apply ``log``, ``exp`` or ``inv_sqrt`` to a symmetric matrix spectrally.

    Parameters
    ----------
    a : ndarray, shape (m, m)
        Symmetric matrix.  Must be positive definite for ``log`` and
        ``inv_sqrt``.
    which : {"log", "exp", "inv_sqrt"}

    Returns
    -------
    ndarray
        ``Q f(L) Q^T`` where ``a = Q L Q^T``.
    """
    funcs = {"log": np.log, "exp": np.exp, "inv_sqrt": lambda x: 1.0 / np.sqrt(x)}
    if which not in funcs:
        raise ValidationError(f"unknown matrix function {which!r}")
    a = _check_symmetric(a)
    w, q = np.linalg.eigh(a)
    if which != "exp" and np.min(w) <= PD_TOL:
        raise DomainError(
            f"matrix {which} needs a positive definite argument; "
            f"smallest eigenvalue is {np.min(w):.3g}"
        )
    out = (q * funcs[which](w)[..., None, :]) @ np.swapaxes(q, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def check_corr_matrix(r: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    r = _check_symmetric(r)
    d = np.diagonal(r, axis1=-2, axis2=-1)
    if np.max(np.abs(d - 1.0), initial=0.0) > tol:
        raise ValidationError("correlation matrix must have unit diagonal")
    if r.shape[-1] > 0 and np.min(np.linalg.eigvalsh(r)) <= 0:
        raise DomainError("correlation matrix is not positive definite")
    return r


def gz_transform(r: np.ndarray) -> np.ndarray:
    """``vecl(log R)`` for a correlation matrix ``R``."""
    r = check_corr_matrix(r)
    return vecl(sym_matrix_function(r, "log"))


def gz_inverse_batch(gamma: np.ndarray, m: int, tol: float = FIXED_POINT_TOL,
                     maxiter: int = FIXED_POINT_MAXITER, return_info: bool = False,
                     x0: np.ndarray | None = None, newton: bool = False):
    """Invert the transform for a stack of vectors of common size.

    Parameters
    ----------
    gamma : ndarray, shape (B, m(m-1)/2)
    m : int

    Returns
    -------
    R : ndarray, shape (B, m, m)
    info : dict, only if ``return_info``
        ``iterations``, the per-iteration ``residuals`` (max over the batch)
        and the final diagonal ``x`` of ``log R``.

    Notes
    -----
    ``x0`` warm-starts the diagonal; the fixed point is unique, so the
    result does not depend on it beyond the tolerance.  With ``newton=True``
    steps are taken with the exact derivative of ``diag(exp G[x])`` once the
    residual is below 0.1 (quadratic instead of linear convergence); the
    plain iteration is used otherwise and whenever a Newton step fails.
    """
    gamma = np.asarray(gamma, dtype=float)
    batch = gamma.shape[:-1]
    if m == 1:
        r = np.ones(batch + (1, 1))
        info = {"iterations": 0, "residuals": [0.0], "x": np.zeros(batch + (1,))}
        return (r, info) if return_info else r
    if not np.all(np.isfinite(gamma)):
        raise ValidationError("gamma has non-finite entries")
    g = vecl_inverse(gamma, m)
    idx = np.arange(m)
    x = np.zeros(batch + (m,)) if x0 is None else np.array(x0, dtype=float)
    residuals = []
    for it in range(maxiter + 1):
        g[..., idx, idx] = x
        w, q = np.linalg.eigh(g)
        e = (q * np.exp(w)[..., None, :]) @ np.swapaxes(q, -1, -2)
        d = e[..., idx, idx]
        res = float(np.max(np.abs(d - 1.0), initial=0.0))
        residuals.append(res)
        if res < tol:
            break
        if it == maxiter:
            raise NumericalError(
                f"fixed-point iteration did not converge in {maxiter} iterations "
                f"(residual {res:.3g})"
            )
        step = np.log(d)
        if newton and res < 0.1:
            step = _newton_diag_step(w, q, d)
        x = x - step
    s = 1.0 / np.sqrt(d)
    r = e * s[..., :, None] * s[..., None, :]
    r = 0.5 * (r + np.swapaxes(r, -1, -2))
    r[..., idx, idx] = 1.0
    if return_info:
        return r, {"iterations": it, "residuals": residuals, "x": x}
    return r


def _exp_frechet_weights(lam: np.ndarray) -> np.ndarray:
    """Divided differences of exp over eigenvalues (Daleckii-Krein weights)."""
    mu = np.exp(lam)
    diff = lam[..., :, None] - lam[..., None, :]
    close = np.abs(diff) < DEGENERATE_EIG_TOL
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = (mu[..., :, None] - mu[..., None, :]) / np.where(close, 1.0, diff)
    return np.where(close, np.broadcast_to(mu[..., :, None], diff.shape), xi)


def _diag_response(q: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """``d diag(exp G) / d diag(G)`` from the eigenvectors of G."""
    k = q[..., :, None, :] * q[..., None, :, :]
    return np.sum(k * (k @ np.swapaxes(xi, -1, -2)[..., None, :, :]), axis=-1)


def _newton_diag_step(w, q, d):
    jac = _diag_response(q, _exp_frechet_weights(w))
    try:
        step = np.linalg.solve(jac, (d - 1.0)[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return np.log(d)
    bad = ~np.all(np.isfinite(step), axis=-1)
    step[bad] = np.log(d[bad])
    return step


def gz_inverse(gamma: np.ndarray, return_info: bool = False):
    """Correlation matrix ``R`` with ``vecl(log R) == gamma``.

    The diagonal of ``log R`` is found by iterating
    ``x <- x - log diag(exp(G[x]))`` from ``x = 0``, where ``G[x]`` is the
    symmetric matrix with off-diagonal ``gamma`` and diagonal ``x``.
    """
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    if gamma.ndim != 1:
        raise ValidationError("gamma must be a vector")
    m = dim_from_pairs(gamma.shape[0]) if gamma.shape[0] else 1
    out = gz_inverse_batch(gamma[None, :], m, return_info=return_info)
    if return_info:
        return out[0][0], out[1]
    return out[0]


class _Spectral:
    """Spectral pieces of ``d vec(exp G) / d vec(G)`` at ``G = log R``."""

    def __init__(self, r: np.ndarray):
        mu, q = np.linalg.eigh(r)
        if np.min(mu) <= 0:
            raise DomainError("correlation matrix is not positive definite")
        self.xi = _exp_frechet_weights(np.log(mu))
        self.q = q
        self.qt = np.swapaxes(q, -1, -2)
        # E_d A E_d^T, the response of diag(R) to diagonal perturbations of G
        self.m_dd = _diag_response(q, self.xi)

    def apply(self, e: np.ndarray) -> np.ndarray:
        """Directional derivative of exp at G in direction ``e`` (stack of matrices)."""
        return self.q @ (self.xi * (self.qt @ e @ self.q)) @ self.qt


def jvp_batch(r: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Jacobian of vecl(R) w.r.t. gamma applied to direction vectors.

    Parameters
    ----------
    r : ndarray, shape (B, m, m)
        Correlation matrices.
    directions : ndarray, shape (B, m(m-1)/2, k)
        Columns are directions in gamma space (e.g. the columns of a pair
        covariate matrix W).

    Returns
    -------
    ndarray, shape (B, m(m-1)/2, k)
    """
    m = r.shape[-1]
    b = r.shape[0]
    k = directions.shape[-1]
    if m < 2:
        return np.zeros((b, 0, k))
    sp = _Spectral(r)
    ev = np.linalg.eigvalsh(sp.m_dd)
    with np.errstate(divide="ignore"):
        cond = np.where(ev[..., 0] > 0, ev[..., -1] / ev[..., 0], np.inf)
    if not np.all(np.isfinite(cond)) or np.max(cond) > 1e14:
        raise NumericalError(
            f"diagonal-response matrix is singular (condition {np.max(cond):.3g})"
        )
    rows, cols = vecl_indices(m)
    idx = np.arange(m)
    # one symmetric direction matrix per column: shape (B, k, m, m)
    e = vecl_inverse(np.swapaxes(directions, -1, -2), m)
    q = sp.q[:, None]
    qt = sp.qt[:, None]
    xi = sp.xi[:, None]
    ae = q @ (xi * (qt @ e @ q)) @ qt
    y = np.linalg.solve(sp.m_dd[:, None], ae[..., idx, idx][..., None])[..., 0]
    dy = np.zeros_like(e)
    dy[..., idx, idx] = y
    ad = q @ (xi * (qt @ dy @ q)) @ qt
    out = (ae - ad)[..., rows, cols]
    return np.swapaxes(out, -1, -2)


def jacobian_rho_gamma(r: np.ndarray) -> np.ndarray:
    """Jacobian ``d rho / d gamma`` of pairwise correlations, both in vecl order.

    Computed analytically from the spectral decomposition of ``R``: the
    derivative of the matrix exponential at ``log R`` followed by the
    projection that keeps the diagonal fixed at one.
    """
    r = check_corr_matrix(r)
    m = r.shape[-1]
    p = n_pairs(m)
    return jvp_batch(r[None], np.eye(p)[None])[0]
