"""Joint estimation of mean, correlation and dispersion parameters.

The mean coefficients ``beta`` solve the generalized estimating equations
with working covariance ``V_i = A_i^{1/2} R_i(alpha) A_i^{1/2}``; the
correlation coefficients ``alpha`` maximize a Gaussian pseudo-likelihood in
which ``vecl(log R_i) = W_i alpha``; the dispersion ``phi`` is the Pearson
moment estimator.  The three are updated in turn by a modified Fisher
scoring loop (:func:`fit_designs`).

All per-cluster work is done on stacks of equal-size clusters, and sums are
accumulated in a fixed order, so results are bit-reproducible.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import corr_manifold as cm
from .data import ClusteredDataset
from .errors import EstimationError, ValidationError
from .families import Family, get_family
from .formula import DesignBundle, build_designs

log = logging.getLogger(__name__)


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FitConfig:
    step_lambda: float = 0.5
    outer_max: int = 100
    inner_max: int = 50
    tol_outer: float = 1e-8
    tol_inner: float = 1e-8
    backtracking: bool = True
    max_halvings: int = 6
    freeze_alpha: bool = False
    alpha_init: tuple | None = None
    beta_init: tuple | None = None

    def __post_init__(self):
        if not 0 < self.step_lambda <= 1:
            raise ValidationError("step_lambda must lie in (0, 1]")
        if self.tol_outer <= 0 or self.tol_inner <= 0:
            raise ValidationError("tolerances must be positive")
        if self.outer_max < 1 or self.inner_max < 1:
            raise ValidationError("iteration limits must be at least 1")


@dataclass
class FitResult:
    beta: np.ndarray
    alpha: np.ndarray
    phi: float
    converged: bool
    outer_iters: int
    pl_trace: np.ndarray
    pl_segments: list
    per_cluster_R: list
    family: str
    mean_names: list
    corr_names: list
    inner_iters: int = 0
    notes: list = field(default_factory=list)

    @property
    def beta_hat(self):
        return self.beta

    @property
    def alpha_hat(self):
        return self.alpha

    @property
    def phi_hat(self):
        return self.phi


def rel_change(new, old) -> float:
    """Largest parameter change, relative to the old magnitude once it exceeds one."""
    new, old = np.asarray(new, float), np.asarray(old, float)
    if new.size == 0:
        return 0.0
    return float(np.max(np.abs(new - old) / np.maximum(np.abs(old), 1.0)))


# --------------------------------------------------------------------------
# per-batch building blocks
# --------------------------------------------------------------------------


class _MeanPart:
    """Quantities that depend on (beta, phi) only, per size batch."""

    def __init__(self, designs: DesignBundle, family: Family, beta, phi):
        self.phi = float(phi)
        self.batches = {}
        for m, (idx, y, X, W) in designs.batches().items():
            eta = X @ beta
            mb = family.moments(eta)
            sqrt_a = np.sqrt(self.phi * mb.var_unit)
            nu = (y - mb.mu) / sqrt_a
            self.batches[m] = dict(eta=eta, mu=mb.mu, nu=nu, sqrt_a=sqrt_a,
                                   dmu=mb.dmu_deta, kurt=mb.kurt_ratio, X=X, W=W, y=y)


class _CorrPart:
    """Quantities that depend on alpha only, per size batch."""

    def __init__(self, designs: DesignBundle, alpha, jac: bool = False,
                 warm: "_CorrPart | None" = None):
        self.alpha = np.asarray(alpha, dtype=float)
        self.batches = {}
        for m, (idx, y, X, W) in designs.batches().items():
            if m == 1:
                continue
            x0 = None if warm is None else warm.batches[m]["x"]
            r, info = cm.gz_inverse_batch(W @ self.alpha, m, return_info=True,
                                           x0=x0, newton=True)
            try:
                chol = np.linalg.cholesky(r)
            except np.linalg.LinAlgError:
                raise EstimationError("working correlation lost positive definiteness") from None
            logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
            rinv = np.linalg.inv(r)
            rinv = 0.5 * (rinv + np.swapaxes(rinv, -1, -2))
            self.batches[m] = dict(R=r, Rinv=rinv, logdet=logdet, W=W, x=info["x"])
        if jac:
            self.add_jacobian()

    def add_jacobian(self):
        for b in self.batches.values():
            if "JW" not in b:
                b["JW"] = cm.jvp_batch(b["R"], b["W"])

    def per_cluster_R(self, designs: DesignBundle) -> list:
        out = [None] * designs.n_clusters
        for m, (idx, *_rest) in designs.batches().items():
            if m == 1:
                for i in idx:
                    out[i] = np.ones((1, 1))
            else:
                for k, i in enumerate(idx):
                    out[i] = self.batches[m]["R"][k]
        return out


def _objective(mp: _MeanPart, cp: _CorrPart) -> float:
    total = 0.0
    for m, b in mp.batches.items():
        nu = b["nu"]
        if m == 1:
            total += -0.5 * float(np.sum(nu**2))
            continue
        c = cp.batches[m]
        quad = np.einsum("bi,bij,bj->b", nu, c["Rinv"], nu)
        total += -0.5 * float(np.sum(c["logdet"] + quad))
    return total


def _cluster_scores(mp: _MeanPart, cp: _CorrPart, d: int):
    """Per-batch score summands ``W_i^T (drho/dgamma)^T vecl(R^-1 Rhat R^-1 - R^-1)``."""
    cp.add_jacobian()
    out = {}
    for m, b in mp.batches.items():
        if m == 1:
            continue
        c = cp.batches[m]
        u = np.einsum("bij,bj->bi", c["Rinv"], b["nu"])
        g = cm.vecl(u[:, :, None] * u[:, None, :] - c["Rinv"])
        out[m] = np.einsum("bpk,bp->bk", c["JW"], g)
    return out


def _score(mp, cp, d):
    s = np.zeros(d)
    for v in _cluster_scores(mp, cp, d).values():
        s += v.sum(axis=0)
    return s


def _lower(jw: np.ndarray, m: int) -> np.ndarray:
    """(B, P, k) -> (B, k, m, m) with entries in the strictly lower triangle only."""
    r, c = cm.vecl_indices(m)
    out = np.zeros(jw.shape[:1] + jw.shape[2:] + (m, m))
    out[..., r, c] = np.swapaxes(jw, -1, -2)
    return out


def _info_pseudo(mp: _MeanPart, cp: _CorrPart, d: int, kurtosis: bool = True):
    """Sum over clusters of ``(J W)^T E~(J_i) (J W)`` without forming ``E~(J_i)``."""
    cp.add_jacobian()
    h = np.zeros((d, d))
    for m, b in mp.batches.items():
        if m == 1:
            continue
        c = cp.batches[m]
        a = c["Rinv"]
        low = _lower(c["JW"], m)                                  # (B,d,m,m)
        sym = low + np.swapaxes(low, -1, -2)
        asa = a[:, None] @ sym @ a[:, None]
        h += np.einsum("bkij,blij->kl", low, asa)
        if kurtosis and np.any(b["kurt"] != 0):
            w, q = np.linalg.eigh(c["R"])
            rih = (q * (1.0 / np.sqrt(w))[:, None, :]) @ np.swapaxes(q, -1, -2)
            dg = np.einsum("bti,bkij,btj->bkt", rih, low, rih)    # diag(b C b^T)
            h += mp.phi * np.einsum("bt,bkt,blt->kl", b["kurt"], dg, dg)
    return 0.5 * (h + h.T)


def _info_outer(mp, cp, d):
    h = np.zeros((d, d))
    for s in _cluster_scores(mp, cp, d).values():
        h += s.T @ s
    return h


def _gee_parts(mp: _MeanPart, cp: _CorrPart | None, p: int):
    s1 = np.zeros(p)
    h1 = np.zeros((p, p))
    for m, b in mp.batches.items():
        xt = (b["dmu"] / b["sqrt_a"])[:, :, None] * b["X"]
        if m == 1 or cp is None:
            rx, rn = xt, b["nu"]
        else:
            rinv = cp.batches[m]["Rinv"]
            rx = rinv @ xt
            rn = np.einsum("bij,bj->bi", rinv, b["nu"])
        s1 += np.einsum("bip,bi->p", xt, rn)
        h1 += np.einsum("bip,biq->pq", xt, rx)
    return s1, 0.5 * (h1 + h1.T)


def _solve(h, s, what):
    try:
        cond = np.linalg.cond(h)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError
        return np.linalg.solve(h, s)
    except np.linalg.LinAlgError:
        raise EstimationError(
            f"{what} information matrix is singular (condition {np.linalg.cond(h):.3g})"
        ) from None


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------


def _prep(designs, family, beta, alpha):
    fam = get_family(family)
    beta = np.asarray(beta, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if beta.shape != (designs.p,):
        raise ValidationError(f"beta must have length {designs.p}")
    if alpha.shape != (designs.d,):
        raise ValidationError(f"alpha must have length {designs.d}")
    return fam, beta, alpha


def estimate_phi(designs: DesignBundle, family, beta) -> float:
    """Pearson moment estimator ``sum r^2 / (N - p)``; 1 for known dispersion."""
    fam = get_family(family)
    if fam.dispersion_known:
        return 1.0
    n, p = designs.n_obs, designs.p
    if n <= p:
        raise EstimationError(f"need more observations than mean parameters (N={n}, p={p})")
    beta = np.asarray(beta, dtype=float)
    ss = 0.0
    for m, (idx, y, X, W) in designs.batches().items():
        mb = fam.moments(X @ beta)
        ss += float(np.sum((y - mb.mu) ** 2 / mb.var_unit))
    return ss / (n - p)


def gee_step(designs: DesignBundle, family, beta, alpha, phi, return_parts=False):
    """One Fisher-scoring update ``beta + H1^{-1} S1`` at fixed correlation."""
    fam, beta, alpha = _prep(designs, family, beta, alpha)
    mp = _MeanPart(designs, fam, beta, phi)
    cp = _CorrPart(designs, alpha) if designs.d else None
    s1, h1 = _gee_parts(mp, cp, designs.p)
    new = beta + _solve(h1, s1, "mean")
    if return_parts:
        return new, s1, h1
    return new


def pl_objective(designs: DesignBundle, family, beta, alpha, phi) -> float:
    """Gaussian pseudo-log-likelihood ``-1/2 sum(log|R_i| + nu_i^T R_i^-1 nu_i)``."""
    fam, beta, alpha = _prep(designs, family, beta, alpha)
    return _objective(_MeanPart(designs, fam, beta, phi), _CorrPart(designs, alpha))


def pl_score_S2(designs: DesignBundle, family, beta, alpha, phi) -> np.ndarray:
    """Gradient of :func:`pl_objective` with respect to ``alpha``."""
    fam, beta, alpha = _prep(designs, family, beta, alpha)
    mp = _MeanPart(designs, fam, beta, phi)
    return _score(mp, _CorrPart(designs, alpha), designs.d)


def pl_cluster_scores(designs: DesignBundle, family, beta, alpha, phi) -> np.ndarray:
    """Per-cluster score summands, shape ``(n_clusters, d)`` (zeros for singletons)."""
    fam, beta, alpha = _prep(designs, family, beta, alpha)
    mp = _MeanPart(designs, fam, beta, phi)
    out = np.zeros((designs.n_clusters, designs.d))
    for m, s in _cluster_scores(mp, _CorrPart(designs, alpha), designs.d).items():
        out[designs.batches()[m][0]] = s
    return out


def pl_info_H2(designs: DesignBundle, family, beta, alpha, phi,
               mode: str = "pseudo_expectation") -> np.ndarray:
    """Information for ``alpha``: empirical score outer product or pseudo-expectation."""
    fam, beta, alpha = _prep(designs, family, beta, alpha)
    mp = _MeanPart(designs, fam, beta, phi)
    cp = _CorrPart(designs, alpha)
    if mode == "outer_product":
        return _info_outer(mp, cp, designs.d)
    if mode == "pseudo_expectation":
        return _info_pseudo(mp, cp, designs.d)
    raise ValidationError(f"unknown information mode {mode!r}")


def pseudo_expectation_J(family, R, eta, phi: float = 1.0) -> np.ndarray:
    """Pseudo-expectation of ``eta eta^T`` for one cluster, ``eta`` the ρ-score.

    Entry for pairs ``(j,k)`` and ``(l,s)``::

        a_jl a_ks + a_js a_kl + phi * sum_t kurt_t b_tj b_ts b_tk b_tl

    with ``a = R^-1``, ``b = R^-1/2`` and ``kurt_t`` the family's
    ``a''''/a''^2`` at observation ``t``.
    """
    fam = get_family(family)
    R = cm.check_corr_matrix(R)
    m = R.shape[0]
    kurt = fam.moments(np.broadcast_to(np.asarray(eta, float), (m,))).kurt_ratio
    a = np.linalg.inv(R)
    a = 0.5 * (a + a.T)
    b = cm.sym_matrix_function(R, "inv_sqrt")
    j, k = cm.vecl_indices(m)
    out = (a[np.ix_(j, j)] * a[np.ix_(k, k)] + a[np.ix_(j, k)] * a[np.ix_(k, j)])
    f = b[:, j] * b[:, k]                                       # (t, pair)
    out = out + phi * (f.T * kurt) @ f
    return 0.5 * (out + out.T)


# --------------------------------------------------------------------------
# the estimation loop
# --------------------------------------------------------------------------


def independence_glm(designs: DesignBundle, family, beta0=None, tol=1e-12, maxiter=100):
    """Marginal GLM fit (working independence) by iterated scoring."""
    fam = get_family(family)
    beta = np.zeros(designs.p) if beta0 is None else np.asarray(beta0, float)
    if beta0 is None and fam.name in ("poisson", "gamma"):
        beta[0] = np.log(max(np.mean(np.concatenate(designs.y)), 1e-8))
    for _ in range(maxiter):
        mp = _MeanPart(designs, fam, beta, 1.0)
        s1, h1 = _gee_parts(mp, None, designs.p)
        new = beta + _solve(h1, s1, "mean")
        done = rel_change(new, beta) < tol
        beta = new
        if done:
            break
    return beta


def _alpha_step(designs, fam, mp, cp, cfg, notes):
    d = designs.d
    s2 = _score(mp, cp, d)
    h2 = _info_pseudo(mp, cp, d)
    try:
        np.linalg.cholesky(h2)
        step = np.linalg.solve(h2, s2)
        ok = float(step @ s2) >= 0
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        # fourth-cumulant correction made the information indefinite
        h2 = _info_pseudo(mp, cp, d, kurtosis=False)
        step = _solve(h2, s2, "correlation")
        if "kurtosis-free information used" not in notes:
            notes.append("kurtosis-free information used")
    return cfg.step_lambda * step


def fit_designs(designs: DesignBundle, family, config: FitConfig | None = None) -> FitResult:
    """Modified Fisher scoring: phi, then an inner alpha loop, then a beta step."""
    cfg = config or FitConfig()
    fam = get_family(family)
    for y in designs.y:
        fam.validate_response(y)
    d, p = designs.d, designs.p
    if designs.n_obs <= p:
        raise EstimationError(f"need more observations than mean parameters "
                              f"(N={designs.n_obs}, p={p})")
    beta = (np.asarray(cfg.beta_init, float) if cfg.beta_init is not None
            else independence_glm(designs, fam))
    alpha = np.asarray(cfg.alpha_init, float) if cfg.alpha_init is not None else np.zeros(d)
    if alpha.shape != (d,) or beta.shape != (p,):
        raise ValidationError("initial values have the wrong length")
    trace, segments, notes = [], [], []
    converged = False
    inner_total = 0
    phi = estimate_phi(designs, fam, beta)
    cp = _CorrPart(designs, alpha)
    for k in range(1, cfg.outer_max + 1):
        phi = estimate_phi(designs, fam, beta)
        mp = _MeanPart(designs, fam, beta, phi)
        alpha_prev = alpha.copy()
        if d and not cfg.freeze_alpha:
            segments.append(len(trace))
            obj = _objective(mp, cp)
            trace.append(obj)
            for _s in range(cfg.inner_max):
                inner_total += 1
                step = _alpha_step(designs, fam, mp, cp, cfg, notes)
                trial = alpha + step
                cp_trial = _CorrPart(designs, trial, warm=cp)
                obj_trial = _objective(mp, cp_trial)
                # differences below this are round-off in log|R| and the fixed point
                slack = 1e-11 * max(1.0, abs(obj))
                halvings = 0
                while (cfg.backtracking and obj_trial < obj - slack
                       and halvings < cfg.max_halvings):
                    step = step / 2
                    trial = alpha + step
                    cp_trial = _CorrPart(designs, trial, warm=cp)
                    obj_trial = _objective(mp, cp_trial)
                    halvings += 1
                if cfg.backtracking and obj_trial < obj - slack:
                    msg = f"accepted a non-ascent correlation step at outer iteration {k}"
                    warnings.warn(msg, ConvergenceWarning, stacklevel=2)
                    notes.append(msg)
                small = rel_change(trial, alpha) < cfg.tol_inner
                alpha, cp, obj = trial, cp_trial, obj_trial
                trace.append(obj)
                if small:
                    break
        s1, h1 = _gee_parts(mp, cp if d else None, p)
        beta_new = beta + _solve(h1, s1, "mean")
        change = max(rel_change(beta_new, beta), rel_change(alpha, alpha_prev))
        beta = beta_new
        log.debug("outer %d: change %.3g", k, change)
        if change < cfg.tol_outer:
            converged = True
            break
    if not converged:
        msg = f"no convergence after {cfg.outer_max} outer iterations"
        warnings.warn(msg, ConvergenceWarning, stacklevel=2)
        notes.append(msg)
    phi = estimate_phi(designs, fam, beta)
    return FitResult(
        beta=beta, alpha=alpha, phi=phi, converged=converged, outer_iters=k,
        pl_trace=np.array(trace), pl_segments=segments,
        per_cluster_R=cp.per_cluster_R(designs), family=fam.name,
        mean_names=list(designs.mean_names), corr_names=list(designs.corr_names),
        inner_iters=inner_total, notes=notes,
    )


def fit_gcr(data: ClusteredDataset, mf, cf, family, config: FitConfig | None = None):
    """Build designs from formulas and fit; returns ``(FitResult, DesignBundle)``."""
    designs = build_designs(data, mf, cf)
    return fit_designs(designs, family, config), designs
