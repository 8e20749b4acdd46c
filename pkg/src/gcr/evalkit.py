"""Prediction and estimation-error metrics, and repeated cluster-level cross-validation."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ClusteredDataset
from .errors import GCRError, ValidationError
from .families import get_family
from .fitter import FitConfig, fit_designs
from .formula import build_designs

log = logging.getLogger(__name__)

LOG_LOSS_CLIP = 1e-12


def _pair(y, p):
    y = np.asarray(y, dtype=float).ravel()
    p = np.asarray(p, dtype=float).ravel()
    if y.shape != p.shape:
        raise ValidationError(f"length mismatch: {y.size} outcomes, {p.size} predictions")
    if y.size == 0:
        raise ValidationError("no observations to score")
    return y, p


def brier_score(y, p) -> float:
    """Mean squared difference between 0/1 outcomes and predicted probabilities."""
    y, p = _pair(y, p)
    if np.any((p < 0) | (p > 1)):
        raise ValidationError("probabilities must lie in [0, 1]")
    return float(np.mean((y - p) ** 2))


def log_loss(y, p) -> float:
    """Mean negative Bernoulli log-likelihood, probabilities clipped to [1e-12, 1 - 1e-12]."""
    y, p = _pair(y, p)
    if np.any((p < 0) | (p > 1)):
        raise ValidationError("probabilities must lie in [0, 1]")
    p = np.clip(p, LOG_LOSS_CLIP, 1 - LOG_LOSS_CLIP)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def mae_counts(y, yhat) -> float:
    """Mean absolute error on the response scale."""
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def mmd_mcd(pairs) -> tuple[float, float]:
    """Average l2 error of cluster means and Frobenius error of cluster covariances.

    Parameters
    ----------
    pairs : iterable of (mu_hat, mu_true, sigma_hat, sigma_true)
    """
    mm, mc = [], []
    for mu_hat, mu0, s_hat, s0 in pairs:
        mu_hat, mu0 = np.asarray(mu_hat, float), np.asarray(mu0, float)
        s_hat, s0 = np.asarray(s_hat, float), np.asarray(s0, float)
        if mu_hat.shape != mu0.shape or s_hat.shape != s0.shape:
            raise ValidationError("estimated and true moments differ in shape")
        if s_hat.shape != (mu_hat.size, mu_hat.size):
            raise ValidationError("covariance shape does not match the mean")
        mm.append(np.linalg.norm(mu_hat - mu0))
        mc.append(np.linalg.norm(s_hat - s0, "fro"))
    if not mm:
        raise ValidationError("no clusters to compare")
    return float(np.mean(mm)), float(np.mean(mc))


def fitted_moments(fit, designs) -> tuple[list, list]:
    """Per-cluster fitted means and covariances ``A^{1/2} R A^{1/2}``."""
    fam = get_family(fit.family)
    mus, sigmas = [], []
    for i in range(designs.n_clusters):
        mb = fam.moments(designs.X[i] @ fit.beta)
        sd = np.sqrt(fit.phi * mb.var_unit)
        mus.append(mb.mu)
        sigmas.append(fit.per_cluster_R[i] * np.outer(sd, sd))
    return mus, sigmas


@dataclass(frozen=True)
class CVConfig:
    folds: int = 5
    repeats: int = 15
    stratify_col: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValidationError("need at least 2 folds")
        if self.repeats < 1:
            raise ValidationError("need at least 1 repeat")


@dataclass
class MetricReport:
    """Fold-level scores, shape ``(repeats, folds)`` per metric (nan for failed folds)."""

    metrics: tuple
    fold_scores: dict
    failures: list = field(default_factory=list)
    config: CVConfig | None = None

    @property
    def repeat_means(self) -> dict:
        return {m: np.nanmean(s, axis=1) for m, s in self.fold_scores.items()}

    @property
    def overall(self) -> dict:
        return {m: float(np.mean(v)) for m, v in self.repeat_means.items()}

    @property
    def n_fold_scores(self) -> int:
        first = self.fold_scores[self.metrics[0]]
        return int(np.sum(np.isfinite(first)))

    def to_dict(self) -> dict:
        return {
            "metrics": list(self.metrics),
            "overall": self.overall,
            "repeat_means": {m: v.tolist() for m, v in self.repeat_means.items()},
            "fold_scores": {m: s.tolist() for m, s in self.fold_scores.items()},
            "n_failed_folds": len(self.failures),
            "failures": self.failures,
            "log_loss_clip": LOG_LOSS_CLIP,
        }


def _fold_assignment(strata: np.ndarray, folds: int, rng) -> np.ndarray:
    """Random balanced fold labels for clusters, dealt out within each stratum."""
    labels = np.empty(len(strata), dtype=int)
    offset = 0
    for s in np.unique(strata):
        members = np.flatnonzero(strata == s)
        members = members[rng.permutation(len(members))]
        labels[members] = (offset + np.arange(len(members))) % folds
        offset += len(members)
    return labels


def _strata(data: ClusteredDataset, col: str | None) -> np.ndarray:
    if col is None:
        return np.zeros(data.n_clusters)
    if col not in data.columns:
        raise ValidationError(f"unknown stratification column {col!r}")
    values = data.columns[col][data.offsets[:-1]]
    return np.unique(values.astype(str), return_inverse=True)[1].ravel()


def _scores(family: str, y, mu) -> dict:
    if family == "bernoulli":
        return {"brier": brier_score(y, mu), "log_loss": log_loss(y, mu)}
    return {"mae": mae_counts(y, mu)}


def _fit_fold(designs, fam, train, fit_config):
    try:
        return fit_designs(designs.subset(train), fam, fit_config)
    except GCRError as exc:
        return exc


def repeated_cv(data: ClusteredDataset, mf, cf, family, cvcfg: CVConfig | None = None,
                fit_config: FitConfig | None = None, threads: int = 1) -> MetricReport:
    """Repeated k-fold cross-validation with whole clusters as the sampling unit.

    Designs are built once on the full data so factor levels agree across
    folds.  Held-out predictions are the fitted marginal means.  Repeat ``r``
    draws its fold labels from its own Philox stream, so reports depend only
    on the seed.  ``threads`` > 1 fits folds concurrently; results are
    assembled in (repeat, fold) order and do not depend on it.
    """
    cvcfg = cvcfg or CVConfig()
    fam = get_family(family)
    designs = build_designs(data, mf, cf)
    if data.n_clusters < cvcfg.folds:
        raise ValidationError(f"{data.n_clusters} clusters cannot fill {cvcfg.folds} folds")
    strata = _strata(data, cvcfg.stratify_col)
    metrics = ("brier", "log_loss") if fam.name == "bernoulli" else ("mae",)
    scores = {m: np.full((cvcfg.repeats, cvcfg.folds), np.nan) for m in metrics}
    failures = []
    streams = np.random.SeedSequence(int(cvcfg.seed)).spawn(cvcfg.repeats)
    jobs = []
    for r, ss in enumerate(streams):
        labels = _fold_assignment(strata, cvcfg.folds, np.random.Generator(np.random.Philox(ss)))
        for f in range(cvcfg.folds):
            jobs.append((r, f, np.flatnonzero(labels == f), np.flatnonzero(labels != f)))
    args = [(designs, fam, train, fit_config) for _, _, _, train in jobs]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                fits = list(pool.map(lambda a: _fit_fold(*a), args))
        else:
            fits = [_fit_fold(*a) for a in args]
    for (r, f, test, _), fit in zip(jobs, fits):
        if isinstance(fit, GCRError):
            failures.append({"repeat": r, "fold": f, "error": str(fit)})
            log.warning("repeat %d fold %d failed: %s", r, f, fit)
            continue
        y = np.concatenate([designs.y[i] for i in test])
        mu = fam.mean(np.concatenate([designs.X[i] for i in test]) @ fit.beta)
        for m, v in _scores(fam.name, y, mu).items():
            scores[m][r, f] = v
    if failures:
        warnings.warn(f"{len(failures)} fold fits failed and were excluded", stacklevel=2)
    return MetricReport(metrics, scores, failures, cvcfg)
