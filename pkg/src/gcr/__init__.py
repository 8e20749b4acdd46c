"""Regression models for within-cluster correlation in clustered data.

Marginal means follow a generalized linear model; the matrix logarithm of
each cluster's correlation matrix is linear in pair-level covariates.
"""

__version__ = "0.1.0"

from .corr_manifold import gz_inverse, gz_transform, jacobian_rho_gamma  # noqa: E402
from .data import ClusteredDataset, load_csv, write_csv  # noqa: E402
from .diagnostics import (  # noqa: E402
    SubgroupSpec,
    standardized_residuals,
    subgroup_empirical_corr,
)
from .errors import (  # noqa: E402
    FeasibilityError,
    GCRError,
    NumericalError,
    ValidationError,
)
from .evalkit import CVConfig, brier_score, log_loss, mmd_mcd, repeated_cv  # noqa: E402
from .families import family_moments, get_family  # noqa: E402
from .fitter import FitConfig, FitResult, fit_designs, fit_gcr  # noqa: E402
from .formula import build_designs  # noqa: E402
from .inference import param_covariances, wald_table  # noqa: E402
from .simgen import ScenarioSpec, make_scenario  # noqa: E402

__all__ = [
    "CVConfig", "ClusteredDataset", "FeasibilityError", "FitConfig", "FitResult",
    "GCRError", "NumericalError", "ScenarioSpec", "SubgroupSpec", "ValidationError",
    "brier_score", "build_designs", "family_moments", "fit_designs", "fit_gcr",
    "get_family", "gz_inverse", "gz_transform", "jacobian_rho_gamma", "load_csv",
    "log_loss", "make_scenario", "mmd_mcd", "param_covariances", "repeated_cv",
    "standardized_residuals", "subgroup_empirical_corr", "wald_table", "write_csv",
]
