import numpy as np
import pytest

from gcr.data import ClusteredDataset
from gcr.formula import build_designs


def random_corr(rng, m, df_extra=2):
    """Random correlation matrix from a normalized Wishart draw."""
    a = rng.standard_normal((m, m + df_extra))
    s = a @ a.T
    d = 1.0 / np.sqrt(np.diag(s))
    r = s * np.outer(d, d)
    np.fill_diagonal(r, 1.0)
    return 0.5 * (r + r.T)


def small_dataset(rng, family, n=8, max_m=5, min_m=1):
    """Clustered data with two covariates and a grouping column, any family."""
    sizes = rng.integers(min_m, max_m + 1, size=n)
    cid = np.repeat(np.arange(n), sizes)
    N = len(cid)
    x1 = rng.standard_normal(N)
    g = rng.integers(0, 2, size=N).astype(float)
    t = np.concatenate([np.arange(s) for s in sizes]).astype(float)
    eta = 0.3 + 0.4 * x1 - 0.3 * g
    if family == "gaussian":
        y = eta + rng.standard_normal(N)
    elif family == "poisson":
        y = rng.poisson(np.exp(eta)).astype(float)
    elif family == "bernoulli":
        y = (rng.uniform(size=N) < 1 / (1 + np.exp(-eta))).astype(float)
    else:
        y = rng.gamma(2.0, np.exp(eta) / 2.0)
    return ClusteredDataset.from_columns(
        [f"c{c}" for c in cid], y, {"x1": x1, "g": g, "t": t}
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def make_designs():
    def make(family, seed=0, n=8, max_m=5, corr="intercept + same(g) + absdiff(t)",
             mean="x1 + g", min_m=1):
        ds = small_dataset(np.random.default_rng(seed), family, n, max_m, min_m)
        return ds, build_designs(ds, mean, corr)
    return make


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
