import numpy as np
import pytest

from gcr.errors import ValidationError
from gcr.families import family_moments, get_family, pearson_residual

# cumulant functions a(theta) and the map eta -> theta for each family
CUMULANT = {
    "gaussian": (lambda t: t**2 / 2, lambda e: e),
    "poisson": (np.exp, lambda e: e),
    "bernoulli": (lambda t: np.log1p(np.exp(t)), lambda e: e),
    "gamma": (lambda t: -np.log(-t), lambda e: -np.exp(-e)),
}


def _derivs(a, t, h=1e-4, h4=2e-2):
    """First, second and fourth derivative by central differences."""
    f = [a(t + k * h) for k in (-1, 0, 1)]
    d1 = (f[2] - f[0]) / (2 * h)
    d2 = (f[2] - 2 * f[1] + f[0]) / h**2

    def fourth(h):
        g = [a(t + k * h) for k in (-2, -1, 0, 1, 2)]
        return (g[4] - 4 * g[3] + 6 * g[2] - 4 * g[1] + g[0]) / h**4

    # Richardson step cancels the O(h^2) truncation term
    return d1, d2, (4 * fourth(h4 / 2) - fourth(h4)) / 3


@pytest.mark.parametrize("name", sorted(CUMULANT))
@pytest.mark.parametrize("eta", [-1.2, 0.0, 0.7])
def test_moments_are_cumulant_derivatives(name, eta):
    a, to_theta = CUMULANT[name]
    mb = family_moments(name, np.array([eta]))
    theta = to_theta(eta)
    d1, d2, d4 = _derivs(a, theta)
    assert mb.theta[0] == pytest.approx(theta, rel=1e-12)
    assert mb.mu[0] == pytest.approx(d1, rel=1e-5)
    assert mb.var_unit[0] == pytest.approx(d2, rel=1e-5)
    assert mb.kurt_ratio[0] == pytest.approx(d4 / d2**2, rel=1e-3, abs=1e-3)


@pytest.mark.parametrize("name", sorted(CUMULANT))
def test_dmu_deta_matches_finite_difference(name):
    eta = np.array([-0.4, 0.3])
    h = 1e-6
    fd = (family_moments(name, eta + h).mu - family_moments(name, eta - h).mu) / (2 * h)
    assert np.allclose(family_moments(name, eta).dmu_deta, fd, rtol=1e-7)


def test_bernoulli_clamps_extreme_predictors():
    mb = family_moments("bernoulli", np.array([-500.0, 500.0]))
    assert np.all(np.isfinite(mb.var_unit)) and np.all(mb.var_unit > 0)
    assert np.all(np.isfinite(mb.kurt_ratio))


def test_unknown_family_and_bad_phi():
    with pytest.raises(ValidationError):
        get_family("negbin")
    with pytest.raises(ValidationError):
        family_moments("gaussian", np.zeros(2), phi=0.0)
    with pytest.raises(ValidationError):
        family_moments("gaussian", np.array([np.inf]))


@pytest.mark.parametrize("name,y", [("bernoulli", [0, 2]), ("poisson", [1.5]),
                                    ("poisson", [-1]), ("gamma", [0.0])])
def test_response_validation(name, y):
    with pytest.raises(ValidationError):
        get_family(name).validate_response(np.array(y, float))


def test_pearson_residual_excludes_dispersion():
    r = pearson_residual("poisson", np.array([3.0]), np.array([np.log(2.0)]), phi=5.0)
    assert r[0] == pytest.approx(1 / np.sqrt(2))
