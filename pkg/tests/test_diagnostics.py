import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import small_dataset
from gcr.data import ClusteredDataset
from gcr.diagnostics import SubgroupSpec, standardized_residuals, subgroup_empirical_corr
from gcr.errors import DiagnosticError
from gcr.fitter import fit_designs
from gcr.formula import build_designs


def _dataset(seed, n=6):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 5, size=n)
    cid = np.repeat(np.arange(n), sizes)
    N = len(cid)
    cols = {
        "g": rng.integers(0, 3, size=N).astype(float),
        "h": rng.choice(["a", "b"], size=N).astype(object),
        "t": rng.integers(0, 4, size=N).astype(float),
    }
    ds = ClusteredDataset.from_columns(cid, np.zeros(N), cols)
    e = rng.standard_normal(N)
    return ds, [e[ds.cluster_slice(i)] for i in range(ds.n_clusters)]


def _qualifies(spec, ds, a, b, cl):
    if spec.scope == "within" and cl[a] != cl[b]:
        return False
    if spec.scope == "between" and cl[a] == cl[b]:
        return False
    for kind, col, val in spec.predicates:
        c = ds.columns[col]
        if kind == "same" and c[a] != c[b]:
            return False
        if kind == "botheq":
            v = float(val) if c.dtype.kind == "f" else val
            if not (c[a] == v and c[b] == v):
                return False
        if kind == "absdiff_eq" and abs(c[a] - c[b]) != val:
            return False
    return True


def _brute(spec, ds, res):
    e = np.concatenate(res)
    cl = ds.cluster_index()
    prods = np.array([e[a] * e[b] for a, b in itertools.combinations(range(len(e)), 2)
                      if _qualifies(spec, ds, a, b, cl)])
    return prods


SPECS = ["within", "between", "all", "within:same(g)", "between:same(h)",
         "all:botheq(h,a)", "within:absdiff_eq(t,1)", "between:absdiff_eq(t,2)&same(h)",
         "all:botheq(g,1)&absdiff_eq(t,0)"]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), which=st.sampled_from(SPECS))
def test_pair_sums_match_enumeration(seed, which):
    ds, res = _dataset(seed)
    spec = SubgroupSpec.parse(which)
    prods = _brute(spec, ds, res)
    if len(prods) == 0:
        with pytest.raises(DiagnosticError):
            subgroup_empirical_corr(res, ds, spec)
        return
    out = subgroup_empirical_corr(res, ds, spec)
    assert out.n_pairs == len(prods)
    assert out.rho_hat == pytest.approx(prods.mean(), abs=1e-12)
    if len(prods) > 2:
        t = stats.ttest_1samp(prods, 0.0)
        assert out.t_stat == pytest.approx(t.statistic, rel=1e-8)
        assert out.p_value == pytest.approx(t.pvalue, rel=1e-7, abs=1e-14)


def test_parse_grammar():
    s = SubgroupSpec.parse(" within : same(g) & botheq(h, a) ")
    assert s.scope == "within"
    assert s.predicates == (("same", "g", None), ("botheq", "h", "a"))
    for bad in ("across", "within:same(g,1)", "within:botheq(g)", "within:foo(g)",
                "within:absdiff_eq(t,x)", "within:absdiff_eq(t,-1)",
                "within:absdiff_eq(t,1)&absdiff_eq(g,1)"):
        with pytest.raises(DiagnosticError):
            SubgroupSpec.parse(bad)


def test_unknown_column_and_bad_residuals():
    ds, res = _dataset(1)
    with pytest.raises(DiagnosticError):
        subgroup_empirical_corr(res, ds, "within:same(zz)")
    with pytest.raises(DiagnosticError):
        subgroup_empirical_corr(res[:-1], ds, "within")
    with pytest.raises(DiagnosticError):
        subgroup_empirical_corr(res, ds, "within:absdiff_eq(h,1)")


def test_single_pair_and_constant_products():
    ds = ClusteredDataset.from_columns(["a", "a", "b"], [0, 0, 0], {"x": [1.0, 2.0, 3.0]})
    one = subgroup_empirical_corr([np.array([1.0, 2.0]), np.array([5.0])], ds, "within")
    assert one.n_pairs == 1 and one.rho_hat == 2.0 and one.p_value is None
    ds4 = ClusteredDataset.from_columns(["a"] * 3, [0] * 3, {"x": [1.0, 2.0, 3.0]})
    const = subgroup_empirical_corr([np.array([1.0, 1.0, 1.0])], ds4, "within")
    assert const.p_value == 0.0 and const.t_stat is None
    zero = subgroup_empirical_corr([np.zeros(3)], ds4, "within")
    assert zero.p_value == 1.0 and zero.t_stat == 0.0


def test_standardized_residuals_whiten_the_fitted_covariance():
    ds = small_dataset(np.random.default_rng(3), "gaussian", n=30, min_m=2)
    d = build_designs(ds, "x1 + g", "intercept")
    fit = fit_designs(d, "gaussian")
    res = standardized_residuals(fit, d)
    for i, e in enumerate(res):
        mu = d.X[i] @ fit.beta
        v = fit.phi * fit.per_cluster_R[i]
        assert np.isclose(e @ e, (d.y[i] - mu) @ np.linalg.solve(v, d.y[i] - mu))
    # symmetric root: identity correlation reduces to Pearson residuals
    fit.per_cluster_R = [np.eye(len(y)) for y in d.y]
    res = standardized_residuals(fit, d)
    assert np.allclose(res[0], (d.y[0] - d.X[0] @ fit.beta) / np.sqrt(fit.phi))


def test_result_dictionary():
    ds, res = _dataset(2)
    out = subgroup_empirical_corr(res, ds, "all").to_dict()
    assert set(out) == {"subgroup", "rho_hat", "n_pairs", "t", "p_value"}


def test_hand_enumerated_examples():
    ds = ClusteredDataset.from_columns(["a", "a", "b", "b", "c"], [0] * 5, {"x": [0.0] * 5})
    res = [np.array([1.0, 1.0]), np.array([1.0, -1.0]), np.array([2.0])]
    out = subgroup_empirical_corr(res, ds, "within")
    assert out.n_pairs == 2 and out.rho_hat == 0.0
    ds2 = ClusteredDataset.from_columns(["a", "a", "b"], [0] * 3, {"x": [0.0] * 3})
    one = subgroup_empirical_corr([np.array([1.0, 1.0]), np.array([-1.0])], ds2, "within")
    assert one.rho_hat == 1.0 and one.p_value is None
