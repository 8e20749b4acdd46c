"""Lack-of-fit checks from standardized residuals.

Standardized residuals ``V_i^{-1/2}(y_i - mu_i)`` are uncorrelated with unit
variance under a correct model.  Averaging products of residual pairs over a
subgroup of pairs (e.g. pairs in the same cluster that share a covariate
value) and t-testing the products against zero flags correlation the model
has missed.

Pair statistics are computed from per-group sums rather than by enumerating
pairs: for a group with residual sums ``s``, ``q = sum e^2`` and
``f = sum e^4`` the within-group pairs contribute ``(s^2 - q)/2`` to the sum
of products and ``(q^2 - f)/2`` to the sum of squared products.  This keeps
between-cluster subgroups (quadratic in N) exact and linear-time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import ClusteredDataset
from .errors import DiagnosticError
from .families import get_family
from .fitter import FitResult
from .formula import DesignBundle

_PRED = re.compile(r"^\s*(same|botheq|absdiff_eq)\s*\(\s*([^,()]+?)\s*(?:,\s*([^()]+?)\s*)?\)\s*$")


@dataclass(frozen=True)
class SubgroupSpec:
    """A set of observation pairs.

    ``scope`` is ``"within"`` (same cluster), ``"between"`` (different
    clusters) or ``"all"``; ``predicates`` are ``(kind, column, value)`` with
    kind ``same``, ``botheq`` or ``absdiff_eq``, all of which must hold.
    """

    name: str
    scope: str
    predicates: tuple = ()

    @classmethod
    def parse(cls, text: str) -> "SubgroupSpec":
        """Parse ``"within"``, ``"between:same(g)"``, ``"within:botheq(x,2)&same(g)"``."""
        raw = text.strip()
        scope, _, rest = raw.partition(":")
        scope = scope.strip()
        if scope not in ("within", "between", "all"):
            raise DiagnosticError(f"subgroup {text!r}: scope must be within, between or all")
        preds = []
        absdiff = 0
        for part in filter(None, (p.strip() for p in rest.split("&"))):
            m = _PRED.match(part)
            if not m:
                raise DiagnosticError(f"subgroup {text!r}: cannot parse {part!r}")
            kind, col, val = m.groups()
            if kind == "same" and val is not None:
                raise DiagnosticError(f"subgroup {text!r}: same() takes one column")
            if kind != "same" and val is None:
                raise DiagnosticError(f"subgroup {text!r}: {kind}() needs a value")
            if kind == "absdiff_eq":
                absdiff += 1
                try:
                    val = float(val)
                except ValueError:
                    raise DiagnosticError(f"subgroup {text!r}: absdiff_eq needs a number") from None
                if val < 0:
                    raise DiagnosticError(f"subgroup {text!r}: absdiff_eq needs k >= 0")
            preds.append((kind, col, val))
        if absdiff > 1:
            raise DiagnosticError(f"subgroup {text!r}: at most one absdiff_eq predicate")
        return cls(raw, scope, tuple(preds))


@dataclass(frozen=True)
class SubgroupResult:
    name: str
    rho_hat: float
    n_pairs: int
    t_stat: float | None
    p_value: float | None

    def to_dict(self) -> dict:
        return {"subgroup": self.name, "rho_hat": self.rho_hat, "n_pairs": self.n_pairs,
                "t": self.t_stat, "p_value": self.p_value}


def standardized_residuals(fit: FitResult, designs: DesignBundle) -> list:
    """Per-cluster ``V_i^{-1/2} (y_i - mu_i)`` with the symmetric inverse square root."""
    fam = get_family(fit.family)
    out = [None] * designs.n_clusters
    for m, (idx, y, X, W) in designs.batches().items():
        mb = fam.moments(X @ fit.beta)
        sd = np.sqrt(fit.phi * mb.var_unit)
        r = np.stack([fit.per_cluster_R[i] for i in idx])
        v = r * sd[:, :, None] * sd[:, None, :]
        w, q = np.linalg.eigh(v)
        if np.min(w) <= 0:
            raise DiagnosticError("fitted covariance is not positive definite")
        root = (q * (1.0 / np.sqrt(w))[:, None, :]) @ np.swapaxes(q, -1, -2)
        e = np.einsum("bij,bj->bi", root, y - mb.mu)
        for k, i in enumerate(idx):
            out[i] = e[k]
    return out


def _value_column(data: ClusteredDataset, col: str):
    if col not in data.columns:
        raise DiagnosticError(f"subgroup refers to unknown column {col!r}")
    return data.columns[col]


def _group_sums(keys, e):
    """Sums of e, e^2, e^4 and counts per distinct key (rows of ``keys``)."""
    if keys.shape[1] == 0:
        inv = np.zeros(len(e), dtype=int)
        n_groups = 1
    else:
        _, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        n_groups = int(inv.max()) + 1 if len(inv) else 0
    cnt = np.bincount(inv, minlength=n_groups).astype(float)
    s = np.bincount(inv, weights=e, minlength=n_groups)
    q = np.bincount(inv, weights=e**2, minlength=n_groups)
    f = np.bincount(inv, weights=e**4, minlength=n_groups)
    return inv, cnt, s, q, f


def _pair_stats(keys, e, shift=None):
    """(count, sum of products, sum of squared products) over qualifying pairs.

    Without ``shift`` a pair qualifies when its keys agree.  With
    ``shift = (values, k)`` (k > 0) it qualifies when the other keys agree
    and the values differ by exactly ``k``.
    """
    if shift is None:
        _, cnt, s, q, f = _group_sums(keys, e)
        return (float(np.sum(cnt * (cnt - 1) / 2)), float(np.sum((s**2 - q) / 2)),
                float(np.sum((q**2 - f) / 2)))
    values, k = shift
    full = np.column_stack([keys, values])
    uniq, inv = np.unique(full, axis=0, return_inverse=True)
    inv = inv.ravel()
    g = len(uniq)
    cnt = np.bincount(inv, minlength=g).astype(float)
    s = np.bincount(inv, weights=e, minlength=g)
    q = np.bincount(inv, weights=e**2, minlength=g)
    lookup = {tuple(row): i for i, row in enumerate(uniq)}
    n = s1 = s2 = 0.0
    for i, row in enumerate(uniq):
        partner = lookup.get(tuple(row[:-1]) + (row[-1] + k,))
        if partner is not None:
            n += cnt[i] * cnt[partner]
            s1 += s[i] * s[partner]
            s2 += q[i] * q[partner]
    return n, s1, s2


def _encode(col: np.ndarray) -> np.ndarray:
    if col.dtype.kind == "f":
        return col.astype(float)
    _, codes = np.unique(col.astype(str), return_inverse=True)
    return codes.astype(float)


def subgroup_empirical_corr(residuals, data: ClusteredDataset, spec) -> SubgroupResult:
    """Mean residual product over the pairs of a subgroup, with a one-sample t-test.

    Each unordered pair counts once.  The test uses the pair products as the
    sample (``n_pairs - 1`` degrees of freedom); with a single pair the
    p-value is ``None`` and with zero spread it is 1.
    """
    if isinstance(spec, str):
        spec = SubgroupSpec.parse(spec)
    e = np.concatenate([np.asarray(r, dtype=float) for r in residuals])
    if len(e) != data.n_obs:
        raise DiagnosticError("residuals do not match the dataset")
    keep = np.ones(len(e), dtype=bool)
    key_cols = []
    shift = None
    for kind, col, val in spec.predicates:
        c = _value_column(data, col)
        if kind == "botheq":
            if c.dtype.kind == "f":
                try:
                    keep &= c == float(val)
                except ValueError:
                    raise DiagnosticError(
                        f"subgroup {spec.name!r}: column {col!r} is numeric, got {val!r}"
                    ) from None
            else:
                keep &= c == str(val).strip("'\"")
        elif kind == "same":
            key_cols.append(_encode(c))
        else:
            if c.dtype.kind != "f":
                raise DiagnosticError(f"subgroup {spec.name!r}: absdiff_eq needs a numeric column")
            if val == 0:
                key_cols.append(c.astype(float))
            else:
                shift = (c.astype(float), float(val))
    if np.any(~np.isfinite(e)):
        raise DiagnosticError("residuals contain non-finite values")
    for col in key_cols:
        keep &= ~np.isnan(col)
    if shift is not None:
        keep &= ~np.isnan(shift[0])
    cluster = data.cluster_index().astype(float)
    base = np.column_stack(key_cols) if key_cols else np.empty((len(e), 0))
    base, ee, cl = base[keep], e[keep], cluster[keep]
    sh = None if shift is None else (shift[0][keep], shift[1])

    def stats_for(keys):
        return np.array(_pair_stats(keys, ee, sh))

    if spec.scope == "all":
        tot = stats_for(base)
    else:
        within = stats_for(np.column_stack([base, cl]))
        tot = within if spec.scope == "within" else stats_for(base) - within
    n, s1, s2 = float(tot[0]), float(tot[1]), float(tot[2])
    n_pairs = int(round(n))
    if n_pairs == 0:
        raise DiagnosticError(f"subgroup {spec.name!r} contains no pairs")
    mean = s1 / n
    if n_pairs == 1:
        return SubgroupResult(spec.name, mean, 1, None, None)
    var = max((s2 - n * mean**2) / (n - 1), 0.0)
    scale = max(s2 / n, 1e-300)
    if var <= 1e-14 * scale:
        t, p = (0.0, 1.0) if abs(mean) <= 1e-12 * np.sqrt(scale) else (None, 0.0)
        return SubgroupResult(spec.name, mean, n_pairs, t, p)
    t = mean / np.sqrt(var / n)
    p = float(2 * stats.t.sf(abs(t), df=n - 1))
    return SubgroupResult(spec.name, mean, n_pairs, float(t), p)
