"""Mean and pair-covariate formulas and the design matrices they expand to.

Mean formulas::

    term ("+" term)*        term := factor (":" factor)*
    factor := ident | "C(" ident ")"

An intercept is always included.  ``C(x)`` (or a bare non-numeric column)
expands to indicators for every level except the smallest, which is the
baseline.  ``a:b`` is the elementwise product of the two expansions.

Correlation formulas list pair covariates, each producing one column of W::

    intercept            1
    same(c)              1(c_j == c_k)
    botheq(c, v)         1(c_j == c_k == v)
    diff(c)              c_j - c_k           (j > k, vecl order)
    absdiff(c)           |c_j - c_k|
    sqdiff(c)            (c_j - c_k)**2
    logabsdiff(c)        log|c_j - c_k|

The intercept is never implied; an empty correlation formula means d = 0,
i.e. the working independence model.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .corr_manifold import vecl_indices
from .data import ClusteredDataset
from .errors import DesignError, FormulaError

_TOKEN = re.compile(r"\s*(?:(?P<ident>[A-Za-z_][A-Za-z0-9_.]*)|(?P<num>[-+]?[0-9][^\s,()+:]*)"
                    r"|(?P<op>[+:(),]))")
CORR_FUNCS = ("same", "botheq", "diff", "absdiff", "sqdiff", "logabsdiff")


def _tokenize(text: str):
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise FormulaError(f"unexpected character {text[bad]!r}", bad)
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def next(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, kind, value=None):
        t = self.next()
        if t[0] != kind or (value is not None and t[1] != value):
            want = value or kind
            got = t[1] or "end of formula"
            raise FormulaError(f"expected {want!r}, got {got!r}", t[2])
        return t


@dataclass(frozen=True)
class MeanFormula:
    """Parsed mean model; ``terms`` is a list of factor tuples.

    Each factor is ``("cat", col)`` for ``C(col)`` or ``("auto", col)`` for a
    bare name whose type is resolved against the data.
    """

    terms: tuple
    text: str = ""


@dataclass(frozen=True)
class CorrTerm:
    kind: str
    column: str | None = None
    value: str | None = None

    @property
    def label(self) -> str:
        if self.kind == "intercept":
            return "intercept"
        if self.kind == "botheq":
            return f"botheq({self.column},{self.value})"
        return f"{self.kind}({self.column})"


@dataclass(frozen=True)
class CorrFormula:
    terms: tuple
    text: str = ""

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.terms]


def parse_mean_formula(text: str) -> MeanFormula:
    p = _Parser(text)
    terms = []
    if p.peek()[0] == "end":
        return MeanFormula((), text)
    while True:
        factors = [_mean_factor(p)]
        while p.peek()[1] == ":":
            p.next()
            factors.append(_mean_factor(p))
        term = tuple(factors)
        if term not in terms:
            terms.append(term)
        t = p.next()
        if t[0] == "end":
            break
        if t[1] != "+":
            raise FormulaError(f"expected '+' or ':', got {t[1]!r}", t[2])
    return MeanFormula(tuple(terms), text)


def _mean_factor(p: _Parser):
    kind, val, pos = p.next()
    if kind != "ident":
        raise FormulaError(f"expected a column name, got {val or 'end of formula'!r}", pos)
    if val == "C" and p.peek()[1] == "(":
        p.next()
        col = p.expect("ident")[1]
        p.expect("op", ")")
        return ("cat", col)
    return ("auto", val)


def parse_corr_formula(text: str) -> CorrFormula:
    p = _Parser(text)
    terms = []
    if p.peek()[0] == "end":
        return CorrFormula((), text)
    while True:
        kind, val, pos = p.next()
        if kind != "ident":
            raise FormulaError(f"expected a pair term, got {val or 'end of formula'!r}", pos)
        if val == "intercept":
            term = CorrTerm("intercept")
        elif val in CORR_FUNCS:
            p.expect("op", "(")
            col = p.expect("ident")[1]
            value = None
            if val == "botheq":
                p.expect("op", ",")
                vk, value, vpos = p.next()
                if vk not in ("ident", "num"):
                    raise FormulaError("botheq needs a value", vpos)
            p.expect("op", ")")
            term = CorrTerm(val, col, value)
        else:
            raise FormulaError(f"unknown pair term {val!r}", pos)
        if term in terms:
            raise FormulaError(f"duplicated pair term {term.label!r}", pos)
        terms.append(term)
        t = p.next()
        if t[0] == "end":
            break
        if t[1] != "+":
            raise FormulaError(f"expected '+', got {t[1]!r}", t[2])
    return CorrFormula(tuple(terms), text)


@dataclass(eq=False)
class DesignBundle:
    """Per-cluster design matrices.

    ``X[i]`` is ``m_i x p``, ``W[i]`` is ``m_i(m_i-1)/2 x d`` with rows in
    vecl order, ``y[i]`` is the response vector.
    """

    cluster_ids: tuple
    X: list
    W: list
    y: list
    mean_names: list
    corr_names: list
    mean_formula: str = ""
    corr_formula: str = ""
    _batches: dict | None = field(default=None, repr=False)

    @property
    def n_clusters(self) -> int:
        return len(self.X)

    @property
    def p(self) -> int:
        return len(self.mean_names)

    @property
    def d(self) -> int:
        return len(self.corr_names)

    @property
    def n_obs(self) -> int:
        return int(sum(len(v) for v in self.y))

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(v) for v in self.y])

    def subset(self, clusters) -> "DesignBundle":
        clusters = [int(i) for i in clusters]
        return DesignBundle(
            tuple(self.cluster_ids[i] for i in clusters),
            [self.X[i] for i in clusters],
            [self.W[i] for i in clusters],
            [self.y[i] for i in clusters],
            list(self.mean_names), list(self.corr_names),
            self.mean_formula, self.corr_formula,
        )

    def scale_corr_column(self, j: int, c: float) -> "DesignBundle":
        W = []
        for w in self.W:
            w = w.copy()
            w[:, j] *= c
            W.append(w)
        return DesignBundle(self.cluster_ids, self.X, W, self.y, self.mean_names,
                            self.corr_names, self.mean_formula, self.corr_formula)

    def batches(self) -> dict:
        """Clusters grouped by size: ``{m: (index, y, X, W)}`` with stacked arrays."""
        if self._batches is None:
            groups: dict[int, list[int]] = {}
            for i, y in enumerate(self.y):
                groups.setdefault(len(y), []).append(i)
            out = {}
            for m in sorted(groups):
                idx = np.array(groups[m])
                out[m] = (
                    idx,
                    np.stack([self.y[i] for i in idx]),
                    np.stack([self.X[i] for i in idx]),
                    np.stack([self.W[i] for i in idx]),
                )
            self._batches = out
        return self._batches


def _column(ds: ClusteredDataset, name: str, what: str) -> np.ndarray:
    if name not in ds.columns:
        raise DesignError(f"{what} refers to unknown column {name!r}")
    col = ds.columns[name]
    missing = np.isnan(col) if col.dtype.kind == "f" else (col == "")
    if np.any(missing):
        row = int(np.flatnonzero(missing)[0])
        raise DesignError(f"column {name!r} has a missing value at {ds.row_label(row)}")
    return col


def _sorted_levels(col: np.ndarray) -> list:
    levels = list(dict.fromkeys(col.tolist()))
    if col.dtype.kind == "f":
        return sorted(levels)
    try:
        return sorted(levels, key=float)
    except ValueError:
        return sorted(levels)


def _fmt_level(v) -> str:
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


def _expand_factor(ds, factor):
    kind, name = factor
    col = _column(ds, name, "mean formula")
    if kind == "auto" and ds.is_numeric(name):
        return [col.astype(float)], [name]
    levels = _sorted_levels(col)
    label = f"C({name})" if kind == "cat" else name
    cols = [(col == lev).astype(float) for lev in levels[1:]]
    names = [f"{label}[{_fmt_level(lev)}]" for lev in levels[1:]]
    return cols, names


def mean_design(ds: ClusteredDataset, mf: MeanFormula):
    """Full-data mean design matrix ``(N, p)`` and column names."""
    cols = [np.ones(ds.n_obs)]
    names = ["(Intercept)"]
    for term in mf.terms:
        tcols, tnames = [np.ones(ds.n_obs)], [""]
        for factor in term:
            fcols, fnames = _expand_factor(ds, factor)
            tcols = [a * b for a in tcols for b in fcols]
            tnames = [f"{a}:{b}" if a else b for a in tnames for b in fnames]
        cols.extend(tcols)
        names.extend(tnames)
    return np.column_stack(cols), names


def _pair_columns(ds: ClusteredDataset, cf: CorrFormula):
    """Resolve each correlation term to the per-row values it compares."""
    resolved = []
    for t in cf.terms:
        if t.kind == "intercept":
            resolved.append((t, None, None))
            continue
        col = _column(ds, t.column, "correlation formula")
        numeric = ds.is_numeric(t.column)
        if t.kind in ("diff", "absdiff", "sqdiff", "logabsdiff") and not numeric:
            raise DesignError(f"{t.label} needs a numeric column")
        value = t.value
        if t.kind == "botheq":
            if numeric:
                try:
                    value = float(t.value)
                except ValueError:
                    raise DesignError(
                        f"{t.label}: value {t.value!r} is not numeric like column "
                        f"{t.column!r}"
                    ) from None
            else:
                value = str(t.value)
        resolved.append((t, col, value))
    return resolved


def pair_design(term, vj, vk, value=None):
    """One pair-covariate column for row values ``vj`` (later) and ``vk`` (earlier)."""
    kind = term.kind
    if kind == "intercept":
        return np.ones(len(vj))
    if kind == "same":
        return (vj == vk).astype(float)
    if kind == "botheq":
        return ((vj == value) & (vk == value)).astype(float)
    d = vj.astype(float) - vk.astype(float)
    if kind == "diff":
        return d
    if kind == "absdiff":
        return np.abs(d)
    if kind == "sqdiff":
        return d * d
    if kind == "logabsdiff":
        with np.errstate(divide="ignore"):
            return np.log(np.abs(d))
    raise DesignError(f"unknown pair term {kind!r}")


def build_designs(ds: ClusteredDataset, mf: MeanFormula | str,
                  cf: CorrFormula | str) -> DesignBundle:
    if isinstance(mf, str):
        mf = parse_mean_formula(mf)
    if isinstance(cf, str):
        cf = parse_corr_formula(cf)
    X_all, mean_names = mean_design(ds, mf)
    resolved = _pair_columns(ds, cf)
    X, W, Y = [], [], []
    for i in range(ds.n_clusters):
        sl = ds.cluster_slice(i)
        m = sl.stop - sl.start
        X.append(X_all[sl])
        Y.append(ds.response[sl].astype(float))
        rows, cols = vecl_indices(m)
        wcols = []
        for term, col, value in resolved:
            if term.kind == "intercept":
                wcols.append(np.ones(len(rows)))
                continue
            v = col[sl]
            w = pair_design(term, v[rows], v[cols], value)
            if term.kind == "logabsdiff" and len(w) and not np.all(np.isfinite(w)):
                raise DesignError(
                    f"{term.label}: cluster {ds.cluster_ids[i]!r} has duplicated "
                    f"values of {term.column!r}"
                )
            wcols.append(w)
        W.append(np.column_stack(wcols) if wcols else np.zeros((len(rows), 0)))
    return DesignBundle(
        ds.cluster_ids, X, W, Y, mean_names, cf.labels,
        mf.text, cf.text,
    )
