"""Clustered long-format data and CSV ingestion."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError


def _to_float(s: str) -> float | None:
    try:
        v = float(s)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """Observations grouped into clusters, stored column-wise.

    Rows are contiguous per cluster; cluster ``i`` occupies rows
    ``offsets[i]:offsets[i + 1]``.  Numeric columns are float arrays (``nan``
    marks a missing cell); other columns are object arrays of strings (``""``
    marks a missing cell).
    """

    cluster_ids: tuple
    offsets: np.ndarray
    response: np.ndarray
    columns: dict
    response_name: str = "y"
    cluster_name: str = "id"
    row_numbers: np.ndarray | None = None
    digest: str | None = field(default=None, compare=False)

    def __post_init__(self):
        sizes = np.diff(self.offsets)
        if len(self.cluster_ids) == 0:
            raise IngestionError("dataset has no clusters")
        if np.any(sizes < 1):
            raise IngestionError("every cluster must hold at least one observation")
        if self.offsets[-1] != len(self.response):
            raise IngestionError("offsets do not cover the response vector")
        for name, col in self.columns.items():
            if len(col) != len(self.response):
                raise IngestionError(f"column {name!r} has the wrong length")

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def n_obs(self) -> int:
        return int(self.offsets[-1])

    def is_numeric(self, name: str) -> bool:
        return self.columns[name].dtype.kind == "f"

    def cluster_slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def cluster_index(self) -> np.ndarray:
        """Cluster position of every row."""
        return np.repeat(np.arange(self.n_clusters), self.sizes)

    def row_label(self, row: int) -> str:
        if self.row_numbers is not None:
            return f"line {int(self.row_numbers[row])}"
        return f"row {row}"

    def subset(self, clusters) -> "ClusteredDataset":
        clusters = np.asarray(clusters, dtype=int)
        rows = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1])
                               for i in clusters])
        sizes = self.sizes[clusters]
        return ClusteredDataset(
            cluster_ids=tuple(self.cluster_ids[i] for i in clusters),
            offsets=np.concatenate([[0], np.cumsum(sizes)]),
            response=self.response[rows],
            columns={k: v[rows] for k, v in self.columns.items()},
            response_name=self.response_name,
            cluster_name=self.cluster_name,
            row_numbers=None if self.row_numbers is None else self.row_numbers[rows],
        )

    @classmethod
    def from_columns(cls, cluster, response, columns: dict, *, response_name="y",
                     cluster_name="id", row_numbers=None,
                     digest=None) -> "ClusteredDataset":
        """Group row-aligned arrays by ``cluster`` (first-appearance order)."""
        cluster = [str(c) for c in cluster]
        order: dict[str, list[int]] = {}
        for row, c in enumerate(cluster):
            order.setdefault(c, []).append(row)
        rows = np.array([r for idx in order.values() for r in idx], dtype=int)
        sizes = [len(idx) for idx in order.values()]
        cols = {}
        for k, v in columns.items():
            v = np.asarray(v)
            cols[k] = v.astype(float) if v.dtype.kind in "biuf" else v.astype(object)
        return cls(
            cluster_ids=tuple(order),
            offsets=np.concatenate([[0], np.cumsum(sizes)]).astype(int),
            response=np.asarray(response, dtype=float)[rows],
            columns={k: v[rows] for k, v in cols.items()},
            response_name=response_name,
            cluster_name=cluster_name,
            row_numbers=None if row_numbers is None else np.asarray(row_numbers)[rows],
            digest=digest,
        )


def load_csv(path, cluster_col: str, response_col: str,
             ordering_col: str | None = None) -> ClusteredDataset:
    """Read a long-format CSV (one row per observation) into clusters.

    Rows keep their file order within a cluster unless ``ordering_col`` is
    given, in which case they are sorted by it (stable).  Columns whose
    non-empty cells all parse as finite numbers become numeric.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"no such file: {path}")
    raw = path.read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    try:
        text = raw.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise IngestionError(f"{path}: not valid UTF-8 ({exc})") from None
    reader = csv.reader(text.splitlines())
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise IngestionError(f"{path}: file is empty") from None
    if len(set(header)) != len(header):
        raise IngestionError(f"{path}: duplicated column names in header")
    for col in (cluster_col, response_col, ordering_col):
        if col is not None and col not in header:
            raise IngestionError(f"{path}: missing column {col!r}")
    records, lines = [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise IngestionError(
                f"{path}: line {lineno} has {len(rec)} fields, expected {len(header)}"
            )
        records.append([c.strip() for c in rec])
        lines.append(lineno)
    if not records:
        raise IngestionError(f"{path}: no data rows")

    raw_cols = {h: [r[j] for r in records] for j, h in enumerate(header)}
    ri = header.index(response_col)
    y = np.empty(len(records))
    for k, rec in enumerate(records):
        v = _to_float(rec[ri])
        if v is None:
            what = "missing" if rec[ri] == "" else f"unparseable ({rec[ri]!r})"
            raise IngestionError(f"{path}: line {lines[k]}: response {what}")
        y[k] = v
    ci = header.index(cluster_col)
    for k, rec in enumerate(records):
        if rec[ci] == "":
            raise IngestionError(f"{path}: line {lines[k]}: missing cluster id")

    columns = {}
    for h, vals in raw_cols.items():
        parsed = [_to_float(v) if v != "" else math.nan for v in vals]
        if h != cluster_col and all(p is not None for p in parsed):
            columns[h] = np.array(parsed, dtype=float)
        else:
            columns[h] = np.array(vals, dtype=object)

    lines = np.array(lines)
    if ordering_col is not None:
        key = columns[ordering_col]
        groups: dict[str, list[int]] = {}
        for row, c in enumerate(raw_cols[cluster_col]):
            groups.setdefault(c, []).append(row)
        perm = []
        for idx in groups.values():
            perm.extend(sorted(idx, key=lambda r: key[r]))
        perm = np.array(perm)
        y, lines = y[perm], lines[perm]
        columns = {k: v[perm] for k, v in columns.items()}
    return ClusteredDataset.from_columns(
        columns[cluster_col], y, columns, response_name=response_col,
        cluster_name=cluster_col, row_numbers=lines, digest=digest,
    )


def write_csv(ds: ClusteredDataset, path, float_format: str = "{:.17g}") -> None:
    """Write a dataset back to long format (cluster column first)."""
    cols = dict(ds.columns)
    cols.setdefault(ds.response_name, ds.response)
    names = [ds.cluster_name] + [k for k in cols if k != ds.cluster_name]
    cidx = ds.cluster_index()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in range(ds.n_obs):
            out = [ds.cluster_ids[cidx[row]]]
            for k in names[1:]:
                v = cols[k][row]
                if isinstance(v, float):
                    out.append("" if math.isnan(v) else float_format.format(v))
                else:
                    out.append(str(v))
            w.writerow(out)
