"""CSV import and export for datasets, estimates, traces and matrices.

Dataset files have a mandatory header. Covariates are ``X1..Xp`` (an empty cell
is a missing value), followed by ``W`` and ``Y``; simulated files may also carry
``Z1..Zd``, ``true_propensity``, ``mu0`` and ``mu1``. Floats are written with
``repr`` so a write/read cycle is exact.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .datagen import IncompleteMatrix, ObservationalDataset

MAX_REPORTED_LINES = 10


class DataFormatError(ValueError):
    """A dataset file does not match the expected layout.

    Attributes:
        lines: 1-based line numbers of the offending rows (header is line 1).
    """

    def __init__(self, message: str, lines: Sequence[int] = ()):
        self.lines = list(lines)
        if self.lines:
            shown = ", ".join(map(str, self.lines[:MAX_REPORTED_LINES]))
            more = len(self.lines) - MAX_REPORTED_LINES
            message = f"{message} (line{'s' if len(self.lines) > 1 else ''} {shown}"
            message += f" and {more} more)" if more > 0 else ")"
        super().__init__(message)


@dataclass(frozen=True)
class CsvSchema:
    """Column naming convention of a dataset file."""

    covariate_prefix: str = "X"
    latent_prefix: str = "Z"
    treatment: str = "W"
    outcome: str = "Y"
    propensity: str = "true_propensity"
    mu0: str = "mu0"
    mu1: str = "mu1"


@dataclass
class SchemaReport:
    """Column type validation of an ingested file."""

    kinds: dict[str, str] = field(default_factory=dict)  # covariate -> "binary" | "numeric"
    missing: dict[str, int] = field(default_factory=dict)

    @property
    def binary_columns(self) -> list[str]:
        return [c for c, k in self.kinds.items() if k == "binary"]

    @property
    def numeric_columns(self) -> list[str]:
        return [c for c, k in self.kinds.items() if k == "numeric"]


def _fmt(value) -> str:
    value = float(value)
    return "" if math.isnan(value) else repr(value)


def _writer(path):
    path = Path(path)
    try:
        return path, open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _numbered(header: Sequence[str], prefix: str) -> list[str]:
    pattern = re.compile(rf"{re.escape(prefix)}(\d+)$")
    found = sorted((int(m.group(1)), c) for c in header if (m := pattern.match(c)))
    idx = [i for i, _ in found]
    if idx != list(range(1, len(idx) + 1)):
        raise DataFormatError(f"{prefix} columns must be numbered 1..k without gaps", [1])
    return [c for _, c in found]


def write_dataset(path, ds: ObservationalDataset, include_truth: bool = True,
                  schema: CsvSchema = CsvSchema()) -> Path:
    """Export a dataset; ground-truth columns are written when available."""
    n, p = ds.X.shape
    cols = [ds.X.values[:, j] for j in range(p)]
    header = [f"{schema.covariate_prefix}{j + 1}" for j in range(p)]
    header += [schema.treatment, schema.outcome]
    extra: list[np.ndarray] = []
    if include_truth:
        if ds.Z is not None:
            header += [f"{schema.latent_prefix}{k + 1}" for k in range(ds.Z.shape[1])]
            extra += [ds.Z[:, k] for k in range(ds.Z.shape[1])]
        for name, vec in ((schema.propensity, ds.propensity), (schema.mu0, ds.mu0),
                          (schema.mu1, ds.mu1)):
            if vec is not None:
                header.append(name)
                extra.append(np.broadcast_to(np.asarray(vec, dtype=float), (n,)))
    path, fh = _writer(path)
    with fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for i in range(n):
            row = [_fmt(c[i]) for c in cols]
            row += [str(int(ds.W[i])), _fmt(ds.Y[i])]
            row += [_fmt(c[i]) for c in extra]
            out.writerow(row)
    return path


def read_dataset(path, schema: CsvSchema = CsvSchema()) -> ObservationalDataset:
    """Ingest a dataset file; the mask is inferred from empty covariate cells.

    The returned dataset carries a :class:`SchemaReport` in ``extra["report"]``.

    Raises:
        DataFormatError: bad header, malformed rows (with line numbers),
            non-binary treatment or missing values outside the covariates.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file, header row is mandatory")
    header = [c.strip() for c in rows[0]]
    if len(set(header)) != len(header):
        raise DataFormatError(f"{path}: duplicate column names", [1])
    covs = _numbered(header, schema.covariate_prefix)
    latents = _numbered(header, schema.latent_prefix)
    if not covs:
        raise DataFormatError(f"{path}: no {schema.covariate_prefix}1.. covariate columns", [1])
    for req in (schema.treatment, schema.outcome):
        if req not in header:
            raise DataFormatError(f"{path}: missing required column {req!r}", [1])
    known = set(covs) | set(latents) | {schema.treatment, schema.outcome, schema.propensity,
                                        schema.mu0, schema.mu1}
    unknown = [c for c in header if c not in known]
    if unknown:
        raise DataFormatError(f"{path}: unknown columns {unknown}", [1])
    if (schema.mu0 in header) != (schema.mu1 in header):
        raise DataFormatError(f"{path}: {schema.mu0} and {schema.mu1} must appear together", [1])

    body = rows[1:]
    width = len(header)
    table = np.full((len(body), width), np.nan)
    bad = []
    for i, row in enumerate(body):
        if len(row) != width:
            bad.append(i + 2)
            continue
        try:
            table[i] = [float(c) if c.strip() else np.nan for c in row]
        except ValueError:
            bad.append(i + 2)
    if bad:
        raise DataFormatError(f"{path}: malformed rows", bad)
    if not body:
        raise DataFormatError(f"{path}: no data rows")
    col = {c: table[:, k] for k, c in enumerate(header)}

    def complete(name):
        holes = np.flatnonzero(np.isnan(col[name]))
        if holes.size:
            raise DataFormatError(f"{path}: column {name!r} has empty cells", holes + 2)
        return col[name]

    W = complete(schema.treatment)
    nonbinary = np.flatnonzero(~np.isin(W, (0.0, 1.0)))
    if nonbinary.size:
        raise DataFormatError(f"{path}: treatment must be 0/1", nonbinary + 2)
    Y = complete(schema.outcome)
    X = np.column_stack([col[c] for c in covs])
    report = SchemaReport()
    for c in covs:
        obs = col[c][~np.isnan(col[c])]
        report.kinds[c] = "binary" if obs.size and np.isin(obs, (0.0, 1.0)).all() else "numeric"
        report.missing[c] = int(np.isnan(col[c]).sum())
    ds = ObservationalDataset(
        X=IncompleteMatrix.from_nan(X), W=W.astype(np.int64), Y=Y,
        Z=np.column_stack([complete(c) for c in latents]) if latents else None,
        propensity=complete(schema.propensity) if schema.propensity in header else None,
        mu0=complete(schema.mu0) if schema.mu0 in header else None,
        mu1=complete(schema.mu1) if schema.mu1 in header else None,
    )
    ds.extra["report"] = report
    return ds


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Write a CSV; floats via ``repr``, NaN as an empty cell, other values via ``str``."""
    path, fh = _writer(path)
    with fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row])
    return path


def read_table(path) -> list[dict[str, str]]:
    """Read a CSV written by :func:`write_table` into a list of string dicts."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_trace(path, trace: Sequence[tuple[int, float]]) -> Path:
    """Loss trace as ``epoch,bound`` rows."""
    return write_table(path, ["epoch", "bound"], [(int(e), float(b)) for e, b in trace])


ESTIMATE_HEADER = ["method", "mode", "B", "L", "lambda", "tau_hat", "within_variance",
                   "between_variance", "total_variance", "ci_low", "ci_high", "seed"]


def write_estimate(path, est, *, method: str, mode: str, B: Optional[int] = None,
                   L: Optional[int] = None, lam: float = 0.0, seed: Optional[int] = None) -> Path:
    """A one-row CSV describing an :class:`~mdcausal.estimators.AteEstimate`."""
    row = [method, mode, "" if B is None else B, "" if L is None else L, float(lam),
           float(est.tau_hat), float(est.within_variance), float(est.between_variance),
           float(est.total_variance), float(est.ci_95[0]), float(est.ci_95[1]),
           "" if seed is None else seed]
    return write_table(path, ESTIMATE_HEADER, [row])


def write_matrix(path, M: np.ndarray, prefix: str = "X") -> Path:
    """A dense matrix with columns ``prefix1..prefixk``; NaN becomes an empty cell."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    header = [f"{prefix}{j + 1}" for j in range(M.shape[1])]
    return write_table(path, header, (list(map(float, r)) for r in M))
