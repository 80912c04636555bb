"""Dataset containers, CSV/JSON loading and input validation."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError, SchemaError, ValidationError

RANK_RTOL = 1e-10


def _frozen(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def numerical_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Rank with singular values below ``rtol * s_max`` counted as zero."""
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def _dependent_columns(M: np.ndarray, rtol: float = RANK_RTOL) -> list[int]:
    # greedy scan: a column is dependent if it does not raise the rank of the
    # columns kept so far
    kept: list[int] = []
    dependent: list[int] = []
    s_max = np.linalg.svd(M, compute_uv=False)[0] if M.size else 0.0
    for j in range(M.shape[1]):
        trial = M[:, kept + [j]]
        s = np.linalg.svd(trial, compute_uv=False)
        if s_max > 0 and s[-1] > rtol * s_max:
            kept.append(j)
        else:
            dependent.append(j)
    return dependent


@dataclass(frozen=True)
class IVDataset:
    """Outcome ``y`` (n,), regressors ``X`` (n, g) and instruments ``Z`` (n, k).

    Arrays are copied and made read-only on construction, so an instance can be
    shared freely between replication workers.
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    x_labels: tuple[str, ...] | None = None
    z_labels: tuple[str, ...] | None = None
    y_label: str = "y"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        if y.ndim == 2 and y.shape[1] == 1:
            y = y[:, 0]
        if X.ndim == 1:
            X = X[:, None]
        if Z.ndim == 1:
            Z = Z[:, None]
        if y.ndim != 1 or X.ndim != 2 or Z.ndim != 2:
            raise ValidationError("y must be a vector, X and Z matrices")
        n = y.shape[0]
        if X.shape[0] != n or Z.shape[0] != n:
            raise ValidationError(
                f"row mismatch: y has {n}, X has {X.shape[0]}, Z has {Z.shape[0]}"
            )
        g, k = X.shape[1], Z.shape[1]
        if not (n > k >= g >= 1):
            raise ValidationError(f"need n > k >= g >= 1, got n={n}, k={k}, g={g}")
        for name, arr in (("y", y), ("X", X), ("Z", Z)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite entries")
        if numerical_rank(Z) < k:
            dep = _dependent_columns(Z)
            names = [self.z_labels[j] for j in dep] if self.z_labels else dep
            raise ValidationError(
                f"instrument matrix is rank deficient; dependent columns: {names}",
                columns=names,
            )
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "Z", _frozen(Z))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def g(self) -> int:
        return self.X.shape[1]

    @property
    def k(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class LinearRestriction:
    """Null hypothesis ``A @ beta == a`` with ``A`` of shape (p, g)."""

    A: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        p, g = A.shape
        if a.shape != (p,):
            raise ValidationError(f"a must have length {p}, got shape {a.shape}")
        if p > g:
            raise ValidationError(f"more restrictions ({p}) than coefficients ({g})")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(a))):
            raise ValidationError("restriction contains non-finite entries")
        if numerical_rank(A) < p:
            raise ValidationError("restriction matrix A must have full row rank")
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "a", _frozen(a))

    @property
    def p(self) -> int:
        return self.A.shape[0]

    @classmethod
    def simple(cls, beta0) -> "LinearRestriction":
        """The full-vector null ``beta == beta0`` as a restriction."""
        beta0 = np.atleast_1d(np.asarray(beta0, dtype=float))
        return cls(np.eye(beta0.size), beta0)

    @classmethod
    def single(cls, g: int, index: int, value: float) -> "LinearRestriction":
        A = np.zeros((1, g))
        A[0, index] = 1.0
        return cls(A, [value])

    def to_json(self) -> dict:
        return {"A": self.A.tolist(), "a": self.a.tolist()}


# --------------------------------------------------------------------------
# schema and files


@dataclass(frozen=True)
class Schema:
    """Column-role map for a dataset CSV."""

    outcome: str
    regressors: tuple[str, ...]
    instruments: tuple[str, ...]
    exogenous: tuple[str, ...] = field(default_factory=tuple)

    @classmethod
    def from_mapping(cls, m: Mapping) -> "Schema":
        try:
            outcome = m["outcome"]
            regressors = m["regressors"]
            instruments = m["instruments"]
        except KeyError as exc:
            raise SchemaError(f"schema is missing the {exc.args[0]!r} role") from None
        if isinstance(regressors, str):
            regressors = [regressors]
        if isinstance(instruments, str):
            instruments = [instruments]
        if not isinstance(outcome, str):
            raise SchemaError("schema 'outcome' must be a single column name")
        if len(regressors) < 1 or len(instruments) < 1:
            raise SchemaError("schema needs at least one regressor and one instrument")
        return cls(
            outcome=outcome,
            regressors=tuple(regressors),
            instruments=tuple(instruments),
            exogenous=tuple(m.get("exogenous", ())),
        )

    def to_json(self) -> dict:
        out = {
            "outcome": self.outcome,
            "regressors": list(self.regressors),
            "instruments": list(self.instruments),
        }
        if self.exogenous:
            out["exogenous"] = list(self.exogenous)
        return out


def load_schema(path) -> Schema:
    with open(path) as fh:
        return Schema.from_mapping(json.load(fh))


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(
            f"non-numeric cell {cell!r} at row {row}, column {column!r}",
            row=row,
            column=column,
        ) from None
    return value


def load_dataset(path, schema: Schema | Mapping) -> IVDataset:
    """Read a header-row CSV and assemble a validated :class:`IVDataset`.

    Columns are taken in the order the schema lists them. Rows are numbered
    from 1 for the first data row in error messages.
    """
    if not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty CSV file") from None
        wanted = [schema.outcome, *schema.regressors, *schema.instruments]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise SchemaError(f"columns missing from CSV header: {missing}")
        idx = {c: header.index(c) for c in set(wanted)}
        cols = {c: [] for c in idx}
        for r, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"row {r} has {len(row)} fields, header has {len(header)}", row=r
                )
            for c, j in idx.items():
                cols[c].append(_parse_float(row[j].strip(), r, c))

    for c in schema.exogenous:
        if c not in schema.instruments:
            warnings.warn(
                f"exogenous regressor {c!r} is not listed among the instruments",
                stacklevel=2,
            )
    y = np.array(cols[schema.outcome])
    X = np.column_stack([cols[c] for c in schema.regressors])
    Z = np.column_stack([cols[c] for c in schema.instruments])
    return IVDataset(
        y,
        X,
        Z,
        x_labels=tuple(schema.regressors),
        z_labels=tuple(schema.instruments),
        y_label=schema.outcome,
    )


def default_schema(data: IVDataset) -> Schema:
    x_labels = data.x_labels or tuple(f"x{j + 1}" for j in range(data.g))
    z_labels = data.z_labels or tuple(f"z{j + 1}" for j in range(data.k))
    return Schema(data.y_label, tuple(x_labels), tuple(z_labels))


def save_dataset(path, data: IVDataset, schema: Schema | None = None) -> Schema:
    """Write ``data`` as CSV with shortest round-trip float formatting.

    Columns shared between X and Z (exogenous regressors that instrument
    themselves) are written once when their labels coincide.
    """
    schema = schema or default_schema(data)
    columns: dict[str, np.ndarray] = {schema.outcome: data.y}
    for j, c in enumerate(schema.regressors):
        columns[c] = data.X[:, j]
    for j, c in enumerate(schema.instruments):
        if c in columns and not np.array_equal(columns[c], data.Z[:, j]):
            raise SchemaError(f"column label {c!r} used for two different columns")
        columns[c] = data.Z[:, j]
    names = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(data.n):
            w.writerow([repr(float(columns[c][i])) for c in names])
    return schema


def load_restriction(path) -> LinearRestriction:
    """Read ``{"A": [[...]], "a": [...]}`` from a JSON file."""
    with open(path) as fh:
        obj = json.load(fh)
    return restriction_from_json(obj)


def restriction_from_json(obj: Mapping) -> LinearRestriction:
    try:
        return LinearRestriction(obj["A"], obj["a"])
    except KeyError as exc:
        raise SchemaError(f"restriction JSON is missing {exc.args[0]!r}") from None


def save_restriction(path, restriction: LinearRestriction) -> None:
    with open(path, "w") as fh:
        json.dump(restriction.to_json(), fh)


# --------------------------------------------------------------------------
# regularity diagnostics


@dataclass(frozen=True)
class LeverageReport:
    max_leverage: float
    threshold: float
    n_above: int
    flagged: tuple[int, ...]

    @property
    def passed(self) -> bool:
        return self.n_above == 0


def validate_assumption1(P_diag: Sequence[float], threshold: float = 0.99) -> LeverageReport:
    """Check that the projection diagonal stays below ``threshold``.

    Report-only: this never raises. ``threshold`` plays the role of
    ``1 - 1/c_u`` for a user-chosen bound ``c_u``; entries at or above it are
    flagged (1-based observation indices).
    """
    d = np.asarray(P_diag, dtype=float)
    flagged = tuple(int(i) + 1 for i in np.flatnonzero(d >= threshold))
    mx = float(d.max()) if d.size else math.nan
    if flagged:
        warnings.warn(
            f"{len(flagged)} projection diagonal entries at or above {threshold}",
            stacklevel=2,
        )
    return LeverageReport(mx, threshold, len(flagged), flagged)
