"""Unbalanced longitudinal data: in-memory representation and CSV ingestion.

Data are stored one row per observation ("long" format). Subjects keep the
order in which they first appear in the file; observations within a subject
are sorted by time (stable, so exact ties keep file order).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, DomainError, ParseError, SchemaError

INTERCEPT = "(Intercept)"


class ResponseKind(str, Enum):
    GAMMA = "gamma"
    NORMAL = "normal"
    BINARY = "binary"
    ORDINAL = "ordinal"

    @property
    def discrete(self) -> bool:
        return self in (ResponseKind.BINARY, ResponseKind.ORDINAL)

    @property
    def has_intercept(self) -> bool:
        # the ordinal latent model fixes the intercept at zero
        return self is not ResponseKind.ORDINAL


@dataclass(frozen=True)
class Observation:
    time: float
    y: float
    covariates: tuple[float, ...]


@dataclass(frozen=True)
class Subject:
    id: str
    observations: tuple[Observation, ...]

    @property
    def n(self) -> int:
        return len(self.observations)


@dataclass(frozen=True)
class LongitudinalDataset:
    """A set of subjects with per-occasion responses and covariates.

    ``n_categories`` is K for ordinal data (2 for binary, None otherwise).
    Array views (``y``, ``X``, ``time``, ``starts``...) are computed lazily and
    cached; observations of a subject are contiguous in them.
    """

    subjects: tuple[Subject, ...]
    kind: ResponseKind
    covariate_names: tuple[str, ...]
    n_categories: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ResponseKind(self.kind))
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if not self.subjects:
            raise DataError("empty dataset")
        if self.kind is ResponseKind.BINARY:
            object.__setattr__(self, "n_categories", 2)
        if self.kind is ResponseKind.ORDINAL:
            if self.n_categories is None or self.n_categories < 2:
                raise DomainError("ordinal data needs K >= 2 categories")
        p = len(self.covariate_names)
        seen = set()
        for s in self.subjects:
            if s.id in seen:
                raise DataError(f"duplicate subject id {s.id!r}")
            seen.add(s.id)
            if not s.observations:
                raise DataError(f"subject {s.id!r} has no observations")
            for o in s.observations:
                if len(o.covariates) != p:
                    raise DataError(
                        f"subject {s.id!r}: expected {p} covariates, got {len(o.covariates)}"
                    )
                _check_response(o.y, self.kind, self.n_categories, where=f"subject {s.id!r}")

    @classmethod
    def from_arrays(
        cls,
        ids: Sequence,
        time: Sequence[float],
        y: Sequence[float],
        X: np.ndarray,
        kind: ResponseKind | str,
        covariate_names: Sequence[str],
        n_categories: int | None = None,
    ) -> "LongitudinalDataset":
        """Group flat rows by subject id (first-appearance order), sort by time."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        groups: dict[str, list[int]] = {}
        for row, sid in enumerate(ids):
            groups.setdefault(str(sid), []).append(row)
        subjects = []
        for sid, rows in groups.items():
            rows = sorted(rows, key=lambda r: float(time[r]))
            obs = tuple(
                Observation(float(time[r]), float(y[r]), tuple(float(v) for v in X[r]))
                for r in rows
            )
            subjects.append(Subject(sid, obs))
        return cls(tuple(subjects), ResponseKind(kind), tuple(covariate_names), n_categories)

    @property
    def m(self) -> int:
        return len(self.subjects)

    @property
    def n_obs(self) -> int:
        return int(self.sizes.sum())

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([s.n for s in self.subjects], dtype=np.int64)

    @cached_property
    def starts(self) -> np.ndarray:
        """Offset of each subject's first observation in the flat arrays."""
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.int64)

    @cached_property
    def subject_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.m), self.sizes)

    @cached_property
    def y(self) -> np.ndarray:
        return np.array([o.y for s in self.subjects for o in s.observations])

    @cached_property
    def time(self) -> np.ndarray:
        return np.array([o.time for s in self.subjects for o in s.observations])

    @cached_property
    def X(self) -> np.ndarray:
        p = len(self.covariate_names)
        rows = [o.covariates for s in self.subjects for o in s.observations]
        return np.array(rows, dtype=float).reshape(len(rows), p)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    def resample(self, indices: Iterable[int]) -> "LongitudinalDataset":
        """Dataset made of the given subjects (repeats allowed, ids made unique)."""
        subjects = tuple(
            Subject(f"{self.subjects[i].id}#{k}", self.subjects[i].observations)
            for k, i in enumerate(indices)
        )
        return LongitudinalDataset(subjects, self.kind, self.covariate_names, self.n_categories)


def _check_response(y: float, kind: ResponseKind, K: int | None, where: str) -> None:
    if not math.isfinite(y):
        raise DomainError(f"{where}: non-finite response {y}")
    if kind is ResponseKind.GAMMA and y <= 0:
        raise DomainError(f"{where}: gamma response must be positive, got {y}")
    if kind.discrete:
        if y != int(y):
            raise DomainError(f"{where}: category code must be an integer, got {y}")
        lo, hi = (0, 1) if kind is ResponseKind.BINARY else (1, K)
        if not lo <= y <= hi:
            raise DomainError(f"{where}: category code {int(y)} outside {lo}..{hi}")


@dataclass(frozen=True)
class ColumnSchema:
    """Maps logical columns to CSV header names.

    ``covariates=None`` takes every remaining column in header order.
    """

    id: str = "id"
    time: str = "time"
    y: str = "y"
    covariates: tuple[str, ...] | None = None


def load_csv(
    path: str | Path,
    kind: ResponseKind | str,
    schema: ColumnSchema | None = None,
    n_categories: int | None = None,
    recode: int = 0,
    time_scale: float = 1.0,
) -> LongitudinalDataset:
    """Read a long-format CSV into a :class:`LongitudinalDataset`.

    Parameters
    ----------
    path : path to a UTF-8 comma-separated file with a header row.
    kind : response family.
    schema : column mapping; defaults to ``id,time,y`` + remaining columns.
    n_categories : K for ordinal data; inferred as the largest code if None.
    recode : integer added to every category code before validation
        (e.g. 1 maps 0..3 to 1..4).
    time_scale : times are multiplied by this factor.
    """
    kind = ResponseKind(kind)
    schema = schema or ColumnSchema()
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        for col in (schema.id, schema.time, schema.y):
            if col not in header:
                raise SchemaError(f"missing column {col!r}")
        if schema.covariates is None:
            cov_cols = [h for h in header if h not in (schema.id, schema.time, schema.y)]
        else:
            cov_cols = list(schema.covariates)
            for col in cov_cols:
                if col not in header:
                    raise SchemaError(f"missing column {col!r}")
        pos = {h: k for k, h in enumerate(header)}
        ids, times, ys, rows = [], [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"row {lineno}: expected {len(header)} fields, got {len(rec)}")
            ids.append(rec[pos[schema.id]].strip())
            times.append(_number(rec[pos[schema.time]], lineno, schema.time) * time_scale)
            yv = _number(rec[pos[schema.y]], lineno, schema.y)
            if kind.discrete:
                yv += recode
            ys.append(yv)
            rows.append([_number(rec[pos[c]], lineno, c) for c in cov_cols])
    if not ids:
        raise DataError("empty dataset")
    if kind is ResponseKind.ORDINAL and n_categories is None:
        n_categories = int(max(ys))
    for lineno, yv in enumerate(ys, start=2):
        _check_response(yv, kind, n_categories, where=f"row {lineno}")
    X = np.array(rows, dtype=float).reshape(len(rows), len(cov_cols))
    names = list(cov_cols)
    if kind.has_intercept:
        X = np.column_stack([np.ones(len(rows)), X])
        names = [INTERCEPT] + names
    return LongitudinalDataset.from_arrays(ids, times, ys, X, kind, names, n_categories)


def _number(cell: str, lineno: int, col: str) -> float:
    cell = cell.strip()
    if cell == "" or cell.upper() in ("NA", "NAN"):
        raise ParseError(f"row {lineno}: missing value in column {col!r}")
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"row {lineno}: non-numeric value {cell!r} in column {col!r}") from None


def write_csv(data: LongitudinalDataset, path: str | Path, schema: ColumnSchema | None = None) -> None:
    """Write ``data`` in the long format read by :func:`load_csv`.

    A leading intercept column is omitted so that reading the file back with
    the same response kind reproduces the dataset.
    """
    schema = schema or ColumnSchema()
    names = list(data.covariate_names)
    skip = 1 if names and names[0] == INTERCEPT else 0
    cov_names = list(schema.covariates) if schema.covariates is not None else names[skip:]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([schema.id, schema.time, schema.y] + cov_names)
        for s in data.subjects:
            for o in s.observations:
                y = int(o.y) if data.kind.discrete else repr(o.y)
                w.writerow([s.id, repr(o.time), y] + [repr(v) for v in o.covariates[skip:]])


@dataclass(frozen=True)
class DatasetSummary:
    m: int
    n_obs: int
    min_n: int
    max_n: int
    mean_n: float
    y_min: float
    y_max: float
    covariate_means: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "m": self.m,
            "n_obs": self.n_obs,
            "min_n": self.min_n,
            "max_n": self.max_n,
            "mean_n": self.mean_n,
            "y_min": self.y_min,
            "y_max": self.y_max,
            "covariate_means": dict(self.covariate_means),
        }


def summarize(data: LongitudinalDataset) -> DatasetSummary:
    if not data.subjects:
        raise DataError("empty dataset")
    sizes = data.sizes
    means = data.X.mean(axis=0) if data.X.shape[1] else np.zeros(0)
    return DatasetSummary(
        m=data.m,
        n_obs=int(sizes.sum()),
        min_n=int(sizes.min()),
        max_n=int(sizes.max()),
        mean_n=float(sizes.mean()),
        y_min=float(data.y.min()),
        y_max=float(data.y.max()),
        covariate_means={n: float(v) for n, v in zip(data.covariate_names, means)},
    )
