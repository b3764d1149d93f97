"""Discrete tabular domains, encoded datasets and file ingestion."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from napsumq._random import as_generator

#: Exact-enumeration paths refuse domains with more cells than this.
DEFAULT_ENUMERATION_CAP = 10**6


class SchemaError(ValueError):
    """Raised for malformed schemas or data that does not match a schema."""


@dataclass(frozen=True)
class Variable:
    name: str
    levels: tuple[str, ...]

    @property
    def cardinality(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class Schema:
    """Ordered list of categorical variables.

    Category codes follow the declared level order, so the same schema always
    produces the same query vectors regardless of the order in which labels
    appear in a file.
    """

    variables: tuple[Variable, ...]

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if not names:
            raise SchemaError("schema needs at least one variable")
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate variable names in {names}")
        for v in self.variables:
            if v.cardinality < 2:
                raise SchemaError(
                    f"variable {v.name!r} has cardinality {v.cardinality}, need >= 2"
                )
            if len(set(v.levels)) != len(v.levels):
                raise SchemaError(f"variable {v.name!r} has duplicate levels")

    @classmethod
    def from_cardinalities(cls, cards: Sequence[int], names: Sequence[str] | None = None):
        if names is None:
            names = [f"x{i}" for i in range(len(cards))]
        if len(names) != len(cards):
            raise SchemaError("names and cardinalities differ in length")
        variables = []
        for name, k in zip(names, cards):
            if int(k) < 2:
                raise SchemaError(f"variable {name!r} has cardinality {k}, need >= 2")
            variables.append(Variable(str(name), tuple(str(i) for i in range(int(k)))))
        return cls(tuple(variables))

    @classmethod
    def from_json(cls, obj: list | str | Path) -> "Schema":
        """Build a schema from ``[{"name": ..., "levels": [...]}, ...]``.

        ``obj`` may be the parsed list or a path to a JSON file.
        """
        if isinstance(obj, (str, Path)):
            with open(obj, encoding="utf-8") as fh:
                obj = json.load(fh)
        try:
            variables = tuple(
                Variable(str(e["name"]), tuple(str(lv) for lv in e["levels"])) for e in obj
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad schema entry: {exc}") from exc
        return cls(variables)

    def to_json(self) -> list[dict]:
        return [{"name": v.name, "levels": list(v.levels)} for v in self.variables]

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(v.cardinality for v in self.variables)

    @property
    def d(self) -> int:
        return len(self.variables)

    @property
    def domain_size(self) -> int:
        # Python ints are arbitrary precision, so this never overflows.
        return math.prod(self.cardinalities)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown variable {name!r}") from None

    def digest(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def enumerate_domain(self, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
        """All points of the domain as a ``(|X|, d)`` code matrix in C order."""
        if self.domain_size > cap:
            raise SchemaError(
                f"domain has {self.domain_size} cells, above the enumeration cap {cap}"
            )
        grids = np.indices(self.cardinalities).reshape(self.d, -1).T
        return np.ascontiguousarray(grids, dtype=np.int64)


class Dataset:
    """Immutable ``n x d`` matrix of category codes tied to a schema."""

    def __init__(self, schema: Schema, rows, *, validate: bool = True):
        rows = np.asarray(rows, dtype=np.int64)
        if rows.ndim == 1 and rows.size == 0:
            rows = rows.reshape(0, schema.d)
        if rows.ndim != 2 or rows.shape[1] != schema.d:
            raise SchemaError(
                f"rows must have shape (n, {schema.d}), got {rows.shape}"
            )
        if validate and rows.size:
            cards = np.asarray(schema.cardinalities)
            bad = (rows < 0) | (rows >= cards)
            if bad.any():
                i, j = np.argwhere(bad)[0]
                raise SchemaError(
                    f"code {rows[i, j]} out of range for variable "
                    f"{schema.names[j]!r} at row {i}"
                )
        rows = rows.copy()
        rows.setflags(write=False)
        self._schema = schema
        self._rows = rows

    @property
    def schema(self) -> Schema:
        return self._schema

    @property
    def rows(self) -> np.ndarray:
        return self._rows

    @property
    def n(self) -> int:
        return self._rows.shape[0]

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"Dataset(n={self.n}, variables={self.schema.names})"

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.schema.index(name)]

    def decode(self) -> list[list[str]]:
        levels = [v.levels for v in self.schema.variables]
        return [[levels[j][c] for j, c in enumerate(row)] for row in self.rows]

    @classmethod
    def encode(cls, schema: Schema, labels: Iterable[Sequence[str]]) -> "Dataset":
        lookup = [{lv: i for i, lv in enumerate(v.levels)} for v in schema.variables]
        rows = []
        for r, rec in enumerate(labels):
            codes = []
            for j, lab in enumerate(rec):
                try:
                    codes.append(lookup[j][str(lab)])
                except KeyError:
                    raise SchemaError(
                        f"unknown label {lab!r} in column {schema.names[j]!r} (row {r})"
                    ) from None
            rows.append(codes)
        return cls(schema, np.array(rows, dtype=np.int64).reshape(-1, schema.d))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.schema.names)
            writer.writerows(self.decode())


def load_csv(path: str | Path, schema: Schema, missing_policy: str = "error") -> Dataset:
    """Read a header-first UTF-8 CSV and encode it against ``schema``.

    Columns may appear in any order; extra columns are ignored. Empty cells
    count as missing: ``drop_rows`` discards such rows, ``error`` raises.
    """
    if missing_policy not in ("drop_rows", "error"):
        raise ValueError(f"unknown missing_policy {missing_policy!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing_cols = [n for n in schema.names if n not in header]
        if missing_cols:
            raise SchemaError(f"{path}: columns {missing_cols} not in header {header}")
        pos = [header.index(n) for n in schema.names]
        records = []
        for r, line in enumerate(reader):
            if not line:
                continue
            rec = [line[p].strip() if p < len(line) else "" for p in pos]
            if any(c == "" for c in rec):
                if missing_policy == "error":
                    raise SchemaError(f"{path}: missing value in data row {r}")
                continue
            records.append(rec)
    if not records:
        raise SchemaError(f"{path}: no complete rows")
    return Dataset.encode(schema, records)


def toy_schema() -> Schema:
    return Schema.from_cardinalities([2, 2, 2], names=["x1", "x2", "x3"])


def sample_toy_data(n: int, rng_seed=None) -> Dataset:
    """Three binary columns; the third follows an intercept-free logistic
    model with coefficients (1, 0) on the first two."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = as_generator(rng_seed)
    x12 = rng.integers(0, 2, size=(n, 2))
    logit = 1.0 * x12[:, 0] + 0.0 * x12[:, 1]
    x3 = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int64)
    return Dataset(toy_schema(), np.column_stack([x12, x3]))


@dataclass(frozen=True)
class StandInSpec:
    """Six-variable categorical stand-in for the large-schema experiments.

    The binary target ``C`` follows a logistic model on ``B`` and ``E``;
    the remaining variables hang off the triangle B-C-E as pairwise
    dependencies, so the generating distribution lies inside the log-linear
    family spanned by the 2-way queries below (tree width 2).
    """

    coef: tuple[float, float, float] = (-0.5, 1.0, -0.5)
    scopes: tuple[tuple[str, ...], ...] = (
        ("A", "B"), ("B", "C"), ("C", "E"), ("B", "E"), ("D", "E"), ("C", "F"),
    )
    schema: Schema = field(
        default_factory=lambda: Schema.from_cardinalities(
            [5, 2, 2, 3, 2, 2], names=["A", "B", "C", "D", "E", "F"]
        )
    )


def sample_stand_in_data(n: int, rng_seed=None, spec: StandInSpec | None = None) -> Dataset:
    spec = spec or StandInSpec()
    rng = as_generator(rng_seed)
    b = (rng.random(n) < 0.4).astype(np.int64)
    e = (rng.random(n) < np.where(b == 1, 0.7, 0.35)).astype(np.int64)
    b0, b1, b2 = spec.coef
    c = (rng.random(n) < 1.0 / (1.0 + np.exp(-(b0 + b1 * b + b2 * e)))).astype(np.int64)
    pa = np.array([[0.3, 0.25, 0.2, 0.15, 0.1], [0.1, 0.15, 0.2, 0.25, 0.3]])
    a = _categorical_rows(rng, pa[b])
    pd_ = np.array([[0.5, 0.3, 0.2], [0.2, 0.3, 0.5]])
    d = _categorical_rows(rng, pd_[e])
    f = (rng.random(n) < np.where(c == 1, 0.65, 0.3)).astype(np.int64)
    return Dataset(spec.schema, np.column_stack([a, b, c, d, e, f]))


def _categorical_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None]
    return np.minimum((u > cum).sum(axis=1), probs.shape[1] - 1).astype(np.int64)
