"""Typed in-memory tables: CSV loading, schema inference, missing-row filtering, splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"

# Strings treated as missing in any column.
MISSING_TOKENS = frozenset({"", "nan", "NaN", "NAN", "NA", "N/A", "null", "NULL", "None", "?"})


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    declared_categories: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.name:
            raise DataError("column name must be nonempty")
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.declared_categories is not None:
            if self.kind != CATEGORICAL:
                raise DataError(f"column {self.name!r}: declared categories on a numeric column")
            cats = tuple(self.declared_categories)
            if not cats or len(set(cats)) != len(cats):
                raise DataError(f"column {self.name!r}: declared categories must be nonempty and unique")
            object.__setattr__(self, "declared_categories", cats)

    @property
    def is_numeric(self) -> bool:
        return self.kind == NUMERIC


@dataclass(frozen=True)
class Schema:
    columns: tuple[ColumnSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate column names in schema: {names}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def __len__(self):
        return len(self.columns)

    def __getitem__(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_dict(self) -> dict:
        cols = []
        for c in self.columns:
            d = {"name": c.name, "kind": c.kind}
            if c.declared_categories is not None:
                d["categories"] = list(c.declared_categories)
            cols.append(d)
        return {"columns": cols}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(tuple(
            ColumnSpec(c["name"], c["kind"], tuple(c["categories"]) if c.get("categories") else None)
            for c in d["columns"]
        ))

    @classmethod
    def from_json(cls, path: str | Path) -> "Schema":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Table:
    """Column-major table. Numeric columns are float64 arrays with NaN for missing;
    categorical columns are object arrays of str with None for missing."""

    schema: Schema
    data: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "data", dict(self.data))
        if set(self.data) != set(self.schema.names):
            raise DataError("table data keys do not match schema")
        lengths = {len(v) for v in self.data.values()}
        if len(lengths) > 1:
            raise DataError("columns have unequal lengths")
        for c in self.schema.columns:
            col = self.data[c.name]
            if c.is_numeric:
                col = np.array(col, dtype=np.float64)
                if np.isinf(col).any():
                    raise DataError(f"column {c.name!r}: non-finite numeric value")
            else:
                col = np.array(col, dtype=object)
            col.setflags(write=False)
            self.data[c.name] = col

    @classmethod
    def from_columns(cls, schema: Schema, columns: dict[str, Sequence]) -> "Table":
        return cls(schema, {k: np.array(v, dtype=np.float64 if schema[k].is_numeric else object)
                            for k, v in columns.items()})

    @property
    def n_rows(self) -> int:
        if not self.data:
            return 0
        return len(next(iter(self.data.values())))

    def __len__(self):
        return self.n_rows

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[name]

    def take(self, idx) -> "Table":
        idx = np.asarray(idx, dtype=np.int64)
        return Table(self.schema, {k: v[idx] for k, v in self.data.items()})

    def missing_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_rows, dtype=bool)
        for c in self.schema.columns:
            col = self.data[c.name]
            if c.is_numeric:
                mask |= np.isnan(col)
            else:
                mask |= np.array([v is None for v in col], dtype=bool)
        return mask

    def rows(self) -> list[tuple]:
        cols = [self.data[n] for n in self.schema.names]
        return [tuple(c[i] for c in cols) for i in range(self.n_rows)]

    def select(self, names: Iterable[str]) -> "Table":
        names = list(names)
        return Table(Schema(tuple(self.schema[n] for n in names)), {n: self.data[n] for n in names})

    def concat(self, other: "Table") -> "Table":
        if other.schema.names != self.schema.names:
            raise DataError("cannot concatenate tables with different schemas")
        return Table(self.schema, {n: np.concatenate([self.data[n], other.data[n]]) for n in self.schema.names})


def _is_missing(cell: str) -> bool:
    return cell.strip() in MISSING_TOKENS


def _parse_float(cell: str) -> float | None:
    try:
        v = float(cell)
    except ValueError:
        return None
    return v


def infer_schema(grid: list[list[str]]) -> Schema:
    """Infer column kinds from a raw grid whose first row is the header.

    A column is numeric iff every non-missing cell parses as a finite real and at
    least one such cell exists; all-missing columns become categorical.
    """
    if not grid or not grid[0]:
        raise DataError("cannot infer schema from an empty grid")
    header, body = grid[0], grid[1:]
    cols = []
    for j, name in enumerate(header):
        present = [r[j] for r in body if j < len(r) and not _is_missing(r[j])]
        numeric = bool(present)
        for cell in present:
            v = _parse_float(cell)
            if v is None or not math.isfinite(v):
                numeric = False
                break
        cols.append(ColumnSpec(name, NUMERIC if numeric else CATEGORICAL))
    return Schema(tuple(cols))


def table_from_grid(grid: list[list[str]], schema: Schema | None = None) -> Table:
    if not grid:
        raise DataError("empty CSV: header row required")
    header = grid[0]
    if len(set(header)) != len(header):
        raise DataError(f"duplicate header names: {header}")
    if schema is None:
        schema = infer_schema(grid)
    elif set(header) != set(schema.names):
        raise DataError(f"header {sorted(header)} does not match schema {sorted(schema.names)}")
    pos = {name: j for j, name in enumerate(header)}
    body = grid[1:]
    data = {}
    for c in schema.columns:
        j = pos[c.name]
        out = []
        for i, row in enumerate(body, start=1):
            if len(row) != len(header):
                raise DataError(f"row {i}: expected {len(header)} cells, got {len(row)}")
            cell = row[j]
            if _is_missing(cell):
                out.append(np.nan if c.is_numeric else None)
            elif c.is_numeric:
                v = _parse_float(cell)
                if v is None or math.isinf(v):
                    raise DataError(f"row {i}, column {c.name!r}: cannot parse {cell!r} as a number")
                out.append(v)
            else:
                out.append(cell)
        data[c.name] = np.array(out, dtype=np.float64 if c.is_numeric else object)
    return Table(schema, data)


def load_csv(path: str | Path, schema: Schema | None = None) -> Table:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        grid = [row for row in csv.reader(fh)]
    return table_from_grid(grid, schema)


def format_cell(value, numeric: bool) -> str:
    if numeric:
        return "" if np.isnan(value) else repr(float(value))
    return "" if value is None else str(value)


def write_csv(t: Table, path: str | Path) -> None:
    cols = [(t[c.name], c.is_numeric) for c in t.schema.columns]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(t.schema.names)
        for i in range(t.n_rows):
            w.writerow([format_cell(col[i], num) for col, num in cols])


def drop_missing(t: Table) -> Table:
    return t.take(np.flatnonzero(~t.missing_mask()))


def split(t: Table, fraction: float, seed: int) -> tuple[Table, Table]:
    if not 0 < fraction < 1:
        raise DataError(f"split fraction must lie in (0, 1), got {fraction}")
    n = t.n_rows
    if n < 2:
        raise DataError(f"need at least 2 rows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(fraction * n))
    return t.take(perm[:k]), t.take(perm[k:])
