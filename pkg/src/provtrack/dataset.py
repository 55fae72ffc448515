"""Columnar dataset model and the preprocessing operator algebra.

Datasets are immutable after construction: every operator returns a new
dataset and never emits provenance itself. Rows carry stable integer ids;
unary operators preserve the ids of surviving rows, while operators that
mint rows (grouping, join, append) assign fresh ids larger than any id they
have seen (or from ``id_base`` when the caller manages a global id space).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence, Union

from .errors import OperatorError, SchemaError
from .exprs import (
    Expr,
    FeaturePredicate,
    bind_expr,
    eval_condition,
    eval_expr,
    eval_feature_predicate,
)
from .values import Value, is_number, render_value, sort_key, values_equal

# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    dataset_id: str
    schema: tuple[str, ...]
    columns: dict[str, list[Value]]
    row_ids: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.schema)) != len(self.schema):
            raise SchemaError("feature names must be distinct")
        n = len(self.row_ids)
        for feature in self.schema:
            col = self.columns.get(feature)
            if col is None or len(col) != n:
                raise SchemaError(f"column {feature!r} does not match the row count")
        if len(set(self.row_ids)) != n:
            raise SchemaError("row ids must be distinct")

    @cached_property
    def _pos(self) -> dict[int, int]:
        return {rid: i for i, rid in enumerate(self.row_ids)}

    @property
    def n_rows(self) -> int:
        return len(self.row_ids)

    @property
    def n_cols(self) -> int:
        return len(self.schema)

    def cell(self, row_id: int, feature: str) -> Value:
        if feature not in self.columns:
            raise SchemaError(f"unknown feature {feature!r}")
        return self.columns[feature][self._pos[row_id]]

    def row(self, row_id: int) -> tuple[Value, ...]:
        i = self._pos[row_id]
        return tuple(self.columns[f][i] for f in self.schema)

    def row_at(self, pos: int) -> tuple[Value, ...]:
        return tuple(self.columns[f][pos] for f in self.schema)

    def max_row_id(self) -> int:
        return max(self.row_ids, default=-1)

    def with_row_ids(self, row_ids: Sequence[int], dataset_id: str | None = None) -> "Dataset":
        if len(row_ids) != self.n_rows:
            raise SchemaError("row id vector does not match the row count")
        return Dataset(
            dataset_id or self.dataset_id,
            self.schema,
            {f: list(self.columns[f]) for f in self.schema},
            tuple(row_ids),
        )

    def equals_data(self, other: "Dataset") -> bool:
        """Schema and cell equality, ignoring row ids and dataset ids."""
        if self.schema != other.schema or self.n_rows != other.n_rows:
            return False
        for f in self.schema:
            a, b = self.columns[f], other.columns[f]
            if any(not values_equal(x, y) for x, y in zip(a, b)):
                return False
        return True


def from_rows(
    dataset_id: str,
    schema: Sequence[str],
    rows: Iterable[Sequence[Value]],
    row_ids: Sequence[int] | None = None,
) -> Dataset:
    schema = tuple(schema)
    cols: dict[str, list[Value]] = {f: [] for f in schema}
    count = 0
    for row in rows:
        if len(row) != len(schema):
            raise SchemaError(f"row {count} has {len(row)} fields, expected {len(schema)}")
        for f, v in zip(schema, row):
            cols[f].append(_normalize(v))
        count += 1
    ids = tuple(row_ids) if row_ids is not None else tuple(range(count))
    return Dataset(dataset_id, schema, cols, ids)


def _normalize(v) -> Value:
    if v is None or isinstance(v, (bool, str)):
        return v
    if isinstance(v, (int, float)):
        return float(v)
    raise SchemaError(f"unsupported cell value {v!r}")


# ---------------------------------------------------------------------------
# CSV ingestion and export
# ---------------------------------------------------------------------------


def ingest_csv(
    source: Union[str, Path, io.TextIOBase],
    dataset_id: str | None = None,
    header: bool = True,
) -> Dataset:
    """Read an RFC 4180 CSV into a dataset with inferred column types.

    Empty fields become missing values. A column is numeric when every
    non-empty field parses as a number, boolean when every non-empty field is
    ``true``/``false``, and textual otherwise. Row ids are assigned 0..n-1 in
    file order.
    """
    if isinstance(source, (str, Path)):
        name = dataset_id or Path(source).stem
        with open(source, newline="", encoding="utf-8") as fh:
            return _ingest_reader(csv.reader(fh), name, header)
    return _ingest_reader(csv.reader(source), dataset_id or "dataset", header)


def _ingest_reader(reader, dataset_id: str, header: bool) -> Dataset:
    rows = list(reader)
    if not rows:
        raise SchemaError("empty CSV input: a header row is required")
    if header:
        names = [h.strip() for h in rows[0]]
        body = rows[1:]
    else:
        width = len(rows[0])
        names = [f"f{i}" for i in range(width)]
        body = rows
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise SchemaError(f"duplicate header name(s): {', '.join(dupes)}")
    width = len(names)
    raw_cols: list[list[str | None]] = [[] for _ in range(width)]
    for idx, row in enumerate(body):
        if len(row) != width:
            raise SchemaError(f"ragged row {idx}: {len(row)} fields, expected {width}")
        for j, field_text in enumerate(row):
            raw_cols[j].append(field_text if field_text != "" else None)
    columns = {name: _infer_column(raw) for name, raw in zip(names, raw_cols)}
    return Dataset(dataset_id, tuple(names), columns, tuple(range(len(body))))


def _infer_column(raw: list[str | None]) -> list[Value]:
    non_null = [v for v in raw if v is not None]
    if non_null and all(_parses_as_number(v) for v in non_null):
        return [None if v is None else float(v) for v in raw]
    if non_null and all(v in ("true", "false") for v in non_null):
        return [None if v is None else v == "true" for v in raw]
    return list(raw)


def _parses_as_number(text: str) -> bool:
    try:
        v = float(text)
    except ValueError:
        return False
    return math.isfinite(v)


def to_csv(dataset: Dataset, target: Union[str, Path, io.TextIOBase]) -> None:
    """Write a dataset as CSV; missing values serialize as empty fields."""
    if isinstance(target, (str, Path)):
        with open(target, "w", newline="", encoding="utf-8") as fh:
            _write_csv(dataset, fh)
    else:
        _write_csv(dataset, target)


def _write_csv(dataset: Dataset, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(dataset.schema)
    for i in range(dataset.n_rows):
        writer.writerow([render_value(dataset.columns[f][i]) for f in dataset.schema])


# ---------------------------------------------------------------------------
# Operator payloads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformFn:
    """Builtin column rewrite: fillna, binarize, normalize, discretize,
    string_index, or value_map."""

    kind: str
    strategy: str | None = None  # fillna: most_frequent | mean | constant
    constant: Value = None
    threshold: float | None = None  # binarize
    mode: str | None = None  # normalize: minmax | zscore
    bins: int | None = None  # discretize
    mapping: tuple[tuple[Value, Value], ...] = ()  # value_map

    KINDS = ("fillna", "binarize", "normalize", "discretize", "string_index", "value_map")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise OperatorError(f"unknown transform builtin {self.kind!r}")


@dataclass(frozen=True)
class SelectOp:
    condition: Expr
    kind: str = field(default="select", init=False)


@dataclass(frozen=True)
class ProjectOp:
    predicate: FeaturePredicate
    kind: str = field(default="project", init=False)


@dataclass(frozen=True)
class VAugmentOp:
    x: tuple[str, ...]
    new_features: tuple[tuple[str, Expr], ...] = ()
    one_hot: str | None = None  # source feature for indicator expansion
    kind: str = field(default="vaugment", init=False)


@dataclass(frozen=True)
class HAugmentOp:
    group_keys: tuple[str, ...]
    agg: str  # avg | sum | count | min | max
    y: str
    kind: str = field(default="haugment", init=False)


@dataclass(frozen=True)
class TransformOp:
    x: tuple[str, ...]
    fn: TransformFn | Expr
    kind: str = field(default="transform", init=False)


@dataclass(frozen=True)
class JoinOp:
    keys: tuple[tuple[str, str], ...]
    how: str = "inner"  # inner | left | right | full
    kind: str = field(default="join", init=False)


@dataclass(frozen=True)
class AppendOp:
    kind: str = field(default="append", init=False)


@dataclass(frozen=True)
class AddRowsOp:
    rows: tuple[tuple[Value, ...], ...]
    kind: str = field(default="add_rows", init=False)


OperatorSpec = Union[SelectOp, ProjectOp, VAugmentOp, HAugmentOp, TransformOp, JoinOp, AppendOp, AddRowsOp]

AGGREGATES = ("avg", "sum", "count", "min", "max")
JOIN_TYPES = ("inner", "left", "right", "full")

# ---------------------------------------------------------------------------
# Unary operators
# ---------------------------------------------------------------------------


def select(d: Dataset, cond: Expr) -> Dataset:
    """Keep the rows satisfying the condition; ids and order survive."""
    bind_expr(cond, d.schema)
    keep = [i for i, rid in enumerate(d.row_ids) if eval_condition(cond, d, rid)]
    return Dataset(
        d.dataset_id,
        d.schema,
        {f: [d.columns[f][i] for i in keep] for f in d.schema},
        tuple(d.row_ids[i] for i in keep),
    )


def project(d: Dataset, pred: FeaturePredicate) -> Dataset:
    """Keep the features satisfying the predicate, in original order."""
    kept = [f for f in d.schema if eval_feature_predicate(pred, d, f)]
    if not kept:
        raise OperatorError("projection would produce an empty schema")
    return Dataset(d.dataset_id, tuple(kept), {f: list(d.columns[f]) for f in kept}, d.row_ids)


def vaugment(d: Dataset, op: VAugmentOp) -> Dataset:
    """Append new columns computed row-wise from the features in ``op.x``.

    Expression-based columns yield missing whenever any input cell is
    missing. The one-hot payload expands a feature into one 0/1 indicator
    per distinct value (sorted), named ``<feature>_<value>``; rows missing
    the source get 0 in every indicator.
    """
    for f in op.x:
        if f not in d.schema:
            raise SchemaError(f"unknown feature {f!r}")
    if op.one_hot is not None:
        return _one_hot(d, op.one_hot)
    new_names = [name for name, _ in op.new_features]
    if not new_names:
        raise OperatorError("vertical augmentation requires at least one new feature")
    clash = sorted(set(new_names) & set(d.schema))
    if clash:
        raise OperatorError(f"new feature(s) already in schema: {', '.join(clash)}")
    if len(set(new_names)) != len(new_names):
        raise OperatorError("new feature names must be distinct")
    columns = {f: list(d.columns[f]) for f in d.schema}
    for name, expr in op.new_features:
        bind_expr(expr, d.schema)
        out: list[Value] = []
        for i in range(d.n_rows):
            if any(d.columns[f][i] is None for f in op.x):
                out.append(None)
            else:
                out.append(eval_expr(expr, lambda feat, i=i: d.columns[feat][i]))
        columns[name] = out
    return Dataset(d.dataset_id, d.schema + tuple(new_names), columns, d.row_ids)


def one_hot_feature_names(d: Dataset, feature: str) -> list[str]:
    distinct = sorted({v for v in d.columns[feature] if v is not None}, key=sort_key)
    return [f"{feature}_{render_value(v)}" for v in distinct]


def _one_hot(d: Dataset, feature: str) -> Dataset:
    if feature not in d.schema:
        raise SchemaError(f"unknown feature {feature!r}")
    distinct = sorted({v for v in d.columns[feature] if v is not None}, key=sort_key)
    if not distinct:
        raise OperatorError(f"one-hot source {feature!r} has no non-missing values")
    names = [f"{feature}_{render_value(v)}" for v in distinct]
    clash = sorted(set(names) & set(d.schema))
    if clash:
        raise OperatorError(f"indicator name(s) already in schema: {', '.join(clash)}")
    columns = {f: list(d.columns[f]) for f in d.schema}
    src = d.columns[feature]
    for name, v in zip(names, distinct):
        columns[name] = [1.0 if values_equal(cell, v) else 0.0 for cell in src]
    return Dataset(d.dataset_id, d.schema + tuple(names), columns, d.row_ids)


GroupMapping = tuple[tuple[int, tuple[int, ...]], ...]


def haugment(d: Dataset, op: HAugmentOp, id_base: int | None = None) -> tuple[Dataset, GroupMapping]:
    """Group by ``op.group_keys`` and append one row per emitted group.

    Appended rows carry the group-key values, the aggregate in the ``op.y``
    column, and missing elsewhere. Rows with a missing group key are
    excluded from grouping. Groups whose aggregate input is entirely missing
    are omitted for avg/min/max; sum yields 0 and count counts all group
    rows. The returned mapping pairs each appended row id with the ids of
    the input rows that formed its group.
    """
    for f in op.group_keys:
        if f not in d.schema:
            raise SchemaError(f"unknown group key {f!r}")
    if op.y not in d.schema:
        raise SchemaError(f"unknown aggregate feature {op.y!r}")
    if op.agg not in AGGREGATES:
        raise OperatorError(f"unknown aggregate {op.agg!r}")
    groups: dict[tuple, list[int]] = {}
    order: list[tuple] = []
    for i, rid in enumerate(d.row_ids):
        key = tuple(d.columns[f][i] for f in op.group_keys)
        if any(k is None for k in key):
            continue
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(i)
    emitted: list[tuple[tuple, list[int], Value]] = []
    for key in order:
        members = groups[key]
        y_values = [d.columns[op.y][i] for i in members]
        agg = _aggregate(op.agg, y_values)
        if agg is _OMIT:
            continue
        emitted.append((key, members, agg))
    next_id = (d.max_row_id() + 1) if id_base is None else id_base
    columns = {f: list(d.columns[f]) for f in d.schema}
    new_ids: list[int] = []
    mapping: list[tuple[int, tuple[int, ...]]] = []
    for key, members, agg in emitted:
        rid = next_id
        next_id += 1
        new_ids.append(rid)
        mapping.append((rid, tuple(d.row_ids[i] for i in members)))
        for f in d.schema:
            if f in op.group_keys:
                columns[f].append(key[op.group_keys.index(f)])
            elif f == op.y:
                columns[f].append(agg)
            else:
                columns[f].append(None)
    return (
        Dataset(d.dataset_id, d.schema, columns, d.row_ids + tuple(new_ids)),
        tuple(mapping),
    )


class _Omit:
    pass


_OMIT = _Omit()


def _aggregate(agg: str, values: list[Value]):
    if agg == "count":
        return float(len(values))
    numeric = [v for v in values if v is not None]
    if any(not is_number(v) for v in numeric):
        raise OperatorError(f"aggregate {agg!r} requires numeric input")
    if agg == "sum":
        return float(sum(numeric))
    if not numeric:
        return _OMIT
    if agg == "avg":
        return sum(numeric) / len(numeric)
    if agg == "min":
        return min(numeric)
    return max(numeric)


def add_rows(d: Dataset, rows: Sequence[Sequence[Value]], id_base: int | None = None) -> Dataset:
    """Append literal rows (instance generation); fresh ids are minted."""
    next_id = (d.max_row_id() + 1) if id_base is None else id_base
    columns = {f: list(d.columns[f]) for f in d.schema}
    new_ids = []
    for row in rows:
        if len(row) != d.n_cols:
            raise SchemaError(f"new row has {len(row)} fields, expected {d.n_cols}")
        for f, v in zip(d.schema, row):
            columns[f].append(_normalize(v))
        new_ids.append(next_id)
        next_id += 1
    return Dataset(d.dataset_id, d.schema, columns, d.row_ids + tuple(new_ids))


def transform(d: Dataset, op: TransformOp) -> Dataset:
    """Rewrite values inside the columns named by ``op.x``; shape and schema
    are unchanged."""
    for f in op.x:
        if f not in d.schema:
            raise SchemaError(f"unknown feature {f!r}")
    columns = {f: list(d.columns[f]) for f in d.schema}
    for f in op.x:
        columns[f] = _apply_transform(d, f, op.fn)
    return Dataset(d.dataset_id, d.schema, columns, d.row_ids)


def _apply_transform(d: Dataset, feature: str, fn: TransformFn | Expr) -> list[Value]:
    col = d.columns[feature]
    if not isinstance(fn, TransformFn):
        bind_expr(fn, d.schema)
        out = []
        for i, v in enumerate(col):
            if v is None:
                out.append(None)
            else:
                out.append(eval_expr(fn, lambda feat, i=i: d.columns[feat][i]))
        return out
    if fn.kind == "fillna":
        return _fillna(col, fn)
    if fn.kind == "binarize":
        if fn.threshold is None:
            raise OperatorError("binarize requires a threshold")
        return [None if v is None else (1.0 if _require_number(v) > fn.threshold else 0.0) for v in col]
    if fn.kind == "normalize":
        return _normalize_column(col, fn.mode or "minmax")
    if fn.kind == "discretize":
        if not fn.bins or fn.bins < 1:
            raise OperatorError("discretize requires a positive bin count")
        return _discretize(col, fn.bins)
    if fn.kind == "string_index":
        distinct = sorted({v for v in col if v is not None}, key=sort_key)
        index = {v: float(i) for i, v in enumerate(distinct)}
        return [None if v is None else index[v] for v in col]
    if fn.kind == "value_map":
        table = list(fn.mapping)
        out = []
        for v in col:
            for old, new in table:
                if values_equal(v, old):
                    v = new
                    break
            out.append(v)
        return out
    raise OperatorError(f"unknown transform builtin {fn.kind!r}")


def _require_number(v: Value) -> float:
    if not is_number(v):
        raise OperatorError(f"expected a numeric value, got {render_value(v)!r}")
    return v


def _fillna(col: list[Value], fn: TransformFn) -> list[Value]:
    strategy = fn.strategy or "most_frequent"
    present = [v for v in col if v is not None]
    if strategy == "constant":
        fill = fn.constant
    elif strategy == "mean":
        if not present:
            return list(col)
        fill = sum(_require_number(v) for v in present) / len(present)
    elif strategy == "most_frequent":
        if not present:
            return list(col)
        counts: dict[Value, int] = {}
        for v in present:
            counts[v] = counts.get(v, 0) + 1
        best = max(counts.values())
        fill = sorted((v for v, c in counts.items() if c == best), key=sort_key)[0]
    else:
        raise OperatorError(f"unknown fillna strategy {strategy!r}")
    return [fill if v is None else v for v in col]


def _normalize_column(col: list[Value], mode: str) -> list[Value]:
    numbers = [_require_number(v) for v in col if v is not None]
    if not numbers:
        return list(col)
    if mode == "minmax":
        lo, hi = min(numbers), max(numbers)
        span = hi - lo
        return [None if v is None else (0.0 if span == 0 else (v - lo) / span) for v in col]
    if mode == "zscore":
        mean = sum(numbers) / len(numbers)
        var = sum((v - mean) ** 2 for v in numbers) / len(numbers)
        std = math.sqrt(var)
        return [None if v is None else (0.0 if std == 0 else (v - mean) / std) for v in col]
    raise OperatorError(f"unknown normalize mode {mode!r}")


def _discretize(col: list[Value], bins: int) -> list[Value]:
    numbers = [_require_number(v) for v in col if v is not None]
    if not numbers:
        return list(col)
    lo, hi = min(numbers), max(numbers)
    span = hi - lo
    out = []
    for v in col:
        if v is None:
            out.append(None)
        elif span == 0:
            out.append(0.0)
        else:
            out.append(float(min(int((v - lo) / span * bins), bins - 1)))
    return out


# ---------------------------------------------------------------------------
# Binary operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JoinLayout:
    """Output column naming for a join and per-operand projection maps.

    Key pairs with equal names merge into a single output column; other name
    collisions are suffixed ``_l``/``_r``. ``left_map``/``right_map`` send
    each operand feature to its output column name.
    """

    schema: tuple[str, ...]
    left_map: dict[str, str]
    right_map: dict[str, str]
    merged_keys: tuple[str, ...]


def join_layout(left_schema: Sequence[str], right_schema: Sequence[str], keys: Sequence[tuple[str, str]]) -> JoinLayout:
    left_set, right_set = set(left_schema), set(right_schema)
    merged = tuple(lk for lk, rk in keys if lk == rk)
    left_map: dict[str, str] = {}
    right_map: dict[str, str] = {}
    schema: list[str] = []
    for f in left_schema:
        name = f
        if f in right_set and f not in merged:
            name = f + "_l"
        left_map[f] = name
        schema.append(name)
    for f in right_schema:
        if f in merged:
            right_map[f] = f
            continue
        name = f
        if f in left_set:
            name = f + "_r"
        right_map[f] = name
        schema.append(name)
    return JoinLayout(tuple(schema), left_map, right_map, merged)


def join_frames(
    left: Dataset,
    right: Dataset,
    op: JoinOp,
    id_base: int | None = None,
    dataset_id: str | None = None,
) -> Dataset:
    """Equijoin of the given type over the key pairs.

    Missing keys never match. Output order: left rows in order with their
    matches in right order, then (for right/full) unmatched right rows.
    All output rows receive fresh ids.
    """
    if op.how not in JOIN_TYPES:
        raise OperatorError(f"unknown join type {op.how!r}")
    if not op.keys:
        raise OperatorError("join requires at least one key pair")
    for lk, rk in op.keys:
        if lk not in left.schema:
            raise SchemaError(f"unknown left key {lk!r}")
        if rk not in right.schema:
            raise SchemaError(f"unknown right key {rk!r}")
    layout = join_layout(left.schema, right.schema, op.keys)
    index: dict[tuple, list[int]] = {}
    for j in range(right.n_rows):
        key = tuple(right.columns[rk][j] for _, rk in op.keys)
        if any(k is None for k in key):
            continue
        index.setdefault(key, []).append(j)
    out_rows: list[tuple[int | None, int | None]] = []  # (left pos, right pos)
    matched_right: set[int] = set()
    for i in range(left.n_rows):
        key = tuple(left.columns[lk][i] for lk, _ in op.keys)
        matches = [] if any(k is None for k in key) else index.get(key, [])
        if matches:
            for j in matches:
                matched_right.add(j)
                out_rows.append((i, j))
        elif op.how in ("left", "full"):
            out_rows.append((i, None))
    if op.how in ("right", "full"):
        for j in range(right.n_rows):
            if j not in matched_right:
                out_rows.append((None, j))
    columns: dict[str, list[Value]] = {name: [] for name in layout.schema}
    for i, j in out_rows:
        for f in left.schema:
            name = layout.left_map[f]
            if i is not None:
                columns[name].append(left.columns[f][i])
            elif f in layout.merged_keys:
                rk = _pair_for_merged(op.keys, f)
                columns[name].append(right.columns[rk][j])
            else:
                columns[name].append(None)
        for f in right.schema:
            if f in layout.merged_keys:
                continue
            name = layout.right_map[f]
            columns[name].append(right.columns[f][j] if j is not None else None)
    base = id_base if id_base is not None else max(left.max_row_id(), right.max_row_id()) + 1
    return Dataset(
        dataset_id or f"{left.dataset_id}_join_{right.dataset_id}",
        layout.schema,
        columns,
        tuple(range(base, base + len(out_rows))),
    )


def _pair_for_merged(keys: Sequence[tuple[str, str]], name: str) -> str:
    for lk, rk in keys:
        if lk == name and lk == rk:
            return rk
    raise OperatorError(f"{name!r} is not a merged key")


def append_frames(
    left: Dataset,
    right: Dataset,
    id_base: int | None = None,
    dataset_id: str | None = None,
) -> Dataset:
    """Stack left rows above right rows over the union schema.

    Cells for features absent from a row's operand are missing. All output
    rows receive fresh ids; n' = n_left + n_right.
    """
    schema = list(left.schema) + [f for f in right.schema if f not in left.schema]
    columns: dict[str, list[Value]] = {f: [] for f in schema}
    for i in range(left.n_rows):
        for f in schema:
            columns[f].append(left.columns[f][i] if f in left.columns else None)
    for j in range(right.n_rows):
        for f in schema:
            columns[f].append(right.columns[f][j] if f in right.columns else None)
    base = id_base if id_base is not None else max(left.max_row_id(), right.max_row_id()) + 1
    n = left.n_rows + right.n_rows
    return Dataset(
        dataset_id or f"{left.dataset_id}_append_{right.dataset_id}",
        tuple(schema),
        columns,
        tuple(range(base, base + n)),
    )


# ---------------------------------------------------------------------------
# Column statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnStats:
    feature: str
    count: int
    null_count: int
    min: float | None = None
    max: float | None = None
    mean: float | None = None
    std: float | None = None
    distinct_count: int | None = None
    mode: Value = None

    def to_dict(self) -> dict:
        out: dict = {"feature": self.feature, "count": self.count, "null_count": self.null_count}
        if self.min is not None:
            out.update(min=self.min, max=self.max, mean=self.mean, std=self.std)
        if self.distinct_count is not None:
            out.update(distinct_count=self.distinct_count, mode=self.mode)
        return out

    @staticmethod
    def from_dict(data: dict) -> "ColumnStats":
        return ColumnStats(
            feature=data["feature"],
            count=data["count"],
            null_count=data["null_count"],
            min=data.get("min"),
            max=data.get("max"),
            mean=data.get("mean"),
            std=data.get("std"),
            distinct_count=data.get("distinct_count"),
            mode=data.get("mode"),
        )


def column_stats(d: Dataset, feature: str) -> ColumnStats:
    """Summary statistics for one column.

    Numeric columns report min/max/mean and population standard deviation;
    other columns report distinct count and mode (ties broken by value
    order). All-missing columns report counts only.
    """
    if feature not in d.schema:
        raise SchemaError(f"unknown feature {feature!r}")
    col = d.columns[feature]
    count = len(col)
    present = [v for v in col if v is not None]
    null_count = count - len(present)
    if not present:
        return ColumnStats(feature, count, null_count)
    if all(is_number(v) for v in present):
        mean = sum(present) / len(present)
        var = sum((v - mean) ** 2 for v in present) / len(present)
        return ColumnStats(
            feature,
            count,
            null_count,
            min=min(present),
            max=max(present),
            mean=mean,
            std=math.sqrt(var),
        )
    counts: dict[Value, int] = {}
    for v in present:
        counts[v] = counts.get(v, 0) + 1
    best = max(counts.values())
    mode = sorted((v for v, c in counts.items() if c == best), key=sort_key)[0]
    return ColumnStats(feature, count, null_count, distinct_count=len(counts), mode=mode)


# ---------------------------------------------------------------------------
# Generic dispatch
# ---------------------------------------------------------------------------


def apply_unary(d: Dataset, op: OperatorSpec, id_base: int | None = None) -> tuple[Dataset, GroupMapping | None]:
    """Apply a unary operator spec; grouping also returns its group mapping."""
    if isinstance(op, SelectOp):
        return select(d, op.condition), None
    if isinstance(op, ProjectOp):
        return project(d, op.predicate), None
    if isinstance(op, VAugmentOp):
        return vaugment(d, op), None
    if isinstance(op, HAugmentOp):
        out, mapping = haugment(d, op, id_base=id_base)
        return out, mapping
    if isinstance(op, TransformOp):
        return transform(d, op), None
    if isinstance(op, AddRowsOp):
        return add_rows(d, op.rows, id_base=id_base), None
    raise OperatorError(f"not a unary operator: {op!r}")
