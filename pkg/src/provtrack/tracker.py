"""Change-based provenance capture.

The tracker never inspects operator internals: it snapshots each handle's
dataset after every tracked step, diffs the snapshot against the next
result, classifies the change, and instantiates the matching template.
Declared operator metadata (augmentation inputs, group keys, join keys) is
consulted only to fill template variables that observation alone cannot
recover; classification itself is purely change-based.

Disabling ``dataframe_tracking`` lets several operators run as one logical
step: mutations accumulate against the last tracked snapshot and the next
tracked step diffs against it, which is how add-then-drop column recipes
(one-hot encodings) collapse into a single composite provlet.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

from . import provmodel
from .dataset import (
    AddRowsOp,
    AppendOp,
    Dataset,
    HAugmentOp,
    JoinOp,
    OperatorSpec,
    ProjectOp,
    SelectOp,
    TransformOp,
    VAugmentOp,
    apply_unary,
    append_frames,
    column_stats,
    join_frames,
    join_layout,
)
from .errors import IntegrityError, OperatorError, AmbiguousChangeWarning
from .exprs import print_expr, print_feature_predicate
from .provmodel import Activity, Provlet, entity_id, make_activity
from .store import OpRecord, ProvLog
from .values import Value, hash_values

# ---------------------------------------------------------------------------
# Diff
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShapeChange:
    dn_rows: int
    dn_cols: int
    added_features: tuple[str, ...]
    dropped_features: tuple[str, ...]
    added_row_ids: tuple[int, ...]
    dropped_row_ids: tuple[int, ...]

    @property
    def rows_changed(self) -> bool:
        return bool(self.added_row_ids or self.dropped_row_ids)

    @property
    def cols_changed(self) -> bool:
        return bool(self.added_features or self.dropped_features)


@dataclass(frozen=True)
class ValueChange:
    # feature -> [(row_id, old, new)] over surviving rows of shared features
    changes: dict[str, list[tuple[int, Value, Value]]]
    null_delta: dict[str, int]

    @property
    def any_changes(self) -> bool:
        return any(self.changes.values())


def _cells_equal(x: Value, y: Value) -> bool:
    return x is y or (type(x) is type(y) and x == y)


def diff(before: Dataset, after: Dataset) -> tuple[ShapeChange, ValueChange]:
    """Row diff by id-set difference; value diff cell by cell on surviving
    rows over shared features."""
    before_rows = set(before.row_ids)
    after_rows = set(after.row_ids)
    added_rows = tuple(rid for rid in after.row_ids if rid not in before_rows)
    dropped_rows = tuple(rid for rid in before.row_ids if rid not in after_rows)
    added_features = tuple(f for f in after.schema if f not in before.schema)
    dropped_features = tuple(f for f in before.schema if f not in after.schema)
    shape = ShapeChange(
        dn_rows=after.n_rows - before.n_rows,
        dn_cols=after.n_cols - before.n_cols,
        added_features=added_features,
        dropped_features=dropped_features,
        added_row_ids=added_rows,
        dropped_row_ids=dropped_rows,
    )
    shared_features = [f for f in before.schema if f in set(after.schema)]
    surviving = [rid for rid in before.row_ids if rid in after_rows]
    changes: dict[str, list[tuple[int, Value, Value]]] = {}
    null_delta: dict[str, int] = {}
    same_rows = before.row_ids == after.row_ids
    for f in shared_features:
        col_before = before.columns[f]
        col_after = after.columns[f]
        cells: list[tuple[int, Value, Value]] = []
        if same_rows:
            if col_before != col_after or _needs_scan(col_before, col_after):
                for i, rid in enumerate(before.row_ids):
                    old, new = col_before[i], col_after[i]
                    if not _cells_equal(old, new):
                        cells.append((rid, old, new))
        else:
            for rid in surviving:
                old = before.cell(rid, f)
                new = after.cell(rid, f)
                if not _cells_equal(old, new):
                    cells.append((rid, old, new))
        changes[f] = cells
        delta = sum(1 for v in col_after if v is None) - sum(1 for v in col_before if v is None)
        null_delta[f] = delta
    return shape, ValueChange(changes, null_delta)


def _needs_scan(a: list, b: list) -> bool:
    # list.__eq__ treats True == 1.0; rescan when a column mixes bools and
    # numbers so the typed cell comparison decides.
    return any(isinstance(v, bool) for v in a) != any(isinstance(v, bool) for v in b)


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

SELECTION = "selection"
PROJECTION = "projection"
VAUGMENT = "vertical_augmentation"
HAUGMENT = "horizontal_augmentation"
TRANSFORMATION = "transformation"
COMPOSITE = "composite_transformation"
AMBIGUOUS = "ambiguous"
NOOP = "noop"

FAMILIES = (SELECTION, PROJECTION, VAUGMENT, HAUGMENT, TRANSFORMATION, COMPOSITE, AMBIGUOUS, NOOP)


@dataclass(frozen=True)
class TemplateSelection:
    family: str
    # transformation: per-feature binding mode (one_to_one | column_wide)
    value_modes: dict[str, str] = field(default_factory=dict)
    # composite: inferred source (dropped) and new (added or pending) features
    source_features: tuple[str, ...] = ()
    new_features: tuple[str, ...] = ()
    diagnostic: str | None = None


@dataclass
class TrackerState:
    """Mutable observation state scoped to one pipeline run."""

    op_seq: int = 0
    tracking_enabled: bool = True
    pending_added: tuple[str, ...] = ()
    pending_op_seq: int | None = None
    pending_activity: Activity | None = None

    def clear_pending(self) -> None:
        self.pending_added = ()
        self.pending_op_seq = None
        self.pending_activity = None


def classify(shape: ShapeChange, values: ValueChange, state: TrackerState) -> TemplateSelection:
    """Template selection from the observed change, one dimension at a time.

    Fewer rows selects the row-invalidation template, more rows the
    grouping template. Added columns select vertical augmentation and open
    a one-step window; dropped columns inside that window (or added and
    dropped together) select the composite transformation. Otherwise
    dropped columns select projection. With the shape unchanged, a column
    whose missing count fell is an imputation (column-wide bindings) and any
    other changed column a one-to-one transformation. Rows and columns
    changing together is ambiguous and falls back to a coarse template.
    """
    if shape.rows_changed and shape.cols_changed:
        return TemplateSelection(
            AMBIGUOUS,
            diagnostic="rows and columns changed in one step; emitting coarse fallback",
        )
    if shape.added_row_ids and shape.dropped_row_ids:
        return TemplateSelection(
            AMBIGUOUS,
            diagnostic="rows were both added and dropped in one step; emitting coarse fallback",
        )
    if shape.dropped_row_ids:
        return TemplateSelection(SELECTION)
    if shape.added_row_ids:
        return TemplateSelection(HAUGMENT)
    if shape.added_features and shape.dropped_features:
        return TemplateSelection(
            COMPOSITE,
            source_features=shape.dropped_features,
            new_features=shape.added_features,
        )
    if shape.added_features:
        return TemplateSelection(VAUGMENT, new_features=shape.added_features)
    if shape.dropped_features:
        if state.pending_added:
            return TemplateSelection(
                COMPOSITE,
                source_features=shape.dropped_features,
                new_features=state.pending_added,
            )
        return TemplateSelection(PROJECTION, source_features=shape.dropped_features)
    modes = {}
    for f, cells in values.changes.items():
        if not cells:
            continue
        modes[f] = "column_wide" if values.null_delta.get(f, 0) < 0 else "one_to_one"
    if modes:
        return TemplateSelection(TRANSFORMATION, value_modes=modes)
    return TemplateSelection(NOOP)


# ---------------------------------------------------------------------------
# Tracker
# ---------------------------------------------------------------------------


class ProvenanceTracker:
    """Observes dataset transformations and materializes their provenance.

    ``subscribe`` wraps datasets into tracked handles and emits their
    ingestion provlets; operator applications through the handles are then
    observed. ``dataframe_tracking`` pauses observation so several commands
    land in one diff. With ``capture=False`` the data path is identical but
    nothing is observed or written (used for overhead baselines).
    """

    def __init__(
        self,
        log_path: Union[str, Path, None] = None,
        capture: bool = True,
        workers: int = 1,
        keep_provlets: bool = True,
        async_writes: bool = False,
    ):
        self.state = TrackerState()
        self.capture = capture
        self.workers = max(1, workers)
        self.keep_provlets = keep_provlets
        self.provlets: list[Provlet] = []
        self.log: ProvLog | None = ProvLog(log_path, async_writes=async_writes) if log_path else None
        self._versions: dict[tuple[int, str], str] = {}
        self._next_row_id = 0
        self._subscribed: set[str] = set()
        self._frame_seq = 0
        self.entity_count = 0
        self.relation_count = 0
        self.capture_seconds = 0.0
        self.warnings: list[str] = []

    # -- public API --------------------------------------------------------

    @property
    def dataframe_tracking(self) -> bool:
        return self.state.tracking_enabled

    @dataframe_tracking.setter
    def dataframe_tracking(self, enabled: bool) -> None:
        self.state.tracking_enabled = bool(enabled)

    def subscribe(self, datasets: Sequence[Dataset]) -> list["TrackedFrame"]:
        """Wrap datasets for observation and record their ingestion.

        Row ids are rebased into the run-wide id space so every element of
        the run is uniquely addressable by (row, feature).
        """
        frames = []
        for d in datasets:
            if d.dataset_id in self._subscribed:
                raise OperatorError(f"dataset {d.dataset_id!r} is already subscribed")
            self._subscribed.add(d.dataset_id)
            base = self._next_row_id
            rebased = d.with_row_ids(range(base, base + d.n_rows))
            self._next_row_id = base + d.n_rows
            if self.capture:
                start = time.perf_counter()
                op_seq = self.state.op_seq
                self.state.op_seq += 1
                provlets = provmodel.gen_ingestion_provlets(rebased, op_seq)
                record = self._op_record(op_seq, "Ingestion", d.dataset_id, rebased.schema, None, rebased)
                self._commit(provlets, record)
                self.capture_seconds += time.perf_counter() - start
            frames.append(TrackedFrame(self, rebased, rebased))
        return frames

    def close(self) -> None:
        if self.log is not None:
            self.log.close()

    # -- internals ---------------------------------------------------------

    def _alloc_base(self) -> int:
        return self._next_row_id

    def _note_ids(self, d: Dataset) -> None:
        self._next_row_id = max(self._next_row_id, d.max_row_id() + 1)

    def _resolve(self, row_id: int, feature: str) -> str:
        eid = self._versions.get((row_id, feature))
        if eid is None:
            raise IntegrityError(f"no entity version for row {row_id}, feature {feature!r}")
        return eid

    def _commit(self, provlets: list[Provlet], record: OpRecord | None) -> None:
        deduped = _dedup_relations(provlets)
        for p in deduped:
            for e in p.entities:
                self._versions[(e.row_id, e.feature)] = e.id
                self.entity_count += 1
            self.relation_count += len(p.relations)
        if self.keep_provlets:
            self.provlets.extend(deduped)
        if self.log is not None:
            self.log.append_provlets(deduped, op_record=record)

    def _op_record(
        self,
        op_seq: int,
        operator_class: str,
        function_name: str,
        affected: Sequence[str],
        before: Dataset | None,
        after: Dataset,
    ) -> OpRecord:
        pre_stats = tuple(column_stats(before, f) for f in before.schema) if before is not None else ()
        return OpRecord(
            op_seq=op_seq,
            operator_class=operator_class,
            function_name=function_name,
            affected_features=tuple(affected),
            input_ids=(before.dataset_id,) if before is not None else (),
            output_id=after.dataset_id,
            pre_shape=(before.n_rows, before.n_cols) if before is not None else (0, 0),
            post_shape=(after.n_rows, after.n_cols),
            pre_stats=pre_stats,
            post_stats=tuple(column_stats(after, f) for f in after.schema),
        )

    def _chunks(self, items: Sequence) -> list[Sequence]:
        if self.workers <= 1 or len(items) < 2 * self.workers:
            return [items]
        size = (len(items) + self.workers - 1) // self.workers
        return [items[i : i + size] for i in range(0, len(items), size)]

    def _run_chunked(self, fn, items: Sequence) -> list[Provlet]:
        """Apply ``fn(chunk) -> list[Provlet]`` over row chunks; the merged
        output is ordered by chunk, so the result is independent of worker
        scheduling."""
        chunks = self._chunks(items)
        if len(chunks) == 1:
            return fn(chunks[0])
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            parts = list(pool.map(fn, chunks))
        merged: list[Provlet] = []
        for part in parts:
            merged.extend(part)
        return merged

    # -- unary observation ---------------------------------------------------

    def track_unary(self, before: Dataset, after: Dataset, hint: OperatorSpec | None = None) -> list[Provlet]:
        """Diff, classify, and instantiate templates for one tracked step."""
        start = time.perf_counter()
        shape, values = diff(before, after)
        selection = classify(shape, values, self.state)
        if selection.family == NOOP:
            self.state.clear_pending()
            self.capture_seconds += time.perf_counter() - start
            return []
        op_seq = self.state.op_seq
        self.state.op_seq += 1
        provlets, activity = self._instantiate(selection, shape, values, before, after, op_seq, hint)
        if not provlets:
            # Schema-only effects (e.g. a column added over zero rows) still
            # record the activity for step-level queries.
            provlets = [Provlet((activity,), (), ())]
        if selection.family not in (TRANSFORMATION, COMPOSITE, AMBIGUOUS) and values.any_changes:
            msg = (
                f"step {op_seq}: value changes alongside a shape change are not captured "
                f"by the {selection.family} template"
            )
            self.warnings.append(msg)
            warnings.warn(msg, AmbiguousChangeWarning)
        record = self._op_record(
            op_seq,
            activity.operator_class,
            activity.function_name,
            activity.affected_features,
            before,
            after,
        )
        next_pending = (
            (selection.new_features, op_seq, activity)
            if selection.family == VAUGMENT
            else None
        )
        self.state.clear_pending()
        if next_pending is not None:
            self.state.pending_added, self.state.pending_op_seq, self.state.pending_activity = next_pending
        self._commit(provlets, record)
        self.capture_seconds += time.perf_counter() - start
        return provlets

    def _instantiate(
        self,
        selection: TemplateSelection,
        shape: ShapeChange,
        values: ValueChange,
        before: Dataset,
        after: Dataset,
        op_seq: int,
        hint: OperatorSpec | None,
    ) -> tuple[list[Provlet], Activity]:
        resolve = self._resolve
        if selection.family == SELECTION:
            text = print_expr(hint.condition) if isinstance(hint, SelectOp) else ""
            dropped = list(shape.dropped_row_ids)
            provlets = self._run_chunked(
                lambda rows: provmodel.gen_selection_provlets(rows, before.schema, before, op_seq, resolve, text),
                dropped,
            )
            return provlets, provlets[0].activities[0]
        if selection.family == PROJECTION:
            text = print_feature_predicate(hint.predicate) if isinstance(hint, ProjectOp) else ""
            provlets = provmodel.gen_projection_provlets(
                shape.dropped_features, before, op_seq, resolve, text
            )
            return provlets, provlets[0].activities[0]
        if selection.family == VAUGMENT:
            x: tuple[str, ...] = ()
            fn_name = ""
            if isinstance(hint, VAugmentOp):
                x = (hint.one_hot,) if hint.one_hot is not None else hint.x
                fn_name = "one_hot" if hint.one_hot is not None else ",".join(n for n, _ in hint.new_features)
            y = shape.added_features
            provlets = self._run_chunked(
                lambda rows: provmodel.gen_va_provlets(
                    x, y, before, _subset_rows(after, rows), op_seq, resolve, fn_name
                ),
                list(after.row_ids),
            )
            activity = (
                provlets[0].activities[0]
                if provlets
                else make_activity(op_seq, "VerticalAugmentation", fn_name, y)
            )
            return provlets, activity
        if selection.family == HAUGMENT:
            keys, y = self._ha_roles(before, after, shape.added_row_ids, hint)
            mapping = reconstruct_group_mapping(before, after, shape.added_row_ids, keys)
            fn_name = hint.agg if isinstance(hint, HAugmentOp) else ""
            provlets = provmodel.gen_ha_provlets(mapping, keys, y, before, after, op_seq, resolve, fn_name)
            return provlets, provlets[0].activities[0]
        if selection.family == COMPOSITE:
            return self._instantiate_composite(selection, before, after, op_seq, hint)
        if selection.family == TRANSFORMATION:
            fn_name = _transform_fn_name(hint)
            changed = {f: cells for f, cells in values.changes.items() if cells}
            provlets = provmodel.gen_transform_provlets(
                changed, before, after, op_seq, selection.value_modes, resolve, fn_name
            )
            return provlets, provlets[0].activities[0]
        if selection.family == AMBIGUOUS:
            self.warnings.append(f"step {op_seq}: {selection.diagnostic}")
            warnings.warn(f"step {op_seq}: {selection.diagnostic}", AmbiguousChangeWarning)
            after_rows = set(after.row_ids)
            after_features = set(after.schema)
            disappeared = [
                (rid, f)
                for rid in before.row_ids
                for f in before.schema
                if rid not in after_rows or f not in after_features
            ]
            before_rows = set(before.row_ids)
            before_features = set(before.schema)
            appeared = [
                (rid, f)
                for rid in after.row_ids
                for f in after.schema
                if rid not in before_rows or f not in before_features
            ]
            provlets = provmodel.gen_coarse_provlets(disappeared, appeared, after, op_seq, resolve)
            return provlets, provlets[0].activities[0]
        raise OperatorError(f"cannot instantiate family {selection.family!r}")

    def _instantiate_composite(
        self,
        selection: TemplateSelection,
        before: Dataset,
        after: Dataset,
        op_seq: int,
        hint: OperatorSpec | None,
    ) -> tuple[list[Provlet], Activity]:
        text = print_feature_predicate(hint.predicate) if isinstance(hint, ProjectOp) else ""
        if self.state.pending_added and not (
            set(selection.new_features) - set(self.state.pending_added)
        ):
            # Columns were added by the previous tracked step; reuse its
            # activity and entity versions.
            new_cell_ids = {
                (rid, f): self._versions[(rid, f)]
                for rid in before.row_ids
                for f in selection.new_features
            }
            provlets = provmodel.gen_composite_provlets(
                selection.source_features,
                selection.new_features,
                before,
                after,
                op_seq,
                self._resolve,
                va_activity=self.state.pending_activity,
                mint_new=False,
                new_cell_ids=new_cell_ids,
                predicate_text=text,
            )
        else:
            # Add and drop observed in a single step (tracking was paused).
            survivors = [f for f in before.schema if f not in selection.new_features]
            reference = Dataset(
                before.dataset_id,
                tuple(survivors),
                {f: list(before.columns[f]) for f in survivors},
                before.row_ids,
            )
            provlets = provmodel.gen_composite_provlets(
                selection.source_features,
                selection.new_features,
                reference,
                after,
                op_seq,
                self._resolve,
                va_activity=None,
                mint_new=True,
                predicate_text=text,
            )
        cp_activity = provlets[0].activities[-1]
        return provlets, cp_activity

    def _ha_roles(
        self,
        before: Dataset,
        after: Dataset,
        added_rows: Sequence[int],
        hint: OperatorSpec | None,
    ) -> tuple[tuple[str, ...], str | None]:
        if isinstance(hint, HAugmentOp):
            return hint.group_keys, hint.y
        if isinstance(hint, AddRowsOp):
            return (), None
        return infer_ha_roles(before, after, added_rows)

    # -- binary observation --------------------------------------------------

    def track_join(
        self,
        left: Dataset,
        right: Dataset,
        out: Dataset,
        keys: Sequence[tuple[str, str]],
        join_type: str,
    ) -> list[Provlet]:
        start = time.perf_counter()
        op_seq = self.state.op_seq
        self.state.op_seq += 1
        self.state.clear_pending()
        layout = join_layout(left.schema, right.schema, keys)
        witnesses = reconstruct_join_witnesses(left, right, out, layout, join_type)
        resolve = self._resolve
        provlets = self._run_chunked(
            lambda part: provmodel.gen_join_provlets(
                part, keys, layout, left, right, out, op_seq, resolve, join_type
            ),
            witnesses,
        )
        if not provlets:
            provlets = [Provlet((make_activity(op_seq, "Join", join_type, out.schema),), (), ())]
        record = OpRecord(
            op_seq=op_seq,
            operator_class="Join",
            function_name=join_type,
            affected_features=tuple(out.schema),
            input_ids=(left.dataset_id, right.dataset_id),
            output_id=out.dataset_id,
            pre_shape=(left.n_rows + right.n_rows, len(set(left.schema) | set(right.schema))),
            post_shape=(out.n_rows, out.n_cols),
            pre_stats=tuple(column_stats(left, f) for f in left.schema)
            + tuple(column_stats(right, f) for f in right.schema),
            post_stats=tuple(column_stats(out, f) for f in out.schema),
        )
        self._commit(provlets, record)
        self.capture_seconds += time.perf_counter() - start
        return provlets

    def track_append(self, left: Dataset, right: Dataset, out: Dataset) -> list[Provlet]:
        start = time.perf_counter()
        op_seq = self.state.op_seq
        self.state.op_seq += 1
        self.state.clear_pending()
        resolve = self._resolve
        provlets = provmodel.gen_append_provlets(left, right, out, op_seq, resolve)
        if not provlets:
            provlets = [Provlet((make_activity(op_seq, "Append", "", out.schema),), (), ())]
        record = OpRecord(
            op_seq=op_seq,
            operator_class="Append",
            function_name="",
            affected_features=tuple(out.schema),
            input_ids=(left.dataset_id, right.dataset_id),
            output_id=out.dataset_id,
            pre_shape=(left.n_rows + right.n_rows, len(set(left.schema) | set(right.schema))),
            post_shape=(out.n_rows, out.n_cols),
            pre_stats=tuple(column_stats(left, f) for f in left.schema)
            + tuple(column_stats(right, f) for f in right.schema),
            post_stats=tuple(column_stats(out, f) for f in out.schema),
        )
        self._commit(provlets, record)
        self.capture_seconds += time.perf_counter() - start
        return provlets


def _subset_rows(d: Dataset, row_ids: Sequence[int]) -> Dataset:
    if len(row_ids) == d.n_rows:
        return d
    positions = [d._pos[rid] for rid in row_ids]
    return Dataset(
        d.dataset_id,
        d.schema,
        {f: [d.columns[f][i] for i in positions] for f in d.schema},
        tuple(row_ids),
    )


def _transform_fn_name(hint: OperatorSpec | None) -> str:
    if isinstance(hint, TransformOp):
        fn = hint.fn
        if hasattr(fn, "kind") and isinstance(getattr(fn, "kind", None), str):
            return fn.kind
        return "expr"
    return ""


def _dedup_relations(provlets: Sequence[Provlet]) -> list[Provlet]:
    """Drop relations repeated across a step's provlets (shared activity,
    shared used sets after chunking)."""
    seen: set = set()
    out = []
    for p in provlets:
        kept = []
        for r in p.relations:
            if r not in seen:
                seen.add(r)
                kept.append(r)
        out.append(Provlet(p.activities, p.entities, tuple(kept)))
    return out


# ---------------------------------------------------------------------------
# Group-input reconstruction
# ---------------------------------------------------------------------------


def reconstruct_group_mapping(
    before: Dataset,
    after: Dataset,
    added_rows: Sequence[int],
    keys: Sequence[str],
) -> list[tuple[int, tuple[int, ...]]]:
    """Recover each appended row's contributing input rows by matching its
    key cells against input rows with equal key values."""
    mapping = []
    for rid in added_rows:
        if not keys:
            mapping.append((rid, ()))
            continue
        key_vals = [after.cell(rid, f) for f in keys]
        members = tuple(
            r
            for i, r in enumerate(before.row_ids)
            if all(_cells_equal(before.columns[f][i], kv) for f, kv in zip(keys, key_vals))
        )
        mapping.append((rid, members))
    return mapping


def infer_ha_roles(
    before: Dataset,
    after: Dataset,
    added_rows: Sequence[int],
) -> tuple[tuple[str, ...], str | None]:
    """Best-effort inference of group keys and the aggregate column when no
    operator metadata is available.

    Candidate roles are the features where every appended row is
    non-missing; a split into (keys, aggregate) is valid when every appended
    row finds at least one input row agreeing on all keys. Returns empty
    roles (generation-only provenance) when nothing fits.
    """
    if not added_rows:
        return (), None
    non_null = [
        f for f in after.schema if all(after.cell(rid, f) is not None for rid in added_rows)
    ]
    valid: list[tuple[tuple[str, ...], str]] = []
    for y in non_null:
        keys = tuple(f for f in non_null if f != y)
        if not keys:
            continue
        ok = True
        for rid in added_rows:
            key_vals = [after.cell(rid, f) for f in keys]
            if not any(
                all(_cells_equal(before.columns[f][i], kv) for f, kv in zip(keys, key_vals))
                for i in range(before.n_rows)
            ):
                ok = False
                break
        if ok:
            valid.append((keys, y))
    if not valid:
        return (), None
    # Deterministic choice: prefer the aggregate column latest in the schema.
    valid.sort(key=lambda pair: after.schema.index(pair[1]))
    return valid[-1]


# ---------------------------------------------------------------------------
# Join witness reconstruction
# ---------------------------------------------------------------------------


def reconstruct_join_witnesses(
    left: Dataset,
    right: Dataset,
    out: Dataset,
    layout,
    join_type: str,
) -> list[tuple[int, tuple[int, ...], tuple[int, ...]]]:
    """Match every output row back to its witness rows in the operands.

    Each operand is hashed row-wise; the output is decomposed by projecting
    onto each operand's features and hashed with the same function. Hash
    hits are confirmed by raw value comparison. A side may only be absent
    for the padding rows an outer join permits, and its padded cells must
    all be missing; anything else is an integrity error.
    """
    left_table = _hash_rows(left)
    right_table = _hash_rows(right)
    left_cols = [layout.left_map[f] for f in left.schema]
    right_cols = [layout.right_map[f] for f in right.schema]
    left_only = [layout.left_map[f] for f in left.schema if layout.left_map[f] not in layout.merged_keys]
    right_only = [layout.right_map[f] for f in right.schema if layout.right_map[f] not in layout.merged_keys]
    witnesses = []
    for rid in out.row_ids:
        left_proj = tuple(out.cell(rid, c) for c in left_cols)
        right_proj = tuple(out.cell(rid, c) for c in right_cols)
        lw = _probe(left_table, left, left_proj)
        rw = _probe(right_table, right, right_proj)
        if not lw and not rw:
            raise IntegrityError(f"output row {rid} matches neither operand")
        if not lw:
            if join_type not in ("right", "full"):
                raise IntegrityError(f"output row {rid} has no left witness in a {join_type} join")
            if any(out.cell(rid, c) is not None for c in left_only):
                raise IntegrityError(f"output row {rid} carries left values but no left witness")
        if not rw:
            if join_type not in ("left", "full"):
                raise IntegrityError(f"output row {rid} has no right witness in a {join_type} join")
            if any(out.cell(rid, c) is not None for c in right_only):
                raise IntegrityError(f"output row {rid} carries right values but no right witness")
        witnesses.append((rid, lw, rw))
    return witnesses


def _hash_rows(d: Dataset) -> dict[int, list[int]]:
    table: dict[int, list[int]] = {}
    for pos, rid in enumerate(d.row_ids):
        h = hash_values(d.row_at(pos))
        table.setdefault(h, []).append(rid)
    return table


def _probe(table: dict[int, list[int]], d: Dataset, projection: tuple) -> tuple[int, ...]:
    h = hash_values(projection)
    candidates = table.get(h, ())
    confirmed = []
    for rid in candidates:
        row = d.row(rid)
        if len(row) == len(projection) and all(_cells_equal(a, b) for a, b in zip(row, projection)):
            confirmed.append(rid)
    return tuple(confirmed)


# ---------------------------------------------------------------------------
# Tracked handles
# ---------------------------------------------------------------------------


class TrackedFrame:
    """A dataset handle whose operator applications are observed."""

    def __init__(self, tracker: ProvenanceTracker, dataset: Dataset, snapshot: Dataset):
        self.tracker = tracker
        self.dataset = dataset
        self._snapshot = snapshot

    # Unary operators ------------------------------------------------------

    def apply(self, op: OperatorSpec, dataset_id: str | None = None) -> "TrackedFrame":
        if isinstance(op, (JoinOp, AppendOp)):
            raise OperatorError("binary operators need an explicit right operand")
        out, _mapping = apply_unary(self.dataset, op, id_base=self.tracker._alloc_base())
        if dataset_id is not None:
            out = Dataset(dataset_id, out.schema, out.columns, out.row_ids)
        self.tracker._note_ids(out)
        if not self.tracker.capture:
            return TrackedFrame(self.tracker, out, out)
        if not self.tracker.state.tracking_enabled:
            return TrackedFrame(self.tracker, out, self._snapshot)
        hint = op if self._snapshot is self.dataset else None
        self.tracker.track_unary(self._snapshot, out, hint)
        return TrackedFrame(self.tracker, out, out)

    def select(self, condition) -> "TrackedFrame":
        return self.apply(SelectOp(_as_expr(condition)))

    def project(self, predicate) -> "TrackedFrame":
        return self.apply(ProjectOp(_as_predicate(predicate)))

    def vaugment(self, x: Sequence[str], new_features=None, one_hot: str | None = None) -> "TrackedFrame":
        parsed = tuple((name, _as_expr(expr)) for name, expr in (new_features or ()))
        return self.apply(VAugmentOp(tuple(x), parsed, one_hot=one_hot))

    def haugment(self, group_keys: Sequence[str], agg: str, y: str) -> "TrackedFrame":
        return self.apply(HAugmentOp(tuple(group_keys), agg, y))

    def transform(self, x: Sequence[str], fn) -> "TrackedFrame":
        if isinstance(fn, str):
            fn = _as_expr(fn)
        return self.apply(TransformOp(tuple(x), fn))

    def add_rows(self, rows) -> "TrackedFrame":
        return self.apply(AddRowsOp(tuple(tuple(r) for r in rows)))

    # Binary operators -----------------------------------------------------

    def join(self, other: "TrackedFrame", keys, how: str = "inner", dataset_id: str | None = None) -> "TrackedFrame":
        self._require_current("join")
        other._require_current("join")
        op = JoinOp(tuple(tuple(k) for k in keys), how)
        out = join_frames(
            self.dataset, other.dataset, op, id_base=self.tracker._alloc_base(), dataset_id=dataset_id
        )
        self.tracker._note_ids(out)
        if self.tracker.capture:
            self.tracker.track_join(self.dataset, other.dataset, out, op.keys, how)
        return TrackedFrame(self.tracker, out, out)

    def append(self, other: "TrackedFrame", dataset_id: str | None = None) -> "TrackedFrame":
        self._require_current("append")
        other._require_current("append")
        out = append_frames(
            self.dataset, other.dataset, id_base=self.tracker._alloc_base(), dataset_id=dataset_id
        )
        self.tracker._note_ids(out)
        if self.tracker.capture:
            self.tracker.track_append(self.dataset, other.dataset, out)
        return TrackedFrame(self.tracker, out, out)

    def _require_current(self, what: str) -> None:
        if self.tracker.capture and (
            not self.tracker.state.tracking_enabled or self._snapshot is not self.dataset
        ):
            raise OperatorError(f"{what} requires tracking to be enabled and snapshots current")


def _as_expr(value):
    from .exprs import Expr, parse_expr

    if isinstance(value, str):
        return parse_expr(value)
    return value


def _as_predicate(value):
    from .exprs import parse_feature_predicate

    if isinstance(value, str):
        return parse_feature_predicate(value)
    return value
