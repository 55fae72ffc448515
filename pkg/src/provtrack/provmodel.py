"""PROV subset and the template instantiators that bind observed changes.

Entities stand for one version of one dataset element, activities for one
tracked operator execution. Four relation kinds connect them: ``used`` and
``wasGeneratedBy`` between entities and activities, ``wasDerivedFrom``
between entities, and ``wasInvalidatedBy`` for deletions. Every derivation
is accompanied by a usage and a generation through the same activity, so
how-provenance is always reconstructible from the edge set.

Instantiators are pure functions over immutable inputs. Cells of the input
frame are referenced through ``resolve(row_id, feature)``, which must return
the id of the element's most recent entity version; new output cells mint
entities at the current step. Unchanged elements never get a new version.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

from .dataset import Dataset, JoinLayout
from .values import Value

USED = "used"
GENERATED = "wasGeneratedBy"
DERIVED = "wasDerivedFrom"
INVALIDATED = "wasInvalidatedBy"

RELATION_KINDS = (USED, GENERATED, DERIVED, INVALIDATED)


class Entity(NamedTuple):
    id: str
    op_seq: int
    row_id: int
    feature: str
    value: Value


class Activity(NamedTuple):
    id: str
    op_seq: int
    operator_class: str
    function_name: str
    affected_features: tuple[str, ...]


class Relation(NamedTuple):
    kind: str
    source: str
    target: str


class Provlet(NamedTuple):
    """One template instantiation: the activities it involves, the entity
    versions it defines, and its relations. Relations may also reference
    entity ids defined by earlier provlets."""

    activities: tuple[Activity, ...]
    entities: tuple[Entity, ...]
    relations: tuple[Relation, ...]


Resolve = Callable[[int, str], str]


def entity_id(op_seq: int, row_id: int, feature: str) -> str:
    return f"e:{op_seq}:{row_id}:{feature}"


def activity_id(op_seq: int, suffix: str = "") -> str:
    return f"a:{op_seq}{suffix}"


def make_activity(
    op_seq: int,
    operator_class: str,
    function_name: str,
    affected: Sequence[str],
    suffix: str = "",
) -> Activity:
    return Activity(activity_id(op_seq, suffix), op_seq, operator_class, function_name, tuple(affected))


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def gen_ingestion_provlets(d: Dataset, op_seq: int) -> list[Provlet]:
    """Materialize every source cell as a generation-only entity."""
    act = make_activity(op_seq, "Ingestion", d.dataset_id, d.schema)
    entities: list[Entity] = []
    relations: list[Relation] = []
    for f in d.schema:
        col = d.columns[f]
        for pos, rid in enumerate(d.row_ids):
            eid = entity_id(op_seq, rid, f)
            entities.append(Entity(eid, op_seq, rid, f, col[pos]))
            relations.append(Relation(GENERATED, eid, act.id))
    return [Provlet((act,), tuple(entities), tuple(relations))]


# ---------------------------------------------------------------------------
# Data reduction
# ---------------------------------------------------------------------------


def gen_selection_provlets(
    invalidated_rows: Sequence[int],
    schema: Sequence[str],
    before: Dataset,
    op_seq: int,
    resolve: Resolve,
    condition_text: str = "",
) -> list[Provlet]:
    """Whole rows were dropped: invalidate every cell of each dropped row."""
    act = make_activity(op_seq, "Selection", condition_text, schema)
    provlets = []
    for rid in invalidated_rows:
        relations = tuple(Relation(INVALIDATED, resolve(rid, f), act.id) for f in schema)
        provlets.append(Provlet((act,), (), relations))
    return provlets


def gen_projection_provlets(
    dropped_features: Sequence[str],
    before: Dataset,
    op_seq: int,
    resolve: Resolve,
    predicate_text: str = "",
) -> list[Provlet]:
    """Whole columns were dropped: invalidate every cell of each column."""
    act = make_activity(op_seq, "ConditionalProjection", predicate_text, dropped_features)
    provlets = []
    for f in dropped_features:
        relations = tuple(Relation(INVALIDATED, resolve(rid, f), act.id) for rid in before.row_ids)
        provlets.append(Provlet((act,), (), relations))
    return provlets


# ---------------------------------------------------------------------------
# Vertical augmentation
# ---------------------------------------------------------------------------


def gen_va_provlets(
    x: Sequence[str],
    y: Sequence[str],
    before: Dataset,
    after: Dataset,
    op_seq: int,
    resolve: Resolve,
    function_name: str = "",
) -> list[Provlet]:
    """New columns appeared: one provlet per row.

    Cells of ``x`` are used, cells of ``y`` are generated, and each new cell
    derives from the used cells of its own row. With unknown inputs
    (``x`` empty) only generations are recorded.
    """
    act = make_activity(op_seq, "VerticalAugmentation", function_name, y)
    provlets = []
    for rid in after.row_ids:
        entities = []
        relations = []
        used_ids = []
        for f in x:
            uid = resolve(rid, f)
            used_ids.append(uid)
            relations.append(Relation(USED, act.id, uid))
        for f in y:
            eid = entity_id(op_seq, rid, f)
            entities.append(Entity(eid, op_seq, rid, f, after.cell(rid, f)))
            relations.append(Relation(GENERATED, eid, act.id))
            for uid in used_ids:
                relations.append(Relation(DERIVED, eid, uid))
        provlets.append(Provlet((act,), tuple(entities), tuple(relations)))
    return provlets


# ---------------------------------------------------------------------------
# Horizontal augmentation
# ---------------------------------------------------------------------------


def gen_ha_provlets(
    mapping: Sequence[tuple[int, Sequence[int]]],
    x: Sequence[str],
    y: str | None,
    before: Dataset,
    after: Dataset,
    op_seq: int,
    resolve: Resolve,
    function_name: str = "",
) -> list[Provlet]:
    """Rows were appended by grouping: one provlet per group row.

    Group-key cells derive from the same-feature cells of every group input
    row; the aggregate cell derives from every ``y`` cell of those rows;
    remaining cells are generated with no derivation. An empty input set
    (fresh records) yields generation-only provlets.
    """
    act = make_activity(op_seq, "HorizontalAugmentation", function_name, after.schema)
    key_set = set(x)
    provlets = []
    for group_rid, ginput in mapping:
        entities = []
        relations = []
        for f in after.schema:
            eid = entity_id(op_seq, group_rid, f)
            entities.append(Entity(eid, op_seq, group_rid, f, after.cell(group_rid, f)))
            relations.append(Relation(GENERATED, eid, act.id))
            if f in key_set or (y is not None and f == y):
                for j in ginput:
                    uid = resolve(j, f)
                    relations.append(Relation(USED, act.id, uid))
                    relations.append(Relation(DERIVED, eid, uid))
        provlets.append(Provlet((act,), tuple(entities), tuple(relations)))
    return provlets


# ---------------------------------------------------------------------------
# Data transformation
# ---------------------------------------------------------------------------


def gen_transform_provlets(
    changed: dict[str, list[tuple[int, Value, Value]]],
    before: Dataset,
    after: Dataset,
    op_seq: int,
    modes: dict[str, str],
    resolve: Resolve,
    function_name: str = "",
) -> list[Provlet]:
    """Values changed in place: one provlet per affected column.

    ``one_to_one`` derives each changed cell from its own predecessor;
    ``column_wide`` (imputation) derives each changed cell from every cell
    of that column in the input.
    """
    act = make_activity(op_seq, "DataTransformation", function_name, sorted(changed.keys()))
    provlets = []
    for f in sorted(changed.keys()):
        cells = changed[f]
        if not cells:
            continue
        mode = modes.get(f, "one_to_one")
        entities = []
        relations = []
        if mode == "column_wide":
            column_ids = [resolve(rid, f) for rid in before.row_ids]
            for uid in column_ids:
                relations.append(Relation(USED, act.id, uid))
            for rid, _old, new in cells:
                eid = entity_id(op_seq, rid, f)
                entities.append(Entity(eid, op_seq, rid, f, new))
                relations.append(Relation(GENERATED, eid, act.id))
                for uid in column_ids:
                    relations.append(Relation(DERIVED, eid, uid))
        else:
            for rid, _old, new in cells:
                eid = entity_id(op_seq, rid, f)
                uid = resolve(rid, f)
                entities.append(Entity(eid, op_seq, rid, f, new))
                relations.append(Relation(USED, act.id, uid))
                relations.append(Relation(GENERATED, eid, act.id))
                relations.append(Relation(DERIVED, eid, uid))
        provlets.append(Provlet((act,), tuple(entities), tuple(relations)))
    return provlets


# ---------------------------------------------------------------------------
# Join
# ---------------------------------------------------------------------------


def gen_join_provlets(
    matches: Sequence[tuple[int, Sequence[int], Sequence[int]]],
    key_pairs: Sequence[tuple[str, str]],
    layout: JoinLayout,
    left: Dataset,
    right: Dataset,
    out: Dataset,
    op_seq: int,
    resolve: Resolve,
    join_type: str = "inner",
) -> list[Provlet]:
    """One provlet per output row, from its witness rows in the operands.

    Every output cell was generated by the join, which used the condition
    cells of all witness rows; each cell additionally derives from its
    same-feature source cell in the contributing operand(s). Padding cells
    of outer joins are generated with no derivation. Duplicate edges
    collapse.
    """
    act = make_activity(op_seq, "Join", join_type, out.schema)
    merged = set(layout.merged_keys)
    provlets = []
    for out_rid, left_rows, right_rows in matches:
        entities = []
        relations: list[Relation] = []
        seen: set[Relation] = set()

        def emit(rel: Relation) -> None:
            if rel not in seen:
                seen.add(rel)
                relations.append(rel)

        for lk, rk in key_pairs:
            for i in left_rows:
                emit(Relation(USED, act.id, resolve(i, lk)))
            for j in right_rows:
                emit(Relation(USED, act.id, resolve(j, rk)))
        for f in out.schema:
            eid = entity_id(op_seq, out_rid, f)
            entities.append(Entity(eid, op_seq, out_rid, f, out.cell(out_rid, f)))
            emit(Relation(GENERATED, eid, act.id))
            sources: list[str] = []
            left_feature = _operand_feature(layout.left_map, f)
            right_feature = _operand_feature(layout.right_map, f)
            if left_feature is not None and left_rows:
                sources = [resolve(i, left_feature) for i in left_rows]
            elif right_feature is not None and right_rows:
                sources = [resolve(j, right_feature) for j in right_rows]
            elif f in merged and right_rows:
                sources = [resolve(j, f) for j in right_rows]
            for uid in sources:
                emit(Relation(USED, act.id, uid))
                emit(Relation(DERIVED, eid, uid))
        provlets.append(Provlet((act,), tuple(entities), tuple(relations)))
    return provlets


def _operand_feature(mapping: dict[str, str], out_name: str) -> str | None:
    for feature, name in mapping.items():
        if name == out_name:
            return feature
    return None


# ---------------------------------------------------------------------------
# Append
# ---------------------------------------------------------------------------


def gen_append_provlets(
    left: Dataset,
    right: Dataset,
    out: Dataset,
    op_seq: int,
    resolve: Resolve,
) -> list[Provlet]:
    """One provlet per output row.

    Rows from an operand derive each cell of that operand's features from
    the corresponding source cell; cells padded for features the operand
    lacks are generated with no derivation.
    """
    act = make_activity(op_seq, "Append", "", out.schema)
    n_left = left.n_rows
    left_features = set(left.schema)
    right_features = set(right.schema)
    provlets = []
    for pos, out_rid in enumerate(out.row_ids):
        from_left = pos < n_left
        src = left if from_left else right
        src_rid = src.row_ids[pos if from_left else pos - n_left]
        own = left_features if from_left else right_features
        entities = []
        relations = []
        for f in out.schema:
            eid = entity_id(op_seq, out_rid, f)
            entities.append(Entity(eid, op_seq, out_rid, f, out.cell(out_rid, f)))
            relations.append(Relation(GENERATED, eid, act.id))
            if f in own:
                uid = resolve(src_rid, f)
                relations.append(Relation(USED, act.id, uid))
                relations.append(Relation(DERIVED, eid, uid))
        provlets.append(Provlet((act,), tuple(entities), tuple(relations)))
    return provlets


# ---------------------------------------------------------------------------
# Composite transformation (column add followed by column drop)
# ---------------------------------------------------------------------------


def gen_composite_provlets(
    source_features: Sequence[str],
    new_features: Sequence[str],
    before: Dataset,
    after: Dataset,
    cp_op_seq: int,
    resolve: Resolve,
    va_activity: Activity | None = None,
    mint_new: bool = True,
    new_cell_ids: dict[tuple[int, str], str] | None = None,
    predicate_text: str = "",
) -> list[Provlet]:
    """A single provlet covering an add-then-drop column pattern.

    The augmentation activity used the dropped source cells, each new cell
    derives from its row's source cell(s), and the source columns are
    invalidated through a separate projection activity. When the columns
    were added in an earlier tracked step, pass that step's activity and
    ``mint_new=False`` with the existing new-cell entity ids.
    """
    cp_act = make_activity(cp_op_seq, "ConditionalProjection", predicate_text, source_features)
    if va_activity is None:
        va_activity = make_activity(cp_op_seq, "VerticalAugmentation", "", new_features, suffix=":va")
    entities: list[Entity] = []
    relations: list[Relation] = []
    seen: set[Relation] = set()

    def emit(rel: Relation) -> None:
        if rel not in seen:
            seen.add(rel)
            relations.append(rel)

    # The pattern is shape-preserving on rows, so the before rows survive.
    for rid in before.row_ids:
        source_ids = [resolve(rid, f) for f in source_features]
        for uid in source_ids:
            emit(Relation(USED, va_activity.id, uid))
        for f in new_features:
            if new_cell_ids is not None:
                eid = new_cell_ids[(rid, f)]
            else:
                eid = entity_id(cp_op_seq, rid, f)
            if mint_new:
                entities.append(Entity(eid, cp_op_seq, rid, f, after.cell(rid, f)))
                emit(Relation(GENERATED, eid, va_activity.id))
            for uid in source_ids:
                emit(Relation(DERIVED, eid, uid))
        for uid in source_ids:
            emit(Relation(INVALIDATED, uid, cp_act.id))
    activities = (va_activity, cp_act) if mint_new else (cp_act,)
    return [Provlet(activities, tuple(entities), tuple(relations))]


# ---------------------------------------------------------------------------
# Coarse fallback for ambiguous steps
# ---------------------------------------------------------------------------


def gen_coarse_provlets(
    disappeared: Sequence[tuple[int, str]],
    appeared: Sequence[tuple[int, str]],
    after: Dataset,
    op_seq: int,
    resolve: Resolve,
) -> list[Provlet]:
    """Rows and columns changed at once: record usage of everything that
    vanished and generation of everything new, with no derivations."""
    act = make_activity(op_seq, "AmbiguousChange", "", after.schema)
    entities = []
    relations = []
    for rid, f in disappeared:
        relations.append(Relation(USED, act.id, resolve(rid, f)))
    for rid, f in appeared:
        eid = entity_id(op_seq, rid, f)
        entities.append(Entity(eid, op_seq, rid, f, after.cell(rid, f)))
        relations.append(Relation(GENERATED, eid, act.id))
    return [Provlet((act,), tuple(entities), tuple(relations))]
