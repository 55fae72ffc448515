"""The thirteen provenance queries over an assembled graph.

Element references name a (row, feature) pair at a frontier step: the
element resolves to its most recent entity version at or before that step,
so both intermediate frames and the final output are addressable. Why- and
how-provenance walk the derivation edges; invalidation queries distinguish
column drops, row drops, and per-cell replacement; spread queries read the
per-operation statistics records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .provmodel import DERIVED, GENERATED, INVALIDATED, USED, Activity, Entity
from .store import OpRecord, ProvGraph
from .values import render_value

QUERY_IDS = tuple(f"PQ{i}" for i in range(1, 14))


@dataclass(frozen=True)
class ElementRef:
    frontier: int
    row_id: int | None = None
    feature: str | None = None


@dataclass
class QueryResult:
    query: str
    kind: str  # activities | entities | subgraph | spread
    payload: object = None

    def to_json(self) -> str:
        return json.dumps({"query": self.query, "kind": self.kind, "payload": self.payload}, sort_keys=True, indent=2)

    def render(self) -> str:
        lines = [f"{self.query} ({self.kind})"]
        if self.kind == "activities":
            for row in self.payload:
                extra = f" edges={','.join(row['edges'])}" if row.get("edges") else ""
                lines.append(
                    f"  {row['id']}  op={row['op']}  {row['class']}"
                    f"  features=[{', '.join(row['features'])}]{extra}"
                )
            if not self.payload:
                lines.append("  (none)")
        elif self.kind == "entities":
            for row in self.payload:
                lines.append(
                    f"  {row['id']}  row={row['row']} feature={row['feature']} value={row['value']}"
                )
            if not self.payload:
                lines.append("  (none)")
        elif self.kind == "subgraph":
            lines.append(f"  entities: {len(self.payload['entities'])}")
            for row in self.payload["entities"]:
                lines.append(f"    {row['id']}  value={row['value']}")
            lines.append(f"  activities: {len(self.payload['activities'])}")
            for row in self.payload["activities"]:
                lines.append(f"    {row['id']}  {row['class']}")
            lines.append(f"  relations: {len(self.payload['relations'])}")
            for row in self.payload["relations"]:
                lines.append(f"    {row['kind']}({row['source']}, {row['target']})")
        elif self.kind == "spread":
            for row in self.payload:
                deltas = ", ".join(f"{k}={_fmt(v)}" for k, v in sorted(row["deltas"].items()))
                lines.append(f"  op={row['op']} {row['class']}: {deltas}")
            if not self.payload:
                lines.append("  (none)")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return render_value(v)
    return str(v)


def _activity_row(a: Activity, edges: Sequence[str] = ()) -> dict:
    row = {
        "id": a.id,
        "op": a.op_seq,
        "class": a.operator_class,
        "function": a.function_name,
        "features": list(a.affected_features),
    }
    if edges:
        row["edges"] = sorted(set(edges))
    return row


def _entity_row(e: Entity) -> dict:
    return {"id": e.id, "op": e.op_seq, "row": e.row_id, "feature": e.feature, "value": e.value}


class QueryEngine:
    def __init__(self, graph: ProvGraph):
        self.graph = graph
        self._ingestion_ops = {
            a.op_seq for a in graph.activities.values() if a.operator_class == "Ingestion"
        }

    # -- helpers -------------------------------------------------------------

    def default_frontier(self) -> int:
        return self.graph.max_op_seq()

    def _resolve(self, ref: ElementRef) -> Entity | None:
        if ref.row_id is None or ref.feature is None:
            return None
        return self.graph.resolve(ref.row_id, ref.feature, ref.frontier)

    def _is_ingestion_entity(self, e: Entity) -> bool:
        return e.op_seq in self._ingestion_ops

    def _ancestors(self, eid: str) -> set[str]:
        seen = {eid}
        stack = [eid]
        while stack:
            current = stack.pop()
            for src in self.graph.derived_from.get(current, ()):
                if src not in seen:
                    seen.add(src)
                    stack.append(src)
        return seen

    def _descendants(self, eid: str) -> set[str]:
        seen = {eid}
        stack = [eid]
        while stack:
            current = stack.pop()
            for dep in self.graph.derives.get(current, ()):
                if dep not in seen:
                    seen.add(dep)
                    stack.append(dep)
        return seen

    def _entity_versions(self, row_id: int | None, feature: str | None, frontier: int) -> list[Entity]:
        out = []
        for e in self.graph.entities.values():
            if e.op_seq > frontier:
                continue
            if row_id is not None and e.row_id != row_id:
                continue
            if feature is not None and e.feature != feature:
                continue
            out.append(e)
        return out

    def _incident_activities(self, entities: Iterable[Entity], frontier: int) -> list[dict]:
        found: dict[str, set[str]] = {}
        for e in entities:
            gen = self.graph.generated_by.get(e.id)
            if gen is not None:
                found.setdefault(gen, set()).add("generated")
            for aid in self.graph.used_by.get(e.id, ()):
                found.setdefault(aid, set()).add("used")
                # Usage backing a derivation marks downstream consumption.
                if any(
                    src == e.id
                    for dep in self.graph.derives.get(e.id, ())
                    for src in self.graph.derived_from.get(dep, ())
                ):
                    found[aid].add("derived")
            for aid in self.graph.invalidated_by.get(e.id, ()):
                found.setdefault(aid, set()).add("invalidated")
        rows = []
        for aid, kinds in found.items():
            a = self.graph.activities[aid]
            if a.op_seq <= frontier:
                rows.append(_activity_row(a, sorted(kinds)))
        rows.sort(key=lambda r: (r["op"], r["id"]))
        return rows

    def _alive_rows(self, feature: str, op_seq: int) -> set[int]:
        """Rows holding a live version of the feature just before the step."""
        alive = set()
        for (row_id, f), chain in self.graph.versions.items():
            if f != feature:
                continue
            born = chain[0][0]
            if born >= op_seq:
                continue
            if any(
                self.graph.activities[aid].op_seq < op_seq
                for _, eid in chain
                for aid in self.graph.invalidated_by.get(eid, ())
            ):
                continue
            alive.add(row_id)
        return alive

    def _alive_features(self, row_id: int, op_seq: int) -> set[str]:
        alive = set()
        for (r, feature), chain in self.graph.versions.items():
            if r != row_id:
                continue
            born = chain[0][0]
            if born >= op_seq:
                continue
            if any(
                self.graph.activities[aid].op_seq < op_seq
                for _, eid in chain
                for aid in self.graph.invalidated_by.get(eid, ())
            ):
                continue
            alive.add(feature)
        return alive

    # -- queries ---------------------------------------------------------------

    def pq1_all_transformations(self) -> QueryResult:
        rows = [_activity_row(a) for a in sorted(self.graph.activities.values(), key=lambda a: (a.op_seq, a.id))]
        return QueryResult("PQ1", "activities", rows)

    def pq2_why(self, ref: ElementRef) -> QueryResult:
        e = self._resolve(ref)
        if e is None:
            return QueryResult("PQ2", "entities", [])
        rows = [
            _entity_row(self.graph.entities[eid])
            for eid in sorted(self._ancestors(e.id))
            if self._is_ingestion_entity(self.graph.entities[eid])
        ]
        return QueryResult("PQ2", "entities", rows)

    def pq3_how(self, ref: ElementRef) -> QueryResult:
        e = self._resolve(ref)
        if e is None:
            return QueryResult("PQ3", "subgraph", {"entities": [], "activities": [], "relations": []})
        closure = self._ancestors(e.id)
        activities: set[str] = set()
        relations: list[dict] = []
        entities = set(closure)
        for eid in closure:
            gen = self.graph.generated_by.get(eid)
            if gen is not None:
                activities.add(gen)
                relations.append({"kind": GENERATED, "source": eid, "target": gen})
            for src in self.graph.derived_from.get(eid, ()):
                if src in closure:
                    relations.append({"kind": DERIVED, "source": eid, "target": src})
        # Activities expose their full used set one hop out (join conditions).
        for aid in sorted(activities):
            for uid in self.graph.used_entities.get(aid, ()):
                entities.add(uid)
                relations.append({"kind": USED, "source": aid, "target": uid})
        unique = sorted({(r["kind"], r["source"], r["target"]) for r in relations})
        payload = {
            "entities": [_entity_row(self.graph.entities[eid]) for eid in sorted(entities)],
            "activities": [
                _activity_row(self.graph.activities[aid]) for aid in sorted(activities)
            ],
            "relations": [{"kind": k, "source": s, "target": t} for k, s, t in unique],
        }
        return QueryResult("PQ3", "subgraph", payload)

    def pq4_feature_ops(self, feature: str, frontier: int) -> QueryResult:
        versions = self._entity_versions(None, feature, frontier)
        return QueryResult("PQ4", "activities", self._incident_activities(versions, frontier))

    def pq5_record_ops(self, row_id: int, frontier: int) -> QueryResult:
        versions = self._entity_versions(row_id, None, frontier)
        return QueryResult("PQ5", "activities", self._incident_activities(versions, frontier))

    def pq6_item_ops(self, ref: ElementRef) -> QueryResult:
        versions = self._entity_versions(ref.row_id, ref.feature, ref.frontier)
        return QueryResult("PQ6", "activities", self._incident_activities(versions, ref.frontier))

    def pq7_feature_invalidation(self, feature: str, frontier: int) -> QueryResult:
        for aid in sorted(self.graph.invalidated_entities, key=lambda a: self.graph.activities[a].op_seq):
            a = self.graph.activities[aid]
            if a.op_seq > frontier:
                continue
            hit_rows = {
                self.graph.entities[eid].row_id
                for eid in self.graph.invalidated_entities[aid]
                if self.graph.entities[eid].feature == feature
            }
            if not hit_rows:
                continue
            alive = self._alive_rows(feature, a.op_seq)
            if alive and alive <= hit_rows:
                return QueryResult("PQ7", "activities", [_activity_row(a, ["invalidated"])])
        return QueryResult("PQ7", "activities", [])

    def pq8_record_invalidation(self, row_id: int, frontier: int) -> QueryResult:
        for aid in sorted(self.graph.invalidated_entities, key=lambda a: self.graph.activities[a].op_seq):
            a = self.graph.activities[aid]
            if a.op_seq > frontier:
                continue
            hit_features = {
                self.graph.entities[eid].feature
                for eid in self.graph.invalidated_entities[aid]
                if self.graph.entities[eid].row_id == row_id
            }
            if not hit_features:
                continue
            alive = self._alive_features(row_id, a.op_seq)
            if alive and alive <= hit_features:
                return QueryResult("PQ8", "activities", [_activity_row(a, ["invalidated"])])
        return QueryResult("PQ8", "activities", [])

    def pq9_item_invalidation(self, ref: ElementRef) -> QueryResult:
        """The activity that ended the referenced version: an explicit
        invalidation or the generation of a newer version, whichever is
        earlier."""
        chain = self.graph.versions.get((ref.row_id, ref.feature))
        if not chain:
            return QueryResult("PQ9", "activities", [])
        current = None
        successor = None
        for op_seq, eid in chain:
            if op_seq <= ref.frontier:
                current = eid
            elif successor is None:
                successor = eid
        if current is None:
            return QueryResult("PQ9", "activities", [])
        candidates: list[tuple[int, Activity, str]] = []
        for aid in self.graph.invalidated_by.get(current, ()):
            a = self.graph.activities[aid]
            candidates.append((a.op_seq, a, "invalidated"))
        if successor is not None:
            gen = self.graph.generated_by.get(successor)
            if gen is not None:
                a = self.graph.activities[gen]
                candidates.append((a.op_seq, a, "generated"))
        if not candidates:
            return QueryResult("PQ9", "activities", [])
        candidates.sort(key=lambda item: item[0])
        op_seq, activity, kind = candidates[0]
        return QueryResult("PQ9", "activities", [_activity_row(activity, [kind])])

    def pq10_item_history(self, ref: ElementRef) -> QueryResult:
        e = self._resolve(ref)
        if e is None:
            return QueryResult("PQ10", "entities", [])
        ids = self._ancestors(e.id) | self._descendants(e.id)
        rows = [_entity_row(self.graph.entities[eid]) for eid in sorted(ids)]
        return QueryResult("PQ10", "entities", rows)

    def pq11_record_history(self, row_id: int, frontier: int) -> QueryResult:
        ids: set[str] = set()
        for (r, feature), chain in self.graph.versions.items():
            if r != row_id:
                continue
            e = self.graph.resolve(row_id, feature, frontier)
            if e is not None:
                ids |= self._ancestors(e.id) | self._descendants(e.id)
        rows = [_entity_row(self.graph.entities[eid]) for eid in sorted(ids)]
        return QueryResult("PQ11", "entities", rows)

    def pq12_feature_spread(self, feature: str) -> QueryResult:
        rows = []
        for op_seq in sorted(self.graph.op_records):
            rec = self.graph.op_records[op_seq]
            pre = {s.feature: s for s in rec.pre_stats}
            post = {s.feature: s for s in rec.post_stats}
            if feature not in pre and feature not in post:
                continue
            rows.append(
                {
                    "op": op_seq,
                    "class": rec.operator_class,
                    "pre": pre[feature].to_dict() if feature in pre else None,
                    "post": post[feature].to_dict() if feature in post else None,
                    "deltas": _stat_deltas(pre.get(feature), post.get(feature)),
                }
            )
        return QueryResult("PQ12", "spread", rows)

    def pq13_dataset_spread(self) -> QueryResult:
        rows = []
        for op_seq in sorted(self.graph.op_records):
            rec = self.graph.op_records[op_seq]
            pre_cells = rec.pre_shape[0] * rec.pre_shape[1]
            post_cells = rec.post_shape[0] * rec.post_shape[1]
            pre_nulls = sum(s.null_count for s in rec.pre_stats)
            post_nulls = sum(s.null_count for s in rec.post_stats)
            rows.append(
                {
                    "op": op_seq,
                    "class": rec.operator_class,
                    "pre_shape": list(rec.pre_shape),
                    "post_shape": list(rec.post_shape),
                    "deltas": {
                        "rows": rec.post_shape[0] - rec.pre_shape[0],
                        "cols": rec.post_shape[1] - rec.pre_shape[1],
                        "null_rate": (post_nulls / post_cells if post_cells else 0.0)
                        - (pre_nulls / pre_cells if pre_cells else 0.0),
                    },
                }
            )
        return QueryResult("PQ13", "spread", rows)


def _stat_deltas(pre, post) -> dict:
    deltas: dict = {}
    if pre is None or post is None:
        deltas["present"] = (0 if pre is None else 1, 0 if post is None else 1)
        return deltas
    deltas["count"] = post.count - pre.count
    deltas["null_count"] = post.null_count - pre.null_count
    for name in ("min", "max", "mean", "std"):
        a, b = getattr(pre, name), getattr(post, name)
        if a is not None and b is not None:
            deltas[name] = b - a
    if pre.distinct_count is not None and post.distinct_count is not None:
        deltas["distinct_count"] = post.distinct_count - pre.distinct_count
        deltas["mode_changed"] = pre.mode != post.mode
    return deltas
