"""Append-only provenance log, graph assembly, and PROV-JSON export.

Log format (documented in docs/log-format.md): a versioned header line
followed by length-prefixed records, each carrying a one-byte type tag:
``E`` entity, ``A`` activity, ``R`` relation, ``O`` per-operation statistics,
``B`` batch commit. A batch becomes durable when its commit record (count
plus checksum) is written; replaying a byte-identical batch is detected by
its checksum and ignored. Records are never rewritten.

Graphs are assembled in a single pass over a completed log. All queries run
over the immutable graph.
"""

from __future__ import annotations

import hashlib
import json
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

from .dataset import ColumnStats
from .errors import IntegrityError
from .provmodel import (
    DERIVED,
    GENERATED,
    INVALIDATED,
    RELATION_KINDS,
    USED,
    Activity,
    Entity,
    Provlet,
    Relation,
)

HEADER = "provtrack-log 1\n"

_DUMPS = json.JSONEncoder(sort_keys=True, separators=(",", ":")).encode


# ---------------------------------------------------------------------------
# Per-operation statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OpRecord:
    op_seq: int
    operator_class: str
    function_name: str
    affected_features: tuple[str, ...]
    input_ids: tuple[str, ...]
    output_id: str
    pre_shape: tuple[int, int]  # rows, cols
    post_shape: tuple[int, int]
    pre_stats: tuple[ColumnStats, ...]
    post_stats: tuple[ColumnStats, ...]

    def to_dict(self) -> dict:
        return {
            "op": self.op_seq,
            "class": self.operator_class,
            "fn": self.function_name,
            "features": list(self.affected_features),
            "inputs": list(self.input_ids),
            "output": self.output_id,
            "pre_shape": list(self.pre_shape),
            "post_shape": list(self.post_shape),
            "pre_stats": [s.to_dict() for s in self.pre_stats],
            "post_stats": [s.to_dict() for s in self.post_stats],
        }

    @staticmethod
    def from_dict(data: dict) -> "OpRecord":
        return OpRecord(
            op_seq=data["op"],
            operator_class=data["class"],
            function_name=data["fn"],
            affected_features=tuple(data["features"]),
            input_ids=tuple(data["inputs"]),
            output_id=data["output"],
            pre_shape=tuple(data["pre_shape"]),
            post_shape=tuple(data["post_shape"]),
            pre_stats=tuple(ColumnStats.from_dict(s) for s in data["pre_stats"]),
            post_stats=tuple(ColumnStats.from_dict(s) for s in data["post_stats"]),
        )


# ---------------------------------------------------------------------------
# Record framing
# ---------------------------------------------------------------------------


def _frame(tag: str, payload: str) -> str:
    body = tag + payload
    return f"{len(body.encode('utf-8'))}:{body}\n"


def _entity_payload(e: Entity) -> str:
    return _DUMPS({"id": e.id, "k": e.op_seq, "i": e.row_id, "f": e.feature, "v": e.value})


def _activity_payload(a: Activity) -> str:
    return _DUMPS(
        {"id": a.id, "k": a.op_seq, "class": a.operator_class, "fn": a.function_name, "af": list(a.affected_features)}
    )


def _relation_payload(r: Relation) -> str:
    return _DUMPS({"r": r.kind, "s": r.source, "t": r.target})


class ProvLog:
    """Writer over the on-disk log. Batch appends are atomic and may come
    from multiple threads; with ``async_writes`` a background worker flushes
    batches in submission order."""

    def __init__(self, path: Union[str, Path], async_writes: bool = False):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._seen_batches: set[str] = set()
        self._seen_entities: set[str] = set()
        self._seen_activities: set[str] = set()
        self._seen_ops: set[int] = set()
        self._offset = 0
        if self.path.exists() and self.path.stat().st_size > 0:
            self._scan_existing()
            self._fh = open(self.path, "a", encoding="utf-8", newline="")
        else:
            self._fh = open(self.path, "w", encoding="utf-8", newline="")
            self._fh.write(HEADER)
            self._offset = len(HEADER.encode("utf-8"))
        self._queue: queue.Queue | None = None
        self._worker: threading.Thread | None = None
        if async_writes:
            self._queue = queue.Queue()
            self._worker = threading.Thread(target=self._drain, daemon=True)
            self._worker.start()

    def _scan_existing(self) -> None:
        for tag, payload, _ in read_records(self.path):
            if tag == "E":
                self._seen_entities.add(json.loads(payload)["id"])
            elif tag == "A":
                self._seen_activities.add(json.loads(payload)["id"])
            elif tag == "O":
                self._seen_ops.add(json.loads(payload)["op"])
            elif tag == "B":
                self._seen_batches.add(json.loads(payload)["sum"])
        self._offset = self.path.stat().st_size

    def _drain(self) -> None:
        assert self._queue is not None
        while True:
            item = self._queue.get()
            if item is None:
                return
            self._fh.write(item)
            self._fh.flush()

    def _write(self, text: str) -> None:
        if self._queue is not None:
            self._queue.put(text)
        else:
            self._fh.write(text)
            self._fh.flush()

    def append_provlets(self, provlets: Sequence[Provlet], op_record: OpRecord | None = None) -> int:
        """Append one batch; returns the committed byte offset.

        Entity and activity records already present in the log are not
        rewritten; relations are appended as given. Re-appending an
        identical batch is a no-op.
        """
        with self._lock:
            raw_parts: list[str] = []
            for p in provlets:
                for a in p.activities:
                    raw_parts.append(_activity_payload(a))
                for e in p.entities:
                    raw_parts.append(_entity_payload(e))
                for r in p.relations:
                    raw_parts.append(_relation_payload(r))
            if op_record is not None:
                raw_parts.append(_DUMPS(op_record.to_dict()))
            if not raw_parts:
                return self._offset
            checksum = hashlib.blake2b("\n".join(raw_parts).encode("utf-8"), digest_size=16).hexdigest()
            if checksum in self._seen_batches:
                return self._offset
            self._seen_batches.add(checksum)
            lines: list[str] = []
            count = 0
            for p in provlets:
                for a in p.activities:
                    if a.id not in self._seen_activities:
                        self._seen_activities.add(a.id)
                        lines.append(_frame("A", _activity_payload(a)))
                        count += 1
                for e in p.entities:
                    if e.id not in self._seen_entities:
                        self._seen_entities.add(e.id)
                        lines.append(_frame("E", _entity_payload(e)))
                        count += 1
                for r in p.relations:
                    lines.append(_frame("R", _relation_payload(r)))
                    count += 1
            if op_record is not None:
                if op_record.op_seq in self._seen_ops:
                    raise IntegrityError(f"duplicate op record for op_seq {op_record.op_seq}")
                self._seen_ops.add(op_record.op_seq)
                lines.append(_frame("O", _DUMPS(op_record.to_dict())))
                count += 1
            lines.append(_frame("B", _DUMPS({"n": count, "sum": checksum})))
            text = "".join(lines)
            self._write(text)
            self._offset += len(text.encode("utf-8"))
            return self._offset

    def record_op_stats(self, op_record: OpRecord) -> int:
        """Append a statistics record for one step as its own batch."""
        return self.append_provlets((), op_record=op_record)

    def close(self) -> None:
        if self._queue is not None:
            self._queue.put(None)
            assert self._worker is not None
            self._worker.join()
            self._queue = None
        self._fh.close()

    def __enter__(self) -> "ProvLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_records(path: Union[str, Path]) -> Iterator[tuple[str, str, int]]:
    """Yield (tag, payload, byte_offset) for every record in the log."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("utf-8")
        if header != HEADER:
            raise IntegrityError(f"unrecognized log header {header!r}")
        offset = len(HEADER.encode("utf-8"))
        buffer = fh.read()
    pos = 0
    data = buffer
    while pos < len(data):
        colon = data.find(b":", pos)
        if colon < 0:
            raise IntegrityError(f"corrupt record framing at byte {offset + pos}")
        try:
            length = int(data[pos:colon])
        except ValueError:
            raise IntegrityError(f"corrupt record length at byte {offset + pos}") from None
        start = colon + 1
        end = start + length
        if end + 1 > len(data) or data[end : end + 1] != b"\n":
            raise IntegrityError(f"truncated record at byte {offset + pos}")
        body = data[start:end].decode("utf-8")
        yield body[0], body[1:], offset + pos
        pos = end + 1


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


@dataclass
class ProvGraph:
    entities: dict[str, Entity] = field(default_factory=dict)
    activities: dict[str, Activity] = field(default_factory=dict)
    relations: list[Relation] = field(default_factory=list)
    op_records: dict[int, OpRecord] = field(default_factory=dict)
    # Adjacency, populated by _index().
    derived_from: dict[str, list[str]] = field(default_factory=dict)
    derives: dict[str, list[str]] = field(default_factory=dict)
    generated_by: dict[str, str] = field(default_factory=dict)
    invalidated_by: dict[str, list[str]] = field(default_factory=dict)
    used_entities: dict[str, list[str]] = field(default_factory=dict)  # activity -> entities
    used_by: dict[str, list[str]] = field(default_factory=dict)  # entity -> activities
    generated_entities: dict[str, list[str]] = field(default_factory=dict)  # activity -> entities
    invalidated_entities: dict[str, list[str]] = field(default_factory=dict)  # activity -> entities
    versions: dict[tuple[int, str], list[tuple[int, str]]] = field(default_factory=dict)

    def _index(self) -> None:
        for r in self.relations:
            if r.kind == DERIVED:
                self.derived_from.setdefault(r.source, []).append(r.target)
                self.derives.setdefault(r.target, []).append(r.source)
            elif r.kind == GENERATED:
                self.generated_by[r.source] = r.target
                self.generated_entities.setdefault(r.target, []).append(r.source)
            elif r.kind == USED:
                self.used_entities.setdefault(r.source, []).append(r.target)
                self.used_by.setdefault(r.target, []).append(r.source)
            elif r.kind == INVALIDATED:
                self.invalidated_by.setdefault(r.source, []).append(r.target)
                self.invalidated_entities.setdefault(r.target, []).append(r.source)
        for e in self.entities.values():
            self.versions.setdefault((e.row_id, e.feature), []).append((e.op_seq, e.id))
        for chain in self.versions.values():
            chain.sort()

    def resolve(self, row_id: int, feature: str, frontier: int) -> Entity | None:
        """Most recent entity version of (row, feature) at or before the
        frontier step."""
        chain = self.versions.get((row_id, feature))
        if not chain:
            return None
        best = None
        for op_seq, eid in chain:
            if op_seq > frontier:
                break
            best = eid
        return self.entities[best] if best else None

    def activity_of_op(self, op_seq: int) -> Activity | None:
        aid = f"a:{op_seq}"
        return self.activities.get(aid)

    def max_op_seq(self) -> int:
        ops = [a.op_seq for a in self.activities.values()]
        return max(ops, default=-1)

    def validate(self) -> None:
        """Check the structural invariants; raises IntegrityError on failure.

        Every derivation is supported by a usage and a generation through one
        shared activity; step numbers strictly increase along derivations; no
        entity is both generated and invalidated by the same activity; an
        entity is invalidated at most once.
        """
        used_pairs = {(r.source, r.target) for r in self.relations if r.kind == USED}
        gen_pairs = {(r.source, r.target) for r in self.relations if r.kind == GENERATED}
        for new_id, sources in self.derived_from.items():
            new_entity = self.entities[new_id]
            gen_act = self.generated_by.get(new_id)
            if gen_act is None:
                raise IntegrityError(f"derived entity {new_id} has no generation")
            for src in sources:
                src_entity = self.entities[src]
                if new_entity.op_seq <= src_entity.op_seq:
                    raise IntegrityError(
                        f"derivation {new_id} <- {src} does not advance op_seq"
                    )
                if (gen_act, src) not in used_pairs:
                    raise IntegrityError(
                        f"derivation {new_id} <- {src} lacks a matching usage through {gen_act}"
                    )
                if (new_id, gen_act) not in gen_pairs:
                    raise IntegrityError(f"derivation target {new_id} not generated by {gen_act}")
        for eid, activities in self.invalidated_by.items():
            if len(set(activities)) > 1:
                raise IntegrityError(f"entity {eid} invalidated more than once")
            if self.generated_by.get(eid) in activities:
                raise IntegrityError(f"entity {eid} generated and invalidated by one activity")

    def counts(self) -> dict[str, int]:
        by_kind = {k: 0 for k in RELATION_KINDS}
        for r in self.relations:
            by_kind[r.kind] += 1
        return {
            "entities": len(self.entities),
            "activities": len(self.activities),
            "relations": len(self.relations),
            **by_kind,
        }


def build_graph(path: Union[str, Path], allow_partial: bool = False) -> ProvGraph:
    """Assemble the graph from a completed log in a single pass.

    Raises IntegrityError on dangling references, conflicting
    redefinitions, checksum mismatches, or (unless allowed) trailing
    uncommitted records.
    """
    graph = ProvGraph()
    relation_set: set[Relation] = set()
    pending = 0
    for tag, payload, offset in read_records(path):
        if tag == "B":
            pending = 0
            continue
        pending += 1
        data = json.loads(payload)
        if tag == "E":
            e = Entity(data["id"], data["k"], data["i"], data["f"], data["v"])
            old = graph.entities.get(e.id)
            if old is not None and old != e:
                raise IntegrityError(f"conflicting redefinition of entity {e.id}")
            graph.entities[e.id] = e
        elif tag == "A":
            a = Activity(data["id"], data["k"], data["class"], data["fn"], tuple(data["af"]))
            old = graph.activities.get(a.id)
            if old is not None and old != a:
                raise IntegrityError(f"conflicting redefinition of activity {a.id}")
            graph.activities[a.id] = a
        elif tag == "R":
            r = Relation(data["r"], data["s"], data["t"])
            if r not in relation_set:
                relation_set.add(r)
                graph.relations.append(r)
        elif tag == "O":
            rec = OpRecord.from_dict(data)
            if rec.op_seq in graph.op_records:
                raise IntegrityError(f"duplicate op record for op_seq {rec.op_seq}")
            graph.op_records[rec.op_seq] = rec
        else:
            raise IntegrityError(f"unknown record tag {tag!r} at byte {offset}")
    if pending and not allow_partial:
        raise IntegrityError("log ends with an uncommitted batch")
    _check_references(graph)
    graph._index()
    return graph


def _check_references(graph: ProvGraph) -> None:
    for r in graph.relations:
        if r.kind == DERIVED:
            for eid in (r.source, r.target):
                if eid not in graph.entities:
                    raise IntegrityError(f"relation references undefined entity {eid}")
        elif r.kind == USED:
            if r.source not in graph.activities:
                raise IntegrityError(f"relation references undefined activity {r.source}")
            if r.target not in graph.entities:
                raise IntegrityError(f"relation references undefined entity {r.target}")
        elif r.kind in (GENERATED, INVALIDATED):
            if r.source not in graph.entities:
                raise IntegrityError(f"relation references undefined entity {r.source}")
            if r.target not in graph.activities:
                raise IntegrityError(f"relation references undefined activity {r.target}")
        else:
            raise IntegrityError(f"unknown relation kind {r.kind!r}")


# ---------------------------------------------------------------------------
# PROV-JSON
# ---------------------------------------------------------------------------

_PROV_KEYS = {
    USED: ("prov:activity", "prov:entity"),
    GENERATED: ("prov:entity", "prov:activity"),
    DERIVED: ("prov:generatedEntity", "prov:usedEntity"),
    INVALIDATED: ("prov:entity", "prov:activity"),
}

_STMT_PREFIX = {USED: "u", GENERATED: "g", DERIVED: "d", INVALIDATED: "i"}


def export_prov_json(graph: ProvGraph) -> str:
    """Serialize the graph as a PROV-JSON document; byte-stable for a given
    graph."""
    doc: dict = {
        "prefix": {"pt": "urn:provtrack:"},
        "entity": {},
        "activity": {},
        USED: {},
        "wasGeneratedBy": {},
        "wasDerivedFrom": {},
        "wasInvalidatedBy": {},
    }
    for eid in sorted(graph.entities):
        e = graph.entities[eid]
        doc["entity"][eid] = {
            "prov:value": e.value,
            "pt:op": e.op_seq,
            "pt:row": e.row_id,
            "pt:feature": e.feature,
        }
    for aid in sorted(graph.activities):
        a = graph.activities[aid]
        doc["activity"][aid] = {
            "pt:op": a.op_seq,
            "pt:class": a.operator_class,
            "pt:function": a.function_name,
            "pt:features": list(a.affected_features),
        }
    ordered = sorted(graph.relations)
    counters = {k: 0 for k in RELATION_KINDS}
    for r in ordered:
        src_key, tgt_key = _PROV_KEYS[r.kind]
        n = counters[r.kind]
        counters[r.kind] = n + 1
        doc[r.kind][f"_:{_STMT_PREFIX[r.kind]}{n}"] = {src_key: r.source, tgt_key: r.target}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def import_prov_json(text: str) -> ProvGraph:
    """Rebuild a graph from a PROV-JSON document produced by export."""
    doc = json.loads(text)
    graph = ProvGraph()
    for eid, attrs in doc.get("entity", {}).items():
        graph.entities[eid] = Entity(
            eid, attrs["pt:op"], attrs["pt:row"], attrs["pt:feature"], attrs["prov:value"]
        )
    for aid, attrs in doc.get("activity", {}).items():
        graph.activities[aid] = Activity(
            aid, attrs["pt:op"], attrs["pt:class"], attrs["pt:function"], tuple(attrs["pt:features"])
        )
    seen: set[Relation] = set()
    for kind in RELATION_KINDS:
        src_key, tgt_key = _PROV_KEYS[kind]
        for stmt in doc.get(kind, {}).values():
            r = Relation(kind, stmt[src_key], stmt[tgt_key])
            if r not in seen:
                seen.add(r)
                graph.relations.append(r)
    _check_references(graph)
    graph._index()
    return graph


def graphs_equal(a: ProvGraph, b: ProvGraph) -> bool:
    return (
        a.entities == b.entities
        and a.activities == b.activities
        and set(a.relations) == set(b.relations)
    )
