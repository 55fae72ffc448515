"""Declarative pipeline files: parsing, validation, and tracked execution.

A pipeline is a single JSON document (format in docs/pipeline-format.md)
naming CSV sources, an ordered list of operator steps wired by frame names,
optional per-step tracking toggles, and output CSV targets. The dataflow
must form a tree: every frame is consumed by at most one step. Conditions
and feature predicates are written in the expression mini-language and are
accepted verbatim from CLI flags as well.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

from .dataset import (
    AddRowsOp,
    AppendOp,
    Dataset,
    HAugmentOp,
    JoinOp,
    OperatorSpec,
    ProjectOp,
    SelectOp,
    TransformFn,
    TransformOp,
    VAugmentOp,
    AGGREGATES,
    JOIN_TYPES,
    ingest_csv,
    to_csv,
)
from .errors import ProvtrackError, ValidationError
from .exprs import parse_expr, parse_feature_predicate
from .tracker import ProvenanceTracker, TrackedFrame


@dataclass(frozen=True)
class SourceSpec:
    id: str
    path: str


@dataclass(frozen=True)
class StepSpec:
    op: OperatorSpec
    inputs: tuple[str, ...]
    output: str
    tracking: bool = True


@dataclass(frozen=True)
class PipelineSpec:
    sources: tuple[SourceSpec, ...]
    steps: tuple[StepSpec, ...]
    outputs: tuple[tuple[str, str], ...] = ()  # frame name -> csv path
    provenance: str | None = None

    @staticmethod
    def from_file(path: Union[str, Path]) -> "PipelineSpec":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"pipeline file is not valid JSON: {exc}") from exc
        return PipelineSpec.from_dict(doc)

    @staticmethod
    def from_dict(doc: dict) -> "PipelineSpec":
        if not isinstance(doc, dict):
            raise ValidationError("pipeline document must be a JSON object")
        sources = []
        for i, src in enumerate(doc.get("sources", [])):
            if "id" not in src or "path" not in src:
                raise ValidationError(f"source {i} needs 'id' and 'path'")
            sources.append(SourceSpec(src["id"], src["path"]))
        steps = []
        for i, raw in enumerate(doc.get("steps", [])):
            try:
                steps.append(_parse_step(raw))
            except ProvtrackError as exc:
                raise ValidationError(f"step {i}: {exc}") from exc
            except (KeyError, TypeError) as exc:
                raise ValidationError(f"step {i}: missing or malformed field {exc}") from exc
        outputs = tuple(sorted(doc.get("outputs", {}).items()))
        spec = PipelineSpec(tuple(sources), tuple(steps), outputs, doc.get("provenance"))
        spec.validate()
        return spec

    def validate(self) -> None:
        names: set[str] = set()
        for src in self.sources:
            if src.id in names:
                raise ValidationError(f"duplicate source id {src.id!r}")
            names.add(src.id)
        consumed: set[str] = set()
        for i, step in enumerate(self.steps):
            for name in step.inputs:
                if name not in names:
                    raise ValidationError(f"step {i}: unknown frame {name!r}")
                if name in consumed:
                    raise ValidationError(
                        f"step {i}: frame {name!r} is already consumed; the step graph must be a tree"
                    )
                consumed.add(name)
            if step.output in names:
                raise ValidationError(f"step {i}: output name {step.output!r} is already defined")
            names.add(step.output)
        for frame, _path in self.outputs:
            if frame not in names:
                raise ValidationError(f"output references unknown frame {frame!r}")


def _parse_step(raw: dict) -> StepSpec:
    kind = raw["op"]
    tracking = bool(raw.get("tracking", True))
    if kind == "select":
        op: OperatorSpec = SelectOp(parse_expr(raw["condition"]))
        inputs = (raw["input"],)
    elif kind == "project":
        op = ProjectOp(parse_feature_predicate(raw["features"]))
        inputs = (raw["input"],)
    elif kind == "vaugment":
        if "one_hot" in raw:
            op = VAugmentOp(x=(raw["one_hot"],), one_hot=raw["one_hot"])
        else:
            new = tuple((name, parse_expr(expr)) for name, expr in raw["new"])
            op = VAugmentOp(x=tuple(raw.get("x", ())), new_features=new)
        inputs = (raw["input"],)
    elif kind == "haugment":
        if raw["agg"] not in AGGREGATES:
            raise ValidationError(f"unknown aggregate {raw['agg']!r}")
        op = HAugmentOp(tuple(raw["group_by"]), raw["agg"], raw["y"])
        inputs = (raw["input"],)
    elif kind == "transform":
        if "expr" in raw:
            fn: TransformFn | object = parse_expr(raw["expr"])
        else:
            spec = dict(raw["fn"])
            mapping = tuple(tuple(pair) for pair in spec.pop("mapping", ()))
            fn = TransformFn(mapping=mapping, **spec)
        op = TransformOp(tuple(raw["x"]), fn)
        inputs = (raw["input"],)
    elif kind == "add_rows":
        op = AddRowsOp(tuple(tuple(r) for r in raw["rows"]))
        inputs = (raw["input"],)
    elif kind == "join":
        if raw.get("how", "inner") not in JOIN_TYPES:
            raise ValidationError(f"unknown join type {raw.get('how')!r}")
        op = JoinOp(tuple(tuple(k) for k in raw["keys"]), raw.get("how", "inner"))
        inputs = (raw["left"], raw["right"])
    elif kind == "append":
        op = AppendOp()
        inputs = (raw["left"], raw["right"])
    else:
        raise ValidationError(f"unknown operator kind {kind!r}")
    return StepSpec(op, inputs, raw["output"], tracking)


@dataclass
class RunResult:
    frames: dict[str, TrackedFrame]
    tracker: ProvenanceTracker
    log_path: Path | None
    outputs_written: list[Path] = field(default_factory=list)
    completed: bool = False


def run_pipeline(
    spec: PipelineSpec,
    base_dir: Union[str, Path] = ".",
    log_path: Union[str, Path, None] = None,
    track: bool = True,
    workers: int = 1,
    out_dir: Union[str, Path, None] = None,
) -> RunResult:
    """Execute a validated pipeline through the tracker.

    Tracking never perturbs the data: with ``track=False`` the same steps
    run through the same id allocation, only observation is skipped. A step
    failure leaves the committed prefix of the log intact and the result
    marked incomplete.
    """
    base = Path(base_dir)
    resolved_log = Path(log_path) if log_path else (Path(spec.provenance) if spec.provenance else None)
    if resolved_log is not None and not resolved_log.is_absolute():
        resolved_log = base / resolved_log
    if resolved_log is not None:
        resolved_log.parent.mkdir(parents=True, exist_ok=True)
        if resolved_log.exists():
            resolved_log.unlink()
    tracker = ProvenanceTracker(log_path=resolved_log if track else None, capture=track, workers=workers)
    result = RunResult({}, tracker, resolved_log if track else None)
    try:
        datasets = [ingest_csv(base / src.path, dataset_id=src.id) for src in spec.sources]
        handles = tracker.subscribe(datasets)
        frames = {src.id: handle for src, handle in zip(spec.sources, handles)}
        for step in spec.steps:
            tracker.dataframe_tracking = step.tracking
            if isinstance(step.op, JoinOp):
                left, right = (frames[name] for name in step.inputs)
                frames[step.output] = left.join(right, step.op.keys, step.op.how, dataset_id=step.output)
            elif isinstance(step.op, AppendOp):
                left, right = (frames[name] for name in step.inputs)
                frames[step.output] = left.append(right, dataset_id=step.output)
            else:
                (name,) = step.inputs
                out = frames[name].apply(step.op)
                out.dataset = _rename(out.dataset, step.output)
                out._snapshot = out.dataset if out._snapshot is not None and out._snapshot is not out.dataset else out._snapshot
                frames[step.output] = out
        tracker.dataframe_tracking = True
        result.frames = frames
        target_dir = Path(out_dir) if out_dir else base
        for frame_name, rel_path in spec.outputs:
            path = target_dir / rel_path
            path.parent.mkdir(parents=True, exist_ok=True)
            to_csv(frames[frame_name].dataset, path)
            result.outputs_written.append(path)
        result.completed = True
        return result
    finally:
        tracker.close()


def _rename(d: Dataset, dataset_id: str) -> Dataset:
    return Dataset(dataset_id, d.schema, d.columns, d.row_ids)
