"""Provenance domain model: records, graph assembly, validation, export.

Workflows map to agents, tasks to activities, and data records to entities.
Six relationship kinds tie them together; :func:`export_prov` emits one
statement per relationship instance.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from provlight.wire import CaptureRecord, DataPayload, RecordKind, Scalar

PENDING_LIMIT_DEFAULT = 10_000


class ModelError(Exception):
    """Base class for graph mutation failures."""


class UnknownTask(ModelError):
    """Task-end refers to a task that has not begun."""


class OrderViolation(ModelError):
    """Record arrived before its prerequisite, or the pending set overflowed."""


class UnknownWorkflow(OrderViolation):
    """Record refers to a workflow that has not begun."""


class InvalidGraph(ModelError):
    """Graph failed validation where a clean graph was required."""

    def __init__(self, violations: list["Violation"]):
        super().__init__(f"{len(violations)} violations")
        self.violations = violations


class TaskStatus(Enum):
    RUNNING = "Running"
    FINISHED = "Finished"


class RelationshipKind(Enum):
    WAS_ASSOCIATED_WITH = "wasAssociatedWith"
    WAS_INFORMED_BY = "wasInformedBy"
    USED = "used"
    WAS_GENERATED_BY = "wasGeneratedBy"
    WAS_ATTRIBUTED_TO = "wasAttributedTo"
    WAS_DERIVED_FROM = "wasDerivedFrom"


@dataclass
class WorkflowRecord:
    id: str
    start_time: Optional[int] = None
    end_time: Optional[int] = None


@dataclass
class TaskRecord:
    id: str
    workflow: str
    dependencies: list[str] = field(default_factory=list)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    start_time: Optional[int] = None
    end_time: Optional[int] = None

    @property
    def status(self) -> Optional[TaskStatus]:
        if self.end_time is not None:
            return TaskStatus.FINISHED
        if self.start_time is not None:
            return TaskStatus.RUNNING
        return None


@dataclass
class DataRecord:
    id: str
    workflow_id: str
    derivations: list[str] = field(default_factory=list)
    attributes: list[tuple[str, Scalar]] = field(default_factory=list)


@dataclass
class Violation:
    """One integrity problem; violations are data, not exceptions."""

    entity_kind: str  # "workflow" | "task" | "data"
    entity_id: str
    field: str
    relationship: Optional[RelationshipKind]
    detail: str

    def __str__(self) -> str:
        rel = f" [{self.relationship.value}]" if self.relationship else ""
        return f"{self.entity_kind} {self.entity_id!r}.{self.field}{rel}: {self.detail}"


@dataclass
class ProvGraph:
    """Value-type provenance graph; equality is deep and order-insensitive."""

    workflows: dict[str, WorkflowRecord] = field(default_factory=dict)
    tasks: dict[str, TaskRecord] = field(default_factory=dict)
    data: dict[str, DataRecord] = field(default_factory=dict)


def _dedupe_attributes(payload: DataPayload) -> tuple[list[tuple[str, Scalar]], bool]:
    """Last-write-wins on duplicate keys; reports whether deduping happened."""
    seen: dict[str, Scalar] = {}
    for key, value in payload.attributes:
        seen[key] = value
    deduped = len(seen) != len(payload.attributes)
    if deduped:
        order: list[str] = []
        for key, _ in payload.attributes:
            if key not in order:
                order.append(key)
        return [(k, seen[k]) for k in order], True
    return list(payload.attributes), False


def _upsert_data(graph: ProvGraph, workflow_id: str, payload: DataPayload,
                 violations: Optional[list[Violation]] = None) -> None:
    attributes, deduped = _dedupe_attributes(payload)
    if deduped and violations is not None:
        violations.append(Violation(
            entity_kind="data", entity_id=payload.id, field="attributes",
            relationship=None, detail="duplicate attribute key (last write wins)"))
    graph.data[payload.id] = DataRecord(
        id=payload.id,
        workflow_id=workflow_id,
        derivations=list(payload.derivations),
        attributes=attributes,
    )


def apply_record(graph: ProvGraph, record: CaptureRecord,
                 violations: Optional[list[Violation]] = None) -> ProvGraph:
    """Fold one capture record into the graph, in place.

    Idempotent: applying the same record again leaves the graph unchanged,
    including late duplicates arriving after the task or workflow finished.
    Raises :class:`UnknownWorkflow` / :class:`UnknownTask` when the record's
    prerequisite is missing; callers that see reordered streams hold such
    records and retry (see :class:`GraphBuilder`).
    """
    kind = record.kind
    if kind is RecordKind.WORKFLOW_BEGIN:
        wf = graph.workflows.get(record.workflow_id)
        if wf is None:
            graph.workflows[record.workflow_id] = WorkflowRecord(
                id=record.workflow_id, start_time=record.timestamp)
        else:
            wf.start_time = record.timestamp
    elif kind is RecordKind.WORKFLOW_END:
        wf = graph.workflows.get(record.workflow_id)
        if wf is None or wf.start_time is None:
            raise UnknownWorkflow(f"workflow-end before begin: {record.workflow_id!r}")
        wf.end_time = record.timestamp
    elif kind is RecordKind.TASK_BEGIN:
        if record.workflow_id not in graph.workflows:
            raise UnknownWorkflow(f"task {record.task_id!r} references unknown "
                                  f"workflow {record.workflow_id!r}")
        task = graph.tasks.get(record.task_id)
        if task is None:
            task = TaskRecord(id=record.task_id, workflow=record.workflow_id)
            graph.tasks[record.task_id] = task
        task.workflow = record.workflow_id
        task.start_time = record.timestamp
        task.dependencies = list(record.dependencies)
        task.inputs = [p.id for p in record.data]
        for payload in record.data:
            _upsert_data(graph, record.workflow_id, payload, violations)
    elif kind is RecordKind.TASK_END:
        task = graph.tasks.get(record.task_id)
        if task is None:
            raise UnknownTask(f"task-end for unknown task {record.task_id!r}")
        task.end_time = record.timestamp
        task.outputs = [p.id for p in record.data]
        for payload in record.data:
            _upsert_data(graph, record.workflow_id, payload, violations)
    else:  # pragma: no cover - RecordKind is closed
        raise ModelError(f"unhandled record kind {kind}")
    return graph


class GraphBuilder:
    """Applies a record stream, holding out-of-order records for retry.

    Records whose prerequisites are missing go to a bounded pending set and
    are retried after every successful apply. Overflowing the bound raises
    :class:`OrderViolation`.
    """

    def __init__(self, pending_limit: int = PENDING_LIMIT_DEFAULT):
        self.graph = ProvGraph()
        self.pending: deque[CaptureRecord] = deque()
        self.pending_limit = pending_limit
        self.violations: list[Violation] = []
        self.applied = 0

    def add(self, record: CaptureRecord) -> list[CaptureRecord]:
        """Apply one record; returns everything applied by this call, in
        application order (the record itself plus any pending records it
        unblocked), or an empty list if the record was held."""
        try:
            apply_record(self.graph, record, self.violations)
        except (UnknownTask, UnknownWorkflow):
            if len(self.pending) >= self.pending_limit:
                raise OrderViolation(
                    f"pending set overflow at {self.pending_limit} records")
            self.pending.append(record)
            return []
        self.applied += 1
        return [record] + self._retry_pending()

    def _retry_pending(self) -> list[CaptureRecord]:
        resolved = []
        progress = True
        while progress and self.pending:
            progress = False
            for _ in range(len(self.pending)):
                record = self.pending.popleft()
                try:
                    apply_record(self.graph, record, self.violations)
                except (UnknownTask, UnknownWorkflow):
                    self.pending.append(record)
                else:
                    self.applied += 1
                    resolved.append(record)
                    progress = True
        return resolved


def validate_graph(graph: ProvGraph) -> list[Violation]:
    """Check referential closure and per-record invariants.

    Returns an empty list iff the graph is clean.
    """
    out: list[Violation] = []

    def missing(kind: str, entity_id: str, fieldname: str,
                rel: Optional[RelationshipKind], ref: str) -> None:
        out.append(Violation(kind, entity_id, fieldname, rel, f"missing {ref!r}"))

    for wf in graph.workflows.values():
        if not wf.id:
            out.append(Violation("workflow", wf.id, "id", None, "empty id"))
        if wf.end_time is not None:
            if wf.start_time is None:
                out.append(Violation("workflow", wf.id, "end_time", None,
                                     "ended without starting"))
            elif wf.end_time < wf.start_time:
                out.append(Violation("workflow", wf.id, "end_time", None,
                                     "ends before it starts"))

    for task in graph.tasks.values():
        if not task.id:
            out.append(Violation("task", task.id, "id", None, "empty id"))
        if not task.workflow:
            out.append(Violation("task", task.id, "workflow", None, "empty workflow id"))
        elif task.workflow not in graph.workflows:
            missing("task", task.id, "workflow",
                    RelationshipKind.WAS_ASSOCIATED_WITH, task.workflow)
        if task.id in task.dependencies:
            out.append(Violation("task", task.id, "dependencies",
                                 RelationshipKind.WAS_INFORMED_BY, "self-reference"))
        for dep in task.dependencies:
            if dep != task.id and dep not in graph.tasks:
                missing("task", task.id, "dependencies",
                        RelationshipKind.WAS_INFORMED_BY, dep)
        for data_id in task.inputs:
            if data_id not in graph.data:
                missing("task", task.id, "inputs", RelationshipKind.USED, data_id)
        for data_id in task.outputs:
            if data_id not in graph.data:
                missing("task", task.id, "outputs",
                        RelationshipKind.WAS_GENERATED_BY, data_id)
        overlap = set(task.inputs) & set(task.outputs)
        if overlap:
            out.append(Violation("task", task.id, "inputs", None,
                                 f"inputs and outputs overlap: {sorted(overlap)}"))
        if task.start_time is None and task.end_time is not None:
            out.append(Violation("task", task.id, "end_time", None,
                                 "finished without starting"))

    for rec in graph.data.values():
        if not rec.id:
            out.append(Violation("data", rec.id, "id", None, "empty id"))
        if not rec.workflow_id:
            out.append(Violation("data", rec.id, "workflow_id", None, "empty workflow id"))
        elif rec.workflow_id not in graph.workflows:
            missing("data", rec.id, "workflow_id",
                    RelationshipKind.WAS_ATTRIBUTED_TO, rec.workflow_id)
        if rec.id in rec.derivations:
            out.append(Violation("data", rec.id, "derivations",
                                 RelationshipKind.WAS_DERIVED_FROM, "self-reference"))
        for src in rec.derivations:
            if src != rec.id and src not in graph.data:
                missing("data", rec.id, "derivations",
                        RelationshipKind.WAS_DERIVED_FROM, src)
        keys = [k for k, _ in rec.attributes]
        if len(keys) != len(set(keys)):
            out.append(Violation("data", rec.id, "attributes", None,
                                 "duplicate attribute key"))

    return out


@dataclass(frozen=True)
class Statement:
    kind: RelationshipKind
    subject: str
    object: str


@dataclass
class ProvDocument:
    """Exported document: one agent per workflow, activity per task, entity
    per data record, plus one statement per relationship instance."""

    agents: list[dict]
    activities: list[dict]
    entities: list[dict]
    statements: list[Statement]

    def to_json_obj(self) -> dict:
        return {
            "agents": self.agents,
            "activities": self.activities,
            "entities": self.entities,
            "statements": [
                {"kind": s.kind.value, "subject": s.subject, "object": s.object}
                for s in self.statements
            ],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ProvDocument":
        statements = [
            Statement(kind=RelationshipKind(s["kind"]),
                      subject=s["subject"], object=s["object"])
            for s in obj["statements"]
        ]
        entities = []
        for e in obj["entities"]:
            e = dict(e)
            e["attributes"] = [list(pair) for pair in e["attributes"]]
            entities.append(e)
        return cls(agents=list(obj["agents"]), activities=list(obj["activities"]),
                   entities=entities, statements=statements)


def export_prov(graph: ProvGraph, strict: bool = True) -> ProvDocument:
    """Export a validated graph; deterministic (lexicographic by id).

    With ``strict`` the graph must validate cleanly, otherwise
    :class:`InvalidGraph` is raised.
    """
    if strict:
        violations = validate_graph(graph)
        if violations:
            raise InvalidGraph(violations)

    agents = [
        {"id": wf.id, "start_time": wf.start_time, "end_time": wf.end_time}
        for wf in sorted(graph.workflows.values(), key=lambda w: w.id)
    ]
    activities = [
        {
            "id": t.id,
            "workflow": t.workflow,
            "dependencies": list(t.dependencies),
            "inputs": list(t.inputs),
            "outputs": list(t.outputs),
            "start_time": t.start_time,
            "end_time": t.end_time,
            "status": t.status.value if t.status else None,
        }
        for t in sorted(graph.tasks.values(), key=lambda t: t.id)
    ]
    entities = [
        {
            "id": d.id,
            "workflow_id": d.workflow_id,
            "derivations": list(d.derivations),
            "attributes": [list(pair) for pair in d.attributes],
        }
        for d in sorted(graph.data.values(), key=lambda d: d.id)
    ]

    statements: list[Statement] = []
    for t in graph.tasks.values():
        statements.append(Statement(RelationshipKind.WAS_ASSOCIATED_WITH, t.id, t.workflow))
        for dep in t.dependencies:
            statements.append(Statement(RelationshipKind.WAS_INFORMED_BY, t.id, dep))
        for data_id in t.inputs:
            statements.append(Statement(RelationshipKind.USED, t.id, data_id))
        for data_id in t.outputs:
            statements.append(Statement(RelationshipKind.WAS_GENERATED_BY, data_id, t.id))
    for d in graph.data.values():
        statements.append(Statement(RelationshipKind.WAS_ATTRIBUTED_TO, d.id, d.workflow_id))
        for src in d.derivations:
            statements.append(Statement(RelationshipKind.WAS_DERIVED_FROM, d.id, src))
    statements.sort(key=lambda s: (s.kind.value, s.subject, s.object))

    return ProvDocument(agents=agents, activities=activities,
                        entities=entities, statements=statements)


def graphs_equal(a: ProvGraph, b: ProvGraph) -> bool:
    """Deep structural equality, insensitive to map iteration order."""
    return a == b


def copy_graph(graph: ProvGraph) -> ProvGraph:
    return ProvGraph(
        workflows={k: replace(v) for k, v in graph.workflows.items()},
        tasks={k: TaskRecord(id=v.id, workflow=v.workflow,
                             dependencies=list(v.dependencies),
                             inputs=list(v.inputs), outputs=list(v.outputs),
                             start_time=v.start_time, end_time=v.end_time)
               for k, v in graph.tasks.items()},
        data={k: DataRecord(id=v.id, workflow_id=v.workflow_id,
                            derivations=list(v.derivations),
                            attributes=list(v.attributes))
              for k, v in graph.data.items()},
    )
