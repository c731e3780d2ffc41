"""Server-side translator: reconstructs, validates, persists, forwards.

The translator subscribes to the broker, opens incoming envelopes, and folds
records into per-workflow graphs (out-of-order records are held and retried).
When a workflow ends its graph is validated, exported, written to the store
(one ``events.jsonl`` plus a ``prov.json`` per workflow, both written so a
crash can never expose a truncated document), and forwarded to the configured
sink.
"""

from __future__ import annotations

import http.client
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from provlight.model import (
    GraphBuilder,
    OrderViolation,
    ProvDocument,
    export_prov,
    validate_graph,
)
from provlight.session import ClientSession
from provlight.wire import CaptureRecord, DataPayload, Malformed, RecordKind, open_envelope

log = logging.getLogger(__name__)

DEFAULT_TOPIC_FILTER = "prov/+"


class TranslatorError(Exception):
    pass


class UnknownWorkflow(TranslatorError):
    pass


class SinkUnavailable(TranslatorError):
    pass


# -- record <-> json ----------------------------------------------------------

def record_to_json(record: CaptureRecord) -> dict:
    return {
        "kind": record.kind.name,
        "workflow_id": record.workflow_id,
        "task_id": record.task_id,
        "dependencies": list(record.dependencies),
        "data": [
            {
                "id": p.id,
                "derivations": list(p.derivations),
                "attributes": [list(pair) for pair in p.attributes],
            }
            for p in record.data
        ],
        "timestamp": record.timestamp,
    }


def record_from_json(obj: dict) -> CaptureRecord:
    return CaptureRecord(
        kind=RecordKind[obj["kind"]],
        workflow_id=obj["workflow_id"],
        task_id=obj["task_id"],
        dependencies=tuple(obj["dependencies"]),
        data=tuple(
            DataPayload(
                id=p["id"],
                derivations=tuple(p["derivations"]),
                attributes=tuple((k, v) for k, v in p["attributes"]),
            )
            for p in obj["data"]
        ),
        timestamp=obj["timestamp"],
    )


# -- persistence ----------------------------------------------------------------

class FileStore:
    """Per-workflow event log plus final document, crash-safe.

    Documents go through a temp file and an atomic rename; event lines are
    single whole-line writes. ``fault_hook`` is a test seam invoked at the
    instants a crash could interleave with the write sequence.
    """

    EVENTS = "events.jsonl"
    DOCUMENT = "prov.json"
    INCOMPLETE = "prov.incomplete.json"

    def __init__(self, root: os.PathLike | str, flush_every_record: bool = True,
                 fault_hook: Optional[Callable[[str], None]] = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.flush_every_record = flush_every_record
        self.fault_hook = fault_hook or (lambda point: None)
        self._buffers: dict[str, list[str]] = {}

    def _wf_dir(self, workflow_id: str) -> Path:
        safe = workflow_id.replace("/", "_")
        path = self.root / safe
        path.mkdir(parents=True, exist_ok=True)
        return path

    def append_event(self, workflow_id: str, record: CaptureRecord) -> None:
        line = json.dumps(record_to_json(record), separators=(",", ":")) + "\n"
        if not self.flush_every_record:
            self._buffers.setdefault(workflow_id, []).append(line)
            return
        self.fault_hook("event:before-write")
        path = self._wf_dir(workflow_id) / self.EVENTS
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
        self.fault_hook("event:after-write")

    def _drain_buffer(self, workflow_id: str) -> None:
        lines = self._buffers.pop(workflow_id, None)
        if not lines:
            return
        path = self._wf_dir(workflow_id) / self.EVENTS
        with open(path, "a", encoding="utf-8") as fh:
            for line in lines:
                self.fault_hook("event:before-write")
                fh.write(line)
                fh.flush()
                self.fault_hook("event:after-write")

    def persist_document(self, workflow_id: str, doc: ProvDocument,
                         incomplete: bool = False) -> Path:
        self._drain_buffer(workflow_id)
        name = self.INCOMPLETE if incomplete else self.DOCUMENT
        final = self._wf_dir(workflow_id) / name
        tmp = final.with_name(final.name + ".tmp")
        payload = json.dumps(doc.to_json_obj(), indent=1)
        self.fault_hook("doc:before-tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(payload)
            fh.flush()
            self.fault_hook("doc:mid-write")
            os.fsync(fh.fileno())
        self.fault_hook("doc:before-rename")
        os.replace(tmp, final)
        self.fault_hook("doc:after-rename")
        return final

    def load_document(self, workflow_id: str) -> ProvDocument:
        path = self._wf_dir(workflow_id) / self.DOCUMENT
        if not path.exists():
            raise UnknownWorkflow(f"no document for workflow {workflow_id!r}")
        with open(path, encoding="utf-8") as fh:
            return ProvDocument.from_json_obj(json.load(fh))

    def load_events(self, workflow_id: str) -> list[CaptureRecord]:
        path = self._wf_dir(workflow_id) / self.EVENTS
        if not path.exists():
            return []
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(record_from_json(json.loads(line)))
        return records

    def list_workflows(self) -> list[str]:
        if not self.root.exists():
            return []
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())


# -- forward sinks -----------------------------------------------------------------

class NullSink:
    def forward(self, workflow_id: str, doc: ProvDocument) -> None:
        pass


class HttpLikeSink:
    """POSTs the document to an endpoint; any 2xx reply counts as delivered."""

    def __init__(self, host: str, port: int, path: str = "/prov",
                 timeout_s: float = 5.0):
        self.host = host
        self.port = port
        self.path = path
        self.timeout_s = timeout_s

    def forward(self, workflow_id: str, doc: ProvDocument) -> None:
        body = json.dumps(doc.to_json_obj()).encode()
        try:
            conn = http.client.HTTPConnection(self.host, self.port,
                                              timeout=self.timeout_s)
            conn.request("POST", f"{self.path}/{workflow_id}", body,
                         {"Content-Type": "application/json"})
            response = conn.getresponse()
            response.read()
            conn.close()
        except OSError as exc:
            raise SinkUnavailable(f"sink unreachable: {exc}") from None
        if not 200 <= response.status < 300:
            raise SinkUnavailable(f"sink replied {response.status}")


# -- translator state ----------------------------------------------------------------

@dataclass
class TranslatorStats:
    envelopes: int = 0
    records: int = 0
    malformed: int = 0
    violations: int = 0
    pending: int = 0
    documents: int = 0


@dataclass
class IngestReport:
    applied: int = 0
    pending: int = 0
    malformed: int = 0
    completed_workflows: list[str] = field(default_factory=list)


@dataclass
class _WorkflowSlot:
    builder: GraphBuilder
    topic: str
    complete: bool = False
    persisted: bool = False
    forwarded: bool = False
    document: Optional[ProvDocument] = None


class TopicWorker:
    """Share-nothing worker for one client topic."""

    def __init__(self, topic: str, store: Optional[FileStore], sink,
                 stats: TranslatorStats):
        self.topic = topic
        self.store = store
        self.sink = sink
        self.stats = stats
        self.slots: dict[str, _WorkflowSlot] = {}

    def _slot(self, workflow_id: str) -> _WorkflowSlot:
        slot = self.slots.get(workflow_id)
        if slot is None:
            slot = _WorkflowSlot(builder=GraphBuilder(), topic=self.topic)
            self.slots[workflow_id] = slot
        return slot

    def ingest(self, records: list[CaptureRecord], report: IngestReport) -> None:
        for record in records:
            slot = self._slot(record.workflow_id)
            try:
                applied = slot.builder.add(record)
            except OrderViolation:
                self.stats.malformed += 1
                report.malformed += 1
                continue
            report.applied += len(applied)
            self.stats.records += len(applied)
            for done in applied:  # log in application order, incl. unblocked ones
                if self.store is not None:
                    self.store.append_event(done.workflow_id, done)
                if done.kind is RecordKind.WORKFLOW_END:
                    slot.complete = True
                    report.completed_workflows.append(done.workflow_id)
        report.pending = sum(len(s.builder.pending) for s in self.slots.values())


class TranslatorService:
    """Subscriber session plus per-topic workers; also the network actor."""

    def __init__(self, net, broker_addr, store: Optional[FileStore],
                 sink=None, client_id: str = "translator",
                 topic_filter: str = DEFAULT_TOPIC_FILTER):
        self.net = net
        self.store = store
        self.sink = sink or NullSink()
        self.topic_filter = topic_filter
        self.stats = TranslatorStats()
        self.workers: dict[str, TopicWorker] = {}
        self.unforwarded: list[str] = []
        self.session = ClientSession(client_id, broker_addr, net)
        self.addr = None

    # -- lifecycle -------------------------------------------------------------

    def start(self, addr=None) -> None:
        if addr is None:
            addr = ("127.0.0.1", 0) if isinstance(self.session.broker_addr, tuple) \
                else "translator"
        bound = self.net.attach(addr, self)
        self.addr = bound
        self.session.bind(bound)
        self.session.connect(clean=True)
        self.session.subscribe(self.topic_filter)

    def stop(self, persist_incomplete: bool = True) -> None:
        if persist_incomplete:
            self.persist_incomplete()
        self.session.disconnect()
        if self.addr is not None:
            self.net.detach(self.addr)

    # -- actor half (delegates to the subscriber session) ------------------------

    def handle_datagram(self, src, data: bytes, now: int):
        outs = self.session.handle_datagram(src, data, now)
        for topic, payload in self.session.take_delivered():
            try:
                self.ingest_envelope(topic, payload)
            except SinkUnavailable:
                pass  # already queued for retry; ingest must never kill the loop
        return outs

    def poll(self, now: int):
        return self.session.poll(now)

    def next_deadline(self):
        return self.session.next_deadline()

    # -- ingestion ---------------------------------------------------------------

    def worker_for(self, topic: str) -> TopicWorker:
        worker = self.workers.get(topic)
        if worker is None:
            worker = TopicWorker(topic, self.store, self.sink, self.stats)
            self.workers[topic] = worker
        return worker

    def ingest_envelope(self, topic: str, envelope: bytes) -> IngestReport:
        report = IngestReport()
        self.stats.envelopes += 1
        try:
            records = open_envelope(envelope)
        except Malformed:
            self.stats.malformed += 1
            report.malformed += 1
            return report
        self.worker_for(topic).ingest(records, report)
        self.stats.pending = sum(
            len(s.builder.pending)
            for w in self.workers.values() for s in w.slots.values())
        for workflow_id in report.completed_workflows:
            self.on_workflow_end(workflow_id)
        return report

    def _find_slot(self, workflow_id: str) -> Optional[_WorkflowSlot]:
        for worker in self.workers.values():
            slot = worker.slots.get(workflow_id)
            if slot is not None:
                return slot
        return None

    def on_workflow_end(self, workflow_id: str) -> ProvDocument:
        """Validate, export, persist, and forward one finished workflow."""
        slot = self._find_slot(workflow_id)
        if slot is None:
            raise UnknownWorkflow(workflow_id)
        violations = validate_graph(slot.builder.graph) + slot.builder.violations
        if violations:
            self.stats.violations += len(violations)
            for violation in violations:
                log.warning("workflow %s: %s", workflow_id, violation)
        doc = export_prov(slot.builder.graph, strict=False)
        slot.document = doc
        if self.store is not None:
            self.store.persist_document(workflow_id, doc,
                                        incomplete=bool(violations))
            slot.persisted = True
        try:
            self.sink.forward(workflow_id, doc)
            slot.forwarded = True
        except SinkUnavailable as exc:
            log.warning("forward of %s failed: %s", workflow_id, exc)
            if workflow_id not in self.unforwarded:
                self.unforwarded.append(workflow_id)
            raise
        finally:
            self.stats.documents += 1
        return doc

    def retry_forwards(self) -> int:
        """Retry failed sink deliveries; returns how many are still stuck."""
        still = []
        for workflow_id in self.unforwarded:
            slot = self._find_slot(workflow_id)
            if slot is None or slot.document is None:
                continue
            try:
                self.sink.forward(workflow_id, slot.document)
                slot.forwarded = True
            except SinkUnavailable:
                still.append(workflow_id)
        self.unforwarded = still
        return len(still)

    def persist_incomplete(self) -> int:
        """Persist unfinished graphs, flagged, e.g. on shutdown or idle TTL."""
        if self.store is None:
            return 0
        count = 0
        for worker in self.workers.values():
            for workflow_id, slot in worker.slots.items():
                if slot.complete:
                    continue
                doc = export_prov(slot.builder.graph, strict=False)
                self.store.persist_document(workflow_id, doc, incomplete=True)
                count += 1
        return count

    # -- convenience -----------------------------------------------------------

    def graph_for(self, workflow_id: str):
        slot = self._find_slot(workflow_id)
        if slot is None:
            raise UnknownWorkflow(workflow_id)
        return slot.builder.graph

    def workflow_complete(self, workflow_id: str) -> bool:
        slot = self._find_slot(workflow_id)
        return slot is not None and slot.complete


# -- queries -----------------------------------------------------------------------

@dataclass(frozen=True)
class Selector:
    """Declarative row selection over a persisted workflow document."""

    target: str = "data"          # "data" | "tasks"
    key: Optional[str] = None     # attribute filter (data only)
    order_by: Optional[str] = None
    descending: bool = True
    limit: Optional[int] = None


def query_graph(store: FileStore, workflow_id: str, selector: Selector) -> list[dict]:
    doc = store.load_document(workflow_id)
    if selector.target == "tasks":
        rows = []
        for activity in doc.activities:
            row = dict(activity)
            if row.get("start_time") is not None and row.get("end_time") is not None:
                row["elapsed"] = row["end_time"] - row["start_time"]
            else:
                row["elapsed"] = None
            rows.append(row)
        if selector.order_by:
            field_name = selector.order_by
            rows = [r for r in rows if r.get(field_name) is not None]
            rows.sort(key=lambda r: (r[field_name], r["id"]))
            if selector.descending:
                rows.sort(key=lambda r: (-r[field_name], r["id"]))
        else:
            rows.sort(key=lambda r: r["id"])
        return rows[:selector.limit] if selector.limit else rows

    if selector.target != "data":
        raise ValueError(f"unknown selector target {selector.target!r}")
    rows = []
    for entity in doc.entities:
        attrs = dict(entity["attributes"])
        if selector.key is not None and selector.key not in attrs:
            continue
        rows.append({
            "id": entity["id"],
            "workflow_id": entity["workflow_id"],
            "attributes": entity["attributes"],
            "value": attrs.get(selector.key) if selector.key else None,
        })
    order_key = selector.order_by or selector.key
    if order_key:
        def numeric(row):
            value = dict(row["attributes"]).get(order_key)
            return value if isinstance(value, (int, float)) and not isinstance(value, bool) else None

        rows = [r for r in rows if numeric(r) is not None]
        rows.sort(key=lambda r: (numeric(r), r["id"]))
        if selector.descending:
            rows.sort(key=lambda r: (-numeric(r), r["id"]))
    else:
        rows.sort(key=lambda r: r["id"])
    return rows[:selector.limit] if selector.limit else rows
