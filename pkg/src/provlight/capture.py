"""User-facing instrumentation: workflow / task / data handles.

Typical use::

    cfg = CaptureConfig(broker_addr=("127.0.0.1", 1883), client_id="dev-07")
    wf = workflow_begin(cfg, "training-run", net)
    t = task_begin(wf, "epoch-1", inputs=[Data("h1", {"lr": 0.01, "epochs": 100})])
    ...  # user computation
    task_end(t, outputs=[Data("m1", {"loss": 0.12})])
    stats = workflow_end(wf)

Begin/end calls construct and enqueue records synchronously; delivery is
asynchronous until the final barrier inside :func:`workflow_end`. Task-end
records flow through the grouping buffer; everything else is published
immediately so workflow progress stays observable at runtime.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

from provlight.qos2 import RetryPolicy
from provlight.session import ClientSession, Timeout
from provlight.wire import (
    CaptureRecord,
    DataPayload,
    GroupingBuffer,
    RecordKind,
    Scalar,
    seal_envelope,
)

ENV_BROKER = "PROVLIGHT_BROKER"


class CaptureError(Exception):
    pass


class ConnectFailed(CaptureError):
    pass


class WorkflowNotActive(CaptureError):
    pass


class TaskNotActive(CaptureError):
    pass


class FlushTimeout(CaptureError):
    def __init__(self, undelivered: int):
        super().__init__(f"{undelivered} publishes still undelivered at deadline")
        self.undelivered = undelivered


@dataclass(frozen=True)
class CaptureConfig:
    broker_addr: object = None
    client_id: str = "client"
    group_size: int = 0
    compress: bool = True
    workflow_topic: Optional[str] = None  # default "prov/<client_id>"
    connect_timeout_ms: Optional[int] = None  # None = retry-budget default
    flush_timeout_ms: int = 600_000
    retry: RetryPolicy = RetryPolicy()
    record_log: bool = False  # keep emitted records (used as test oracle)

    def __post_init__(self):
        if not self.client_id or len(self.client_id.encode()) > 23:
            raise ValueError("client_id must be 1..23 bytes")
        if self.group_size < 0:
            raise ValueError("group_size must be >= 0")

    def topic(self) -> str:
        return self.workflow_topic or f"prov/{self.client_id}"


def resolve_broker_addr(cfg: CaptureConfig) -> object:
    env = os.environ.get(ENV_BROKER)
    if env:
        host, _, port = env.rpartition(":")
        return (host, int(port))
    if cfg.broker_addr is None:
        raise ConnectFailed(f"no broker address configured and {ENV_BROKER} unset")
    return cfg.broker_addr


class Data:
    """One data record attached to a task; values are copied eagerly."""

    __slots__ = ("payload",)

    def __init__(self, data_id: str,
                 attributes: Union[dict, Sequence[tuple[str, Scalar]], None] = None,
                 derivations: Iterable[str] = ()):
        if not data_id:
            raise ValueError("data id must be non-empty")
        if attributes is None:
            pairs: tuple[tuple[str, Scalar], ...] = ()
        elif isinstance(attributes, dict):
            pairs = tuple(attributes.items())
        else:
            pairs = tuple((k, v) for k, v in attributes)
        self.payload = DataPayload(id=data_id, derivations=tuple(derivations),
                                   attributes=pairs)

    @property
    def id(self) -> str:
        return self.payload.id


@dataclass
class CaptureStats:
    records: int = 0
    envelopes: int = 0
    bytes_on_wire: int = 0
    capture_wall_ms: float = 0.0  # net-clock time spent inside begin/end calls
    capture_host_ms: float = 0.0  # host wall time spent inside begin/end calls
    flush_wait_ms: float = 0.0    # part of capture_wall_ms spent in the final barrier
    retransmissions: int = 0
    undelivered: int = 0


class WorkflowHandle:
    def __init__(self, cfg: CaptureConfig, workflow_id: str, net, session: ClientSession,
                 topic_id: int):
        self.cfg = cfg
        self.workflow_id = workflow_id
        self.net = net
        self.session = session
        self.topic_id = topic_id
        self.buffer = GroupingBuffer(group_size=cfg.group_size)
        self.stats = CaptureStats()
        self.record_log: list[CaptureRecord] = []
        self.active = True
        self.ended = False

    # -- internals -------------------------------------------------------------

    def _now(self) -> int:
        return self.net.now_ms() + self.net.epoch_offset_ms

    def _publish_envelope(self, records: list[CaptureRecord]) -> None:
        envelope = seal_envelope(records, compress=self.cfg.compress)
        self.session.publish(self.topic_id, envelope)
        self.stats.envelopes += 1
        self.stats.records += len(records)
        self.stats.bytes_on_wire += len(envelope)
        if self.cfg.record_log:
            self.record_log.extend(records)

    def _route(self, record: CaptureRecord) -> None:
        decision = self.buffer.push(record)
        if decision.send_now:
            self._publish_envelope(decision.send_now)

    # -- API ---------------------------------------------------------------------

    def task_begin(self, task_id: str, dependencies: Iterable[str] = (),
                   inputs: Sequence[Data] = ()) -> "TaskHandle":
        return task_begin(self, task_id, dependencies, inputs)

    def end(self) -> CaptureStats:
        return workflow_end(self)


class TaskHandle:
    def __init__(self, workflow: WorkflowHandle, task_id: str):
        self.workflow = workflow
        self.task_id = task_id
        self.ended = False

    def end(self, outputs: Sequence[Data] = ()) -> None:
        task_end(self, outputs)


class _Timed:
    """Accumulates net-clock and host-clock time spent inside a capture call."""

    def __init__(self, handle: WorkflowHandle):
        self.handle = handle

    def __enter__(self):
        self.t_net = self.handle.net.now_ms()
        self.t_host = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.handle.stats.capture_wall_ms += self.handle.net.now_ms() - self.t_net
        self.handle.stats.capture_host_ms += (time.perf_counter() - self.t_host) * 1000
        return False


def workflow_begin(cfg: CaptureConfig, workflow_id: str, net,
                   client_addr=None) -> WorkflowHandle:
    """Connect, register the client topic, and publish the workflow-begin record."""
    broker_addr = resolve_broker_addr(cfg)
    if client_addr is None:
        client_addr = ("127.0.0.1", 0) if isinstance(broker_addr, tuple) \
            else f"capture/{cfg.client_id}"
    session = ClientSession(cfg.client_id, broker_addr, net, retry=cfg.retry)
    bound = net.attach(client_addr, session)
    session.bind(bound)
    try:
        session.connect(clean=True, timeout_ms=cfg.connect_timeout_ms)
        topic_id = session.register_topic(cfg.topic())
    except Timeout as exc:
        net.detach(bound)
        raise ConnectFailed(str(exc)) from None
    handle = WorkflowHandle(cfg, workflow_id, net, session, topic_id)
    with _Timed(handle):
        record = CaptureRecord(kind=RecordKind.WORKFLOW_BEGIN,
                               workflow_id=workflow_id, timestamp=handle._now())
        handle._publish_envelope([record])  # never grouped
    return handle


def task_begin(workflow: WorkflowHandle, task_id: str,
               dependencies: Iterable[str] = (),
               inputs: Sequence[Data] = ()) -> TaskHandle:
    """Publish the task-begin record immediately (never buffered)."""
    if not workflow.active:
        raise WorkflowNotActive(f"workflow {workflow.workflow_id!r} is not active")
    if not task_id:
        raise CaptureError("task id must be non-empty")
    with _Timed(workflow):
        record = CaptureRecord(
            kind=RecordKind.TASK_BEGIN,
            workflow_id=workflow.workflow_id,
            task_id=task_id,
            dependencies=tuple(dependencies),
            data=tuple(d.payload for d in inputs),
            timestamp=workflow._now(),
        )
        workflow._publish_envelope([record])
    return TaskHandle(workflow, task_id)


def task_end(task: TaskHandle, outputs: Sequence[Data] = ()) -> None:
    """Route the task-end record through the grouping buffer."""
    if task.ended:
        raise TaskNotActive(f"task {task.task_id!r} already ended")
    workflow = task.workflow
    if not workflow.active:
        raise WorkflowNotActive(f"workflow {workflow.workflow_id!r} is not active")
    with _Timed(workflow):
        record = CaptureRecord(
            kind=RecordKind.TASK_END,
            workflow_id=workflow.workflow_id,
            task_id=task.task_id,
            data=tuple(d.payload for d in outputs),
            timestamp=workflow._now(),
        )
        task.ended = True
        workflow._route(record)


def workflow_end(workflow: WorkflowHandle) -> CaptureStats:
    """Drain grouped records, publish workflow-end, and wait for delivery."""
    if workflow.ended:
        raise WorkflowNotActive(f"workflow {workflow.workflow_id!r} already ended")
    workflow.active = False
    workflow.ended = True
    session = workflow.session
    try:
        with _Timed(workflow):
            leftovers = workflow.buffer.flush()
            if leftovers:
                workflow._publish_envelope(leftovers)
            record = CaptureRecord(kind=RecordKind.WORKFLOW_END,
                                   workflow_id=workflow.workflow_id,
                                   timestamp=workflow._now())
            workflow._publish_envelope([record])
            flush_started = workflow.net.now_ms()
            drained = session.wait_drained(workflow.cfg.flush_timeout_ms)
            workflow.stats.flush_wait_ms += workflow.net.now_ms() - flush_started
            workflow.stats.retransmissions = session.retransmissions
            if not drained or session.failed_publishes:
                done, failed = session.poll_acks()
                undelivered = len(session.tokens) - done
                workflow.stats.undelivered = undelivered
                raise FlushTimeout(undelivered)
        return workflow.stats
    finally:
        session.disconnect()
        workflow.net.detach(session.addr)
