"""Exactly-once handshake state machines.

Sender side drives PUBLISH -> PUBREC -> PUBREL -> PUBCOMP with one message
in flight at a time (stop-and-wait), which is what gives per-topic ordering.
Receiver side holds payloads and only releases them on PUBREL, so duplicated
PUBLISH frames can never double-deliver.
"""

from __future__ import annotations

import zlib
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from provlight.frames import Frame, Publish, Pubrel, Register


@dataclass(frozen=True)
class RetryPolicy:
    initial_ms: int = 250
    backoff: float = 2.0
    cap_ms: int = 4_000
    max_retries: int = 10

    def delay(self, attempt: int) -> int:
        return min(int(self.initial_ms * self.backoff ** attempt), self.cap_ms)


class TxPhase(Enum):
    AWAIT_PUBREC = "await-pubrec"
    AWAIT_PUBCOMP = "await-pubcomp"
    AWAIT_REGACK = "await-regack"


@dataclass
class SendToken:
    """Completion handle for an enqueued publish."""

    expected: int = 1
    completed: int = 0
    failed: bool = False

    @property
    def done(self) -> bool:
        return self.failed or self.completed >= self.expected


@dataclass
class _OutboundItem:
    kind: str  # "publish" | "register"
    topic_id: int
    payload: bytes = b""
    topic_name: str = ""
    token: Optional[SendToken] = None


@dataclass
class Qos2TxState:
    phase: TxPhase
    msg_id: int
    item: _OutboundItem
    last_sent: int
    retries: int = 0


class ReliableSender:
    """Stop-and-wait outbound queue with retransmission and backoff.

    Handles both QoS-2 publishes and topic REGISTER announcements so the
    broker can sequence a registration ahead of forwarded publishes within
    the same ordered queue.
    """

    def __init__(self, policy: RetryPolicy = RetryPolicy()):
        self.policy = policy
        self.queue: deque[_OutboundItem] = deque()
        self.inflight: Optional[Qos2TxState] = None
        self.next_msg_id = 1
        self.retransmissions = 0
        self.failures: list[SendToken] = []

    # -- enqueue ----------------------------------------------------------

    def enqueue_publish(self, topic_id: int, payload: bytes,
                        token: Optional[SendToken] = None) -> SendToken:
        token = token or SendToken()
        self.queue.append(_OutboundItem("publish", topic_id, payload=payload,
                                        token=token))
        return token

    def enqueue_register(self, topic_id: int, topic_name: str) -> None:
        self.queue.append(_OutboundItem("register", topic_id,
                                        topic_name=topic_name))

    @property
    def idle(self) -> bool:
        return self.inflight is None and not self.queue

    def backlog(self) -> int:
        return len(self.queue) + (1 if self.inflight else 0)

    # -- state transitions -------------------------------------------------

    def alloc_msg_id(self) -> int:
        msg_id = self.next_msg_id
        self.next_msg_id = self.next_msg_id + 1 if self.next_msg_id < 0xFFFF else 1
        return msg_id

    def _frame_for(self, state: Qos2TxState, dup: bool) -> Frame:
        item = state.item
        if state.phase is TxPhase.AWAIT_PUBREC:
            return Publish(topic_id=item.topic_id, msg_id=state.msg_id,
                           payload=item.payload, dup=dup)
        if state.phase is TxPhase.AWAIT_PUBCOMP:
            return Pubrel(msg_id=state.msg_id)
        return Register(topic_id=item.topic_id, msg_id=state.msg_id,
                        topic_name=item.topic_name)

    def pump(self, now: int) -> list[Frame]:
        """Start the next queued item if nothing is in flight."""
        if self.inflight is not None or not self.queue:
            return []
        item = self.queue.popleft()
        phase = TxPhase.AWAIT_REGACK if item.kind == "register" else TxPhase.AWAIT_PUBREC
        self.inflight = Qos2TxState(phase=phase, msg_id=self.alloc_msg_id(),
                                    item=item, last_sent=now)
        return [self._frame_for(self.inflight, dup=False)]

    def on_pubrec(self, msg_id: int, now: int) -> list[Frame]:
        st = self.inflight
        if st is None or st.msg_id != msg_id or st.phase is not TxPhase.AWAIT_PUBREC:
            return []
        st.phase = TxPhase.AWAIT_PUBCOMP
        st.last_sent = now
        st.retries = 0
        return [self._frame_for(st, dup=False)]

    def on_pubcomp(self, msg_id: int, now: int) -> list[Frame]:
        st = self.inflight
        if st is None or st.msg_id != msg_id or st.phase is not TxPhase.AWAIT_PUBCOMP:
            return []
        if st.item.token is not None:
            st.item.token.completed += 1
        self.inflight = None
        return self.pump(now)

    def on_regack(self, msg_id: int, now: int) -> list[Frame]:
        st = self.inflight
        if st is None or st.msg_id != msg_id or st.phase is not TxPhase.AWAIT_REGACK:
            return []
        self.inflight = None
        return self.pump(now)

    # -- timers -------------------------------------------------------------

    def next_deadline(self) -> Optional[int]:
        st = self.inflight
        if st is None:
            return None
        return st.last_sent + self.policy.delay(st.retries)

    def poll(self, now: int) -> list[Frame]:
        """Retransmit or fail the in-flight item when its timer expires."""
        st = self.inflight
        if st is None:
            return []
        deadline = st.last_sent + self.policy.delay(st.retries)
        if now < deadline:
            return []
        if st.retries >= self.policy.max_retries:
            if st.item.token is not None:
                st.item.token.failed = True
                self.failures.append(st.item.token)
            self.inflight = None
            return self.pump(now)
        st.retries += 1
        st.last_sent = now
        self.retransmissions += 1
        return [self._frame_for(st, dup=True)]


@dataclass
class Qos2Receiver:
    """Receiver half: deliver on PUBREL, dedupe everything else.

    ``held`` keeps payloads awaiting PUBREL. ``completed`` maps finished
    msg_ids to a digest of their payload so that a straggling duplicate of an
    old PUBLISH (same id, same bytes) is not mistaken for the sender reusing
    the id after 16-bit wraparound: re-opening a completed id for a stale
    copy would let a stale duplicate PUBREL deliver it a second time.
    """

    held: dict[int, tuple[int, bytes]] = field(default_factory=dict)
    completed: dict[int, int] = field(default_factory=dict)
    deliveries: int = 0

    def on_publish(self, pub: Publish) -> None:
        digest = zlib.crc32(pub.payload)
        if pub.msg_id in self.held:
            # retransmission (same bytes) or genuine wraparound reuse
            if self.held[pub.msg_id][1] != pub.payload:
                self.held[pub.msg_id] = (pub.topic_id, pub.payload)
            return
        if pub.msg_id in self.completed:
            if self.completed[pub.msg_id] == digest:
                return  # stale duplicate of a finished handshake
            del self.completed[pub.msg_id]
        self.held[pub.msg_id] = (pub.topic_id, pub.payload)

    def on_pubrel(self, msg_id: int) -> Optional[tuple[int, bytes]]:
        """Returns the payload to deliver, or None for duplicate PUBRELs."""
        entry = self.held.pop(msg_id, None)
        if entry is None:
            return None
        self.completed[msg_id] = zlib.crc32(entry[1])
        self.deliveries += 1
        return entry
