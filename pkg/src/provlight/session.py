"""Client session: connect, register, subscribe, publish, receive.

The session is a passive actor (``handle_datagram`` / ``poll``) plus driver
methods called from the owning worker thread. Driver methods hand their
outgoing datagrams to the network themselves; actor methods only return them.

Publish payloads larger than ``fragment_limit`` are split into fragments,
each its own exactly-once message. Every publish payload carries a one-byte
prefix: 0x00 for a whole envelope, 0x01 for a fragment followed by a u32
stream id, u16 index, and u16 total (9 bytes of fragment header).
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from typing import Optional

from provlight import frames
from provlight.frames import (
    Connack,
    Connect,
    Disconnect,
    FrameError,
    Pingresp,
    Publish,
    Pubcomp,
    Pubrec,
    Pubrel,
    Regack,
    Register,
    Suback,
    Subscribe,
)
from provlight.qos2 import Qos2Receiver, ReliableSender, RetryPolicy, SendToken

MAX_CLIENT_ID_BYTES = 23
UNFRAGMENTED = 0x00
FRAGMENT = 0x01
FRAGMENT_LIMIT_DEFAULT = 1200


class TransportError(Exception):
    pass


class NotConnected(TransportError):
    pass


class Timeout(TransportError):
    pass


class Rejected(TransportError):
    def __init__(self, code: int):
        super().__init__(f"rejected with code {code:#x}")
        self.code = code


class RetryExhausted(TransportError):
    pass


@dataclass
class _ControlOp:
    kind: str  # "connect" | "register" | "subscribe"
    msg_id: int
    sent_at: int
    topic_name: str = ""
    clean: bool = True
    retries: int = 0
    done: bool = False
    error: Optional[str] = None
    result_topic_id: int = 0


class ClientSession:
    """Single-owner session; one in-flight publish at a time."""

    def __init__(self, client_id: str, broker_addr, net,
                 retry: RetryPolicy = RetryPolicy(),
                 connect_retries: int = 4,
                 fragment_limit: int = FRAGMENT_LIMIT_DEFAULT,
                 keepalive_s: int = 60):
        if not client_id or len(client_id.encode()) > MAX_CLIENT_ID_BYTES:
            raise ValueError(f"client_id must be 1..{MAX_CLIENT_ID_BYTES} bytes")
        self.client_id = client_id
        self.broker_addr = broker_addr
        self.net = net
        self.addr = None  # set by bind()
        self.retry = retry
        self.connect_retries = connect_retries
        self.fragment_limit = fragment_limit
        self.keepalive_s = keepalive_s

        self.connected = False
        self.topic_map: dict[str, int] = {}
        self.topic_names: dict[int, str] = {}  # broker-announced, subscriber side
        self.sender = ReliableSender(retry)
        self.receiver = Qos2Receiver()
        self.control: Optional[_ControlOp] = None
        self.tokens: list[SendToken] = []
        self.delivered: deque[tuple[str, bytes]] = deque()
        self._reassembly: dict[tuple[int, int], dict[int, bytes]] = {}
        self._reassembly_total: dict[tuple[int, int], int] = {}
        self._next_stream_id = 1
        self.publish_bytes = 0
        self.frames_received = 0

    # -- wiring --------------------------------------------------------------

    def bind(self, addr) -> "ClientSession":
        self.addr = addr
        return self

    def _send(self, frame) -> None:
        self.net.emit(self.addr, [(self.broker_addr, frames.serialize(frame))])

    # -- driver API ------------------------------------------------------------

    def connect(self, clean: bool = True, timeout_ms: Optional[int] = None) -> None:
        """Blocking CONNECT/CONNACK exchange with retransmission."""
        if self.connected:
            return
        if clean:
            self.topic_map.clear()
            self.topic_names.clear()
            self.sender = ReliableSender(self.retry)
            self.receiver = Qos2Receiver()
            self.tokens = []
        op = _ControlOp(kind="connect", msg_id=0, sent_at=self.net.now_ms(), clean=clean)
        self.control = op
        self._send(Connect(client_id=self.client_id, clean=clean,
                           duration=self.keepalive_s))
        budget = timeout_ms
        if budget is None:
            budget = sum(self.retry.delay(i) for i in range(self.connect_retries)) + 50
        done = self.net.run_until(lambda: op.done, budget)
        self.control = None
        if not done or op.error:
            raise Timeout(op.error or "no CONNACK from broker")
        if op.result_topic_id != frames.RC_ACCEPTED:
            raise Rejected(op.result_topic_id)
        self.connected = True

    def register_topic(self, topic_name: str, timeout_ms: int = 30_000) -> int:
        """REGISTER/REGACK; idempotent per name."""
        if not self.connected:
            raise NotConnected("register before connect")
        cached = self.topic_map.get(topic_name)
        if cached is not None:
            return cached
        op = _ControlOp(kind="register", msg_id=self.sender.alloc_msg_id(),
                        sent_at=self.net.now_ms(), topic_name=topic_name)
        self.control = op
        self._send(Register(topic_id=0, msg_id=op.msg_id, topic_name=topic_name))
        done = self.net.run_until(lambda: op.done, timeout_ms)
        self.control = None
        if not done or op.error:
            raise Timeout(op.error or f"no REGACK for {topic_name!r}")
        self.topic_map[topic_name] = op.result_topic_id
        return op.result_topic_id

    def subscribe(self, topic_filter: str, timeout_ms: int = 30_000) -> int:
        if not self.connected:
            raise NotConnected("subscribe before connect")
        op = _ControlOp(kind="subscribe", msg_id=self.sender.alloc_msg_id(),
                        sent_at=self.net.now_ms(), topic_name=topic_filter)
        self.control = op
        self._send(Subscribe(msg_id=op.msg_id, topic_filter=topic_filter))
        done = self.net.run_until(lambda: op.done, timeout_ms)
        self.control = None
        if not done or op.error:
            raise Timeout(op.error or f"no SUBACK for {topic_filter!r}")
        if topic_filter in self.topic_map or op.result_topic_id:
            self.topic_map[topic_filter] = op.result_topic_id
        return op.result_topic_id

    def publish(self, topic_id: int, payload: bytes) -> SendToken:
        """Non-blocking: enqueue and return a completion token."""
        if not self.connected:
            raise NotConnected("publish before connect")
        chunks = self._fragment(payload)
        token = SendToken(expected=len(chunks))
        for chunk in chunks:
            self.sender.enqueue_publish(topic_id, chunk, token)
            self.publish_bytes += len(chunk)
        self.tokens.append(token)
        out = self.sender.pump(self.net.now_ms())
        for frame in out:
            self._send(frame)
        return token

    def _fragment(self, payload: bytes) -> list[bytes]:
        if len(payload) <= self.fragment_limit:
            return [bytes([UNFRAGMENTED]) + payload]
        chunks = [payload[i:i + self.fragment_limit]
                  for i in range(0, len(payload), self.fragment_limit)]
        if len(chunks) > 0xFFFF:
            raise TransportError(f"payload needs {len(chunks)} fragments")
        stream_id = self._next_stream_id
        self._next_stream_id = (self._next_stream_id + 1) & 0xFFFFFFFF or 1
        return [struct.pack(">BIHH", FRAGMENT, stream_id, idx, len(chunks)) + chunk
                for idx, chunk in enumerate(chunks)]

    def poll_acks(self) -> tuple[int, int]:
        """(completed, failed) token counts so far."""
        done = sum(1 for t in self.tokens if t.done and not t.failed)
        failed = sum(1 for t in self.tokens if t.failed)
        return done, failed

    @property
    def drained(self) -> bool:
        return self.sender.idle and all(t.done for t in self.tokens)

    @property
    def failed_publishes(self) -> int:
        return sum(1 for t in self.tokens if t.failed)

    def wait_drained(self, timeout_ms: int) -> bool:
        return self.net.run_until(lambda: self.drained, timeout_ms)

    def disconnect(self) -> None:
        if self.connected:
            self._send(Disconnect())
            self.connected = False

    def take_delivered(self) -> list[tuple[str, bytes]]:
        out = list(self.delivered)
        self.delivered.clear()
        return out

    @property
    def retransmissions(self) -> int:
        return self.sender.retransmissions

    # -- actor half -------------------------------------------------------------

    def handle_datagram(self, src, data: bytes, now: int):
        try:
            frame = frames.parse(data)
        except FrameError:
            return []
        self.frames_received += 1
        outs = []

        if isinstance(frame, Connack):
            op = self.control
            if op is not None and op.kind == "connect" and not op.done:
                op.result_topic_id = frame.return_code
                op.done = True
        elif isinstance(frame, Regack):
            op = self.control
            if op is not None and op.kind == "register" and op.msg_id == frame.msg_id:
                if frame.return_code != frames.RC_ACCEPTED:
                    op.error = f"register rejected ({frame.return_code:#x})"
                op.result_topic_id = frame.topic_id
                op.done = True
        elif isinstance(frame, Suback):
            op = self.control
            if op is not None and op.kind == "subscribe" and op.msg_id == frame.msg_id:
                if frame.return_code != frames.RC_ACCEPTED:
                    op.error = f"subscribe rejected ({frame.return_code:#x})"
                op.result_topic_id = frame.topic_id
                op.done = True
        elif isinstance(frame, Pubrec):
            outs.extend(self.sender.on_pubrec(frame.msg_id, now))
        elif isinstance(frame, Pubcomp):
            outs.extend(self.sender.on_pubcomp(frame.msg_id, now))
        elif isinstance(frame, Publish):
            self.receiver.on_publish(frame)
            outs.append(Pubrec(msg_id=frame.msg_id))
        elif isinstance(frame, Pubrel):
            delivered = self.receiver.on_pubrel(frame.msg_id)
            outs.append(Pubcomp(msg_id=frame.msg_id))
            if delivered is not None:
                self._accept(*delivered)
        elif isinstance(frame, Register):
            # broker announces a topic id ahead of forwarded publishes
            self.topic_names[frame.topic_id] = frame.topic_name
            outs.append(Regack(topic_id=frame.topic_id, msg_id=frame.msg_id))
        elif isinstance(frame, Pingresp):
            pass
        return [(self.broker_addr, frames.serialize(f)) for f in outs]

    def _accept(self, topic_id: int, wire_payload: bytes) -> None:
        topic = self.topic_names.get(topic_id, f"topic#{topic_id}")
        if not wire_payload:
            return
        marker = wire_payload[0]
        if marker == UNFRAGMENTED:
            self.delivered.append((topic, wire_payload[1:]))
            return
        if marker != FRAGMENT or len(wire_payload) < 9:
            return
        stream_id, idx, total = struct.unpack(">IHH", wire_payload[1:9])
        key = (topic_id, stream_id)
        parts = self._reassembly.setdefault(key, {})
        self._reassembly_total[key] = total
        parts[idx] = wire_payload[9:]
        if len(parts) == total:
            payload = b"".join(parts[i] for i in range(total))
            del self._reassembly[key]
            del self._reassembly_total[key]
            self.delivered.append((topic, payload))

    def poll(self, now: int):
        outs = []
        op = self.control
        if op is not None and not op.done:
            deadline = op.sent_at + self.retry.delay(op.retries)
            if now >= deadline:
                limit = self.connect_retries if op.kind == "connect" else self.retry.max_retries
                if op.retries >= limit:
                    op.error = f"{op.kind} retries exhausted"
                    op.done = True
                else:
                    op.retries += 1
                    op.sent_at = now
                    self.sender.retransmissions += 1
                    outs.append(self._control_frame(op))
        outs.extend(self.sender.poll(now))
        return [(self.broker_addr, frames.serialize(f)) for f in outs]

    def _control_frame(self, op: _ControlOp):
        if op.kind == "connect":
            return Connect(client_id=self.client_id, clean=op.clean,
                           duration=self.keepalive_s)
        if op.kind == "register":
            return Register(topic_id=0, msg_id=op.msg_id, topic_name=op.topic_name)
        return Subscribe(msg_id=op.msg_id, topic_filter=op.topic_name)

    def next_deadline(self) -> Optional[int]:
        deadlines = []
        op = self.control
        if op is not None and not op.done:
            deadlines.append(op.sent_at + self.retry.delay(op.retries))
        sender_deadline = self.sender.next_deadline()
        if sender_deadline is not None:
            deadlines.append(sender_deadline)
        return min(deadlines) if deadlines else None
