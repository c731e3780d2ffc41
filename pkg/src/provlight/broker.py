"""Pub/sub broker: sessions, topic registry, exactly-once relay.

The broker is a deterministic state machine: ``handle_datagram`` and ``poll``
are pure functions of (state, input, now). Completed inbound handshakes are
re-published toward every matching subscriber through a per-subscriber
stop-and-wait sender, which preserves per-topic order end to end. A topic
REGISTER is sequenced ahead of the first forwarded publish for a topic the
subscriber has not seen yet.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from provlight import frames
from provlight.frames import (
    Connack,
    Connect,
    Disconnect,
    FrameError,
    Pingreq,
    Pingresp,
    Publish,
    Pubcomp,
    Pubrec,
    Pubrel,
    Regack,
    Register,
    Suback,
    Subscribe,
    topic_matches,
)
from provlight.qos2 import Qos2Receiver, ReliableSender, RetryPolicy

MAX_CLIENT_ID_BYTES = 23


@dataclass
class BrokerSession:
    client_id: str
    addr: object
    connected: bool = True
    keepalive_s: int = 60
    rx: Qos2Receiver = field(default_factory=Qos2Receiver)
    sender: ReliableSender = None  # type: ignore[assignment]
    subscriptions: list[str] = field(default_factory=list)
    known_topics: set[int] = field(default_factory=set)
    announced_topics: set[int] = field(default_factory=set)
    delivered_payloads: int = 0


class Broker:
    def __init__(self, retry: RetryPolicy = RetryPolicy(), max_sessions: int = 1024):
        self.retry = retry
        self.max_sessions = max_sessions
        self.sessions: dict[str, BrokerSession] = {}
        self.by_addr: dict[object, BrokerSession] = {}
        self.topic_ids: dict[str, int] = {}
        self.topic_names: dict[int, str] = {}
        self.next_topic_id = 1
        self.malformed = 0
        self.forwarded = 0
        self.publishes_accepted = 0

    # -- topic registry -------------------------------------------------------

    def topic_id_for(self, name: str) -> int:
        topic_id = self.topic_ids.get(name)
        if topic_id is None:
            topic_id = self.next_topic_id
            self.next_topic_id += 1
            self.topic_ids[name] = topic_id
            self.topic_names[topic_id] = name
        return topic_id

    # -- frame handling ---------------------------------------------------------

    def handle_datagram(self, src, data: bytes, now: int):
        try:
            frame = frames.parse(data)
        except FrameError:
            self.malformed += 1
            return []
        out: list[tuple[object, bytes]] = []

        if isinstance(frame, Connect):
            out.extend(self._on_connect(src, frame))
        elif isinstance(frame, Disconnect):
            session = self.by_addr.get(src)
            if session is not None:
                session.connected = False
        elif isinstance(frame, Pingreq):
            out.append((src, frames.serialize(Pingresp())))
        else:
            session = self.by_addr.get(src)
            if session is None:
                self.malformed += 1
                return []
            if isinstance(frame, Register):
                topic_id = self.topic_id_for(frame.topic_name)
                out.append((src, frames.serialize(
                    Regack(topic_id=topic_id, msg_id=frame.msg_id))))
            elif isinstance(frame, Subscribe):
                if frame.topic_filter not in session.subscriptions:
                    session.subscriptions.append(frame.topic_filter)
                topic_id = 0
                if "+" not in frame.topic_filter:
                    topic_id = self.topic_id_for(frame.topic_filter)
                out.append((src, frames.serialize(
                    Suback(topic_id=topic_id, msg_id=frame.msg_id))))
            elif isinstance(frame, Publish):
                session.rx.on_publish(frame)
                out.append((src, frames.serialize(Pubrec(msg_id=frame.msg_id))))
            elif isinstance(frame, Pubrel):
                delivered = session.rx.on_pubrel(frame.msg_id)
                out.append((src, frames.serialize(Pubcomp(msg_id=frame.msg_id))))
                if delivered is not None:
                    self.publishes_accepted += 1
                    out.extend(self._forward(delivered[0], delivered[1], now))
            elif isinstance(frame, Pubrec):
                self._pump_out(session, session.sender.on_pubrec(frame.msg_id, now), out)
            elif isinstance(frame, Pubcomp):
                self._pump_out(session, session.sender.on_pubcomp(frame.msg_id, now), out)
            elif isinstance(frame, Regack):
                if frame.topic_id in session.announced_topics:
                    session.known_topics.add(frame.topic_id)
                self._pump_out(session, session.sender.on_regack(frame.msg_id, now), out)
            # CONNACK / SUBACK / PINGRESP are never addressed to a broker
        return out

    def _on_connect(self, src, frame: Connect):
        if len(frame.client_id.encode()) > MAX_CLIENT_ID_BYTES:
            return [(src, frames.serialize(Connack(return_code=frames.RC_REJECTED)))]
        session = self.sessions.get(frame.client_id)
        if session is None:
            if len(self.sessions) >= self.max_sessions:
                return [(src, frames.serialize(Connack(return_code=frames.RC_REJECTED)))]
            session = BrokerSession(client_id=frame.client_id, addr=src,
                                    sender=ReliableSender(self.retry))
            self.sessions[frame.client_id] = session
        elif frame.clean:
            session.rx = Qos2Receiver()
            session.sender = ReliableSender(self.retry)
            session.subscriptions.clear()
            session.known_topics.clear()
            session.announced_topics.clear()
        if session.addr in self.by_addr:
            del self.by_addr[session.addr]
        session.addr = src
        session.connected = True
        session.keepalive_s = frame.duration
        self.by_addr[src] = session
        return [(src, frames.serialize(Connack()))]

    def _forward(self, topic_id: int, payload: bytes, now: int):
        """Queue the payload toward every matching subscriber."""
        out: list[tuple[object, bytes]] = []
        name = self.topic_names.get(topic_id)
        if name is None:
            return out
        for session in self.sessions.values():
            if not session.connected:
                continue
            if not any(topic_matches(f, name) for f in session.subscriptions):
                continue
            if topic_id not in session.known_topics and topic_id not in session.announced_topics:
                session.announced_topics.add(topic_id)
                session.sender.enqueue_register(topic_id, name)
            session.sender.enqueue_publish(topic_id, payload)
            self.forwarded += 1
            self._pump_out(session, session.sender.pump(now), out)
        return out

    @staticmethod
    def _pump_out(session: BrokerSession, out_frames, out) -> None:
        for frame in out_frames:
            out.append((session.addr, frames.serialize(frame)))

    # -- timers --------------------------------------------------------------

    def poll(self, now: int):
        out: list[tuple[object, bytes]] = []
        for session in self.sessions.values():
            self._pump_out(session, session.sender.poll(now), out)
        return out

    def next_deadline(self) -> Optional[int]:
        deadlines = [s.sender.next_deadline() for s in self.sessions.values()]
        deadlines = [d for d in deadlines if d is not None]
        return min(deadlines) if deadlines else None

    # -- inspection ------------------------------------------------------------

    def topic_count(self) -> int:
        return len(self.topic_ids)

    def session_count(self) -> int:
        return len(self.sessions)

    def counters(self) -> dict:
        return {
            "sessions": len(self.sessions),
            "topics": len(self.topic_ids),
            "publishes_accepted": self.publishes_accepted,
            "forwarded": self.forwarded,
            "malformed": self.malformed,
        }
