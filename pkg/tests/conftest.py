"""Shared transport test scaffolding."""

import random

from provlight import frames
from provlight.broker import Broker
from provlight.link import LinkConfig, LinkModel
from provlight.net import SimNet
from provlight.session import ClientSession
from provlight.wire import CaptureRecord, DataPayload, RecordKind

BROKER = "broker"


def random_record(rng: random.Random) -> CaptureRecord:
    """Small random record covering all kinds, value types, and unicode."""
    kind = rng.choice(list(RecordKind))
    alphabet = "abcXYZ-_/0123456789äβ£"

    def rid(lo=1, hi=12):
        return "".join(rng.choice(alphabet) for _ in range(rng.randint(lo, hi)))

    def attrs():
        out = []
        for _ in range(rng.randint(0, 4)):
            pick = rng.random()
            if pick < 0.25:
                value = rid(0, 6)
            elif pick < 0.5:
                value = rng.randint(-2**63, 2**63 - 1)
            elif pick < 0.75:
                value = rng.uniform(-1e9, 1e9)
            else:
                value = bool(rng.getrandbits(1))
            out.append((rid(1, 8), value))
        return tuple(out)

    if kind in (RecordKind.TASK_BEGIN, RecordKind.TASK_END):
        task_id = rid()
        deps = tuple(rid() for _ in range(rng.randint(0, 3))) \
            if kind is RecordKind.TASK_BEGIN else ()
        data = tuple(
            DataPayload(rid(), derivations=tuple(rid() for _ in range(rng.randint(0, 2))),
                        attributes=attrs())
            for _ in range(rng.randint(0, 3)))
    else:
        task_id, deps, data = "", (), ()
    return CaptureRecord(kind=kind, workflow_id=rid(), task_id=task_id,
                         dependencies=deps, data=data,
                         timestamp=rng.randint(0, 2**64 - 1))


class ScriptedLink(LinkModel):
    """Link whose per-datagram behavior comes from a decision function.

    ``decide(index, datagram)`` returns "ok", "drop", or "dup". Shaping from
    the wrapped config still applies.
    """

    def __init__(self, decide, config: LinkConfig = LinkConfig()):
        super().__init__(config)
        self.decide = decide
        self.index = 0

    def transmit(self, datagram, now_ms):
        action = self.decide(self.index, datagram)
        self.index += 1
        self.sent += 1
        if action == "drop":
            self.dropped += 1
            return []
        emits = [datagram, datagram] if action == "dup" else [datagram]
        if action == "dup":
            self.duplicated += 1
        return [self.shape(emit, now_ms) for emit in emits]


def drop_first_of_each_type(*msg_types):
    """Schedule: drop the first transmission of each listed frame type."""
    seen = set()

    def decide(index, datagram):
        try:
            frame = frames.parse(datagram)
        except frames.FrameError:
            return "ok"
        key = type(frame).__name__
        if frame.MSG_TYPE in msg_types and key not in seen:
            seen.add(key)
            return "drop"
        return "ok"

    return decide


class Collector:
    """Subscriber-side actor that keeps every delivered payload."""

    def __init__(self, session: ClientSession):
        self.session = session
        self.messages: list[tuple[str, bytes]] = []

    def handle_datagram(self, src, data, now):
        outs = self.session.handle_datagram(src, data, now)
        self.messages.extend(self.session.take_delivered())
        return outs

    def poll(self, now):
        return self.session.poll(now)

    def next_deadline(self):
        return self.session.next_deadline()


def make_rig():
    net = SimNet()
    broker = Broker()
    net.attach(BROKER, broker)
    return net, broker


def attach_client(net, client_id, addr=None, **session_kwargs) -> ClientSession:
    addr = addr or f"client/{client_id}"
    session = ClientSession(client_id, BROKER, net, **session_kwargs)
    net.attach(addr, session)
    session.bind(addr)
    return session


def attach_subscriber(net, client_id, topic_filter="prov/+", addr=None) -> Collector:
    addr = addr or f"sub/{client_id}"
    session = ClientSession(client_id, BROKER, net)
    collector = Collector(session)
    net.attach(addr, collector)
    session.bind(addr)
    session.connect()
    session.subscribe(topic_filter)
    return collector
