"""Datagram networks: an in-process simulator on virtual time and a UDP shell.

Both expose the same surface so protocol code never knows which one it runs
on: ``attach`` registers an actor at an address, ``emit`` sends datagrams
through per-route link models, ``sleep``/``run_until`` block the calling
worker, and ``spawn`` starts a workload thread.

Actors are passive state machines::

    handle_datagram(src, data, now_ms) -> list[(dst, bytes)]
    poll(now_ms) -> list[(dst, bytes)]
    next_deadline() -> int | None

The simulator serializes everything: at most one worker thread runs between
events, events are processed in (time, sequence) order, and link models are
seeded, which makes whole runs replayable. The UDP shell gives each actor a
socket and a service thread, and applies the same link models on the send
path, so a bandwidth-shaped route behaves the same on either network.
"""

from __future__ import annotations

import heapq
import itertools
import select
import socket
import threading
import time
from typing import Any, Callable, Optional

from provlight.link import LinkConfig, LinkModel

Addr = Any  # str in the simulator, (host, port) over UDP
Outs = list[tuple[Addr, bytes]]


class SimulationStalled(RuntimeError):
    """run_until with no deadline and nothing left to happen."""


class WorkerHandle:
    def __init__(self, name: str):
        self.name = name
        self.done = False
        self.error: Optional[BaseException] = None
        self.thread: Optional[threading.Thread] = None

    def reraise(self) -> None:
        if self.error is not None:
            raise self.error


class _Waiter:
    __slots__ = ("cond", "ready")

    def __init__(self, lock: threading.Lock):
        self.cond = threading.Condition(lock)
        self.ready = False


class _Parked:
    """One thread blocked in run_until: predicate, optional deadline, outcome."""

    __slots__ = ("pred", "deadline", "outcome")

    def __init__(self, pred, deadline):
        self.pred = pred
        self.deadline = deadline
        self.outcome: Optional[bool] = None


_EV_DATAGRAM = 0
_EV_WAKE = 1
_EV_POLL = 2


class SimNet:
    """Single-process network on a virtual millisecond clock."""

    def __init__(self, start_ms: int = 0):
        self._lock = threading.Lock()
        self._sched = threading.Condition(self._lock)
        self._now = float(start_ms)
        self._seq = itertools.count()
        self._heap: list[tuple[float, int, int, tuple]] = []
        self._actors: dict[Addr, Any] = {}
        self._routes: dict[tuple[Addr, Addr], LinkModel] = {}
        self._link_policy: Optional[Callable[[Addr, Addr], Any]] = None
        self._poll_at: dict[Addr, float] = {}
        self._running = 1  # main thread counts as running
        self._driving = False
        self._parked: list[_Parked] = []
        self._handles: list[WorkerHandle] = []
        self.datagrams_delivered = 0

    # -- wiring -------------------------------------------------------------

    def attach(self, addr: Addr, actor: Any) -> Addr:
        with self._lock:
            self._actors[addr] = actor
        return addr

    def detach(self, addr: Addr) -> None:
        with self._lock:
            self._actors.pop(addr, None)
            self._poll_at.pop(addr, None)

    def set_route(self, src: Addr, dst: Addr, link: LinkConfig | LinkModel) -> LinkModel:
        model = link if isinstance(link, LinkModel) else LinkModel(link)
        with self._lock:
            self._routes[(src, dst)] = model
        return model

    def set_link_policy(self, policy: Callable[[Addr, Addr], Any]) -> None:
        """Lazy route factory consulted the first time a pair communicates."""
        with self._lock:
            self._link_policy = policy

    def _route_for(self, src: Addr, dst: Addr) -> Optional[LinkModel]:
        model = self._routes.get((src, dst))
        if model is None and self._link_policy is not None:
            link = self._link_policy(src, dst)
            if link is not None:
                model = link if isinstance(link, LinkModel) else LinkModel(link)
                self._routes[(src, dst)] = model
        return model

    def now_ms(self) -> int:
        return int(self._now)

    @property
    def epoch_offset_ms(self) -> int:
        return 0

    # -- sending ------------------------------------------------------------

    def emit(self, src: Addr, outs: Outs) -> None:
        if not outs:
            return
        with self._lock:
            self._emit_locked(src, outs)
            self._schedule_poll(src)

    def _emit_locked(self, src: Addr, outs: Outs) -> None:
        for dst, data in outs:
            link = self._route_for(src, dst)
            if link is None:
                deliveries = [(self._now, data)]
            else:
                deliveries = link.transmit(data, self._now)
            for at, datagram in deliveries:
                heapq.heappush(self._heap, (at, next(self._seq), _EV_DATAGRAM,
                                            (src, dst, datagram)))

    def _schedule_poll(self, addr: Addr) -> None:
        actor = self._actors.get(addr)
        if actor is None:
            return
        deadline = actor.next_deadline()
        if deadline is None:
            self._poll_at.pop(addr, None)
            return
        current = self._poll_at.get(addr)
        if current is None or deadline < current:
            self._poll_at[addr] = float(deadline)
            heapq.heappush(self._heap, (float(deadline), next(self._seq),
                                        _EV_POLL, (addr,)))

    # -- event loop ----------------------------------------------------------

    def _process_one(self) -> None:
        at, _, kind, payload = heapq.heappop(self._heap)
        if at > self._now:
            self._now = at
        if kind == _EV_WAKE:
            waiter: _Waiter = payload[0]
            self._running += 1
            waiter.ready = True
            waiter.cond.notify()
            return
        if kind == _EV_DATAGRAM:
            src, dst, data = payload
            actor = self._actors.get(dst)
            if actor is None:
                return
            self.datagrams_delivered += 1
            outs = actor.handle_datagram(src, data, int(self._now))
            if outs:
                self._emit_locked(dst, outs)
            self._schedule_poll(dst)
            return
        # poll event
        addr = payload[0]
        actor = self._actors.get(addr)
        if actor is None:
            return
        scheduled = self._poll_at.get(addr)
        if scheduled is None or scheduled != at:
            return  # superseded
        self._poll_at.pop(addr, None)
        outs = actor.poll(int(self._now))
        if outs:
            self._emit_locked(addr, outs)
        self._schedule_poll(addr)

    def _drive_once(self) -> None:
        """One deterministic scheduler step, called with the lock held.

        Order matters: satisfied predicates resume their threads before any
        further event is processed, so a waiter observes the virtual instant
        its condition became true. Ties between an event and a deadline go to
        the event.
        """
        for entry in self._parked:
            if entry.pred():
                entry.outcome = True
                self._parked.remove(entry)
                self._running += 1
                return
        next_deadline = None
        for entry in self._parked:
            if entry.deadline is not None:
                if next_deadline is None or entry.deadline < next_deadline:
                    next_deadline = entry.deadline
        if self._heap and (next_deadline is None or self._heap[0][0] <= next_deadline):
            self._process_one()
            return
        if next_deadline is not None:
            if next_deadline > self._now:
                self._now = next_deadline
            for entry in self._parked:
                if entry.deadline == next_deadline:
                    entry.outcome = False
                    self._parked.remove(entry)
                    self._running += 1
                    return
        raise SimulationStalled(
            "no events or deadlines pending and no predicate satisfied")

    def run_until(self, pred: Callable[[], bool], timeout_ms: Optional[float] = None) -> bool:
        """Drive the simulation until ``pred`` holds or virtual time runs out.

        Predicates are evaluated under the scheduler lock, possibly from other
        threads, so they must be side-effect-free reads of shared state.
        """
        with self._lock:
            if pred():
                return True
            deadline = None if timeout_ms is None else self._now + timeout_ms
            if deadline is not None and self._now >= deadline:
                return False
            entry = _Parked(pred, deadline)
            self._parked.append(entry)
            self._running -= 1
            self._sched.notify_all()
            while entry.outcome is None:
                if self._running == 0 and not self._driving:
                    self._driving = True
                    try:
                        self._drive_once()
                    finally:
                        self._driving = False
                        self._sched.notify_all()
                else:
                    self._sched.wait()
            # whoever set the outcome already re-counted us as running
            return entry.outcome

    def sleep(self, duration_ms: float) -> None:
        with self._lock:
            waiter = _Waiter(self._lock)
            heapq.heappush(self._heap, (self._now + duration_ms, next(self._seq),
                                        _EV_WAKE, (waiter,)))
            self._running -= 1
            self._sched.notify_all()
            while not waiter.ready:
                waiter.cond.wait()
            # the wake event already re-counted us as running

    # -- workers -------------------------------------------------------------

    def spawn(self, fn: Callable[[], None], name: str = "worker") -> WorkerHandle:
        handle = WorkerHandle(name)
        waiter = _Waiter(self._lock)

        def runner():
            with self._lock:
                while not waiter.ready:
                    waiter.cond.wait()
            try:
                fn()
            except BaseException as exc:  # surfaces on join
                handle.error = exc
            finally:
                with self._lock:
                    handle.done = True
                    self._running -= 1
                    self._sched.notify_all()

        thread = threading.Thread(target=runner, name=name, daemon=True)
        handle.thread = thread
        with self._lock:
            # starts running when a driver reaches the start event
            heapq.heappush(self._heap, (self._now, next(self._seq), _EV_WAKE, (waiter,)))
            self._handles.append(handle)
        thread.start()
        return handle

    def join(self, handles: list[WorkerHandle], timeout_ms: Optional[float] = None) -> None:
        ok = self.run_until(lambda: all(h.done for h in handles), timeout_ms)
        if not ok:
            raise TimeoutError("workers did not finish in time")
        for h in handles:
            h.reraise()

    def close(self) -> None:
        pass


class RealNet:
    """UDP sockets with per-actor service threads and shaped send paths."""

    _POLL_SLICE_S = 0.02

    def __init__(self):
        self._activity = threading.Condition()
        self._routes: dict[tuple[Addr, Addr], LinkModel] = {}
        self._routes_lock = threading.Lock()
        self._link_policy: Optional[Callable[[Addr, Addr], Any]] = None
        self._services: list[_UdpService] = []
        self._shaper = _ShaperThread()
        self._stopped = False
        self._epoch_offset = int(time.time() * 1000) - self.now_ms()

    def now_ms(self) -> int:
        return int(time.monotonic() * 1000)

    @property
    def epoch_offset_ms(self) -> int:
        return self._epoch_offset

    def attach(self, addr: Addr, actor: Any) -> Addr:
        service = _UdpService(self, addr, actor)
        self._services.append(service)
        service.start()
        return service.addr

    def detach(self, addr: Addr) -> None:
        for service in list(self._services):
            if service.addr == addr:
                service.stop()
                self._services.remove(service)

    def set_route(self, src: Addr, dst: Addr, link: LinkConfig | LinkModel) -> LinkModel:
        model = link if isinstance(link, LinkModel) else LinkModel(link)
        with self._routes_lock:
            self._routes[(src, dst)] = model
        return model

    def set_link_policy(self, policy: Callable[[Addr, Addr], Any]) -> None:
        with self._routes_lock:
            self._link_policy = policy

    def _route_for(self, src: Addr, dst: Addr) -> Optional[LinkModel]:
        with self._routes_lock:
            model = self._routes.get((src, dst))
            if model is None and self._link_policy is not None:
                link = self._link_policy(src, dst)
                if link is not None:
                    model = link if isinstance(link, LinkModel) else LinkModel(link)
                    self._routes[(src, dst)] = model
            return model

    def emit(self, src: Addr, outs: Outs) -> None:
        service = next((s for s in self._services if s.addr == src), None)
        if service is None:
            raise ValueError(f"no endpoint at {src}")
        for dst, data in outs:
            link = self._route_for(src, dst)
            if link is None:
                service.sock.sendto(data, dst)
            else:
                self._shaper.submit(link, service.sock, dst, data)
        service.kick()

    def sleep(self, duration_ms: float) -> None:
        time.sleep(duration_ms / 1000.0)

    def run_until(self, pred: Callable[[], bool], timeout_ms: Optional[float] = None) -> bool:
        deadline = None if timeout_ms is None else self.now_ms() + timeout_ms
        with self._activity:
            while True:
                if pred():
                    return True
                if deadline is not None and self.now_ms() >= deadline:
                    return False
                self._activity.wait(0.005)

    def notify_activity(self) -> None:
        with self._activity:
            self._activity.notify_all()

    def spawn(self, fn: Callable[[], None], name: str = "worker") -> WorkerHandle:
        handle = WorkerHandle(name)

        def runner():
            try:
                fn()
            except BaseException as exc:
                handle.error = exc
            finally:
                handle.done = True

        thread = threading.Thread(target=runner, name=name, daemon=True)
        handle.thread = thread
        thread.start()
        return handle

    def join(self, handles: list[WorkerHandle], timeout_ms: Optional[float] = None) -> None:
        deadline = None if timeout_ms is None else time.monotonic() + timeout_ms / 1000.0
        for h in handles:
            assert h.thread is not None
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            h.thread.join(remaining)
            if h.thread.is_alive():
                raise TimeoutError(f"worker {h.name} did not finish")
            h.reraise()

    def close(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        for service in self._services:
            service.stop()
        self._shaper.stop()


class _UdpService:
    """One socket plus the receive/poll loop for one actor."""

    def __init__(self, net: RealNet, addr: Addr, actor: Any):
        self.net = net
        self.actor = actor
        self.lock = threading.Lock()
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(addr)
        self.sock.setblocking(False)
        self.addr = self.sock.getsockname()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True,
                                        name=f"udp-{self.addr[1]}")

    def start(self) -> None:
        self._thread.start()

    def kick(self) -> None:
        # emits may arm a retransmission timer; the loop re-reads deadlines
        pass

    def stop(self) -> None:
        if self._stop.is_set():
            return
        self._stop.set()
        self._thread.join(timeout=2.0)
        try:
            self.sock.close()
        except OSError:
            pass

    def _loop(self) -> None:
        while not self._stop.is_set():
            timeout = RealNet._POLL_SLICE_S
            with self.lock:
                deadline = self.actor.next_deadline()
            if deadline is not None:
                timeout = min(timeout, max(0.0, (deadline - self.net.now_ms()) / 1000.0))
            try:
                readable, _, _ = select.select([self.sock], [], [], timeout)
            except OSError:
                break
            activity = False
            if readable:
                while True:
                    try:
                        data, src = self.sock.recvfrom(65535)
                    except (BlockingIOError, InterruptedError):
                        break
                    except OSError:
                        return
                    with self.lock:
                        outs = self.actor.handle_datagram(src, data, self.net.now_ms())
                    if outs:
                        self.net.emit(self.addr, outs)
                    activity = True
            with self.lock:
                outs = self.actor.poll(self.net.now_ms())
            if outs:
                self.net.emit(self.addr, outs)
                activity = True
            if activity:
                self.net.notify_activity()


class _ShaperThread:
    """Delays shaped sends until their computed delivery instants."""

    def __init__(self):
        self._cond = threading.Condition()
        self._heap: list[tuple[float, int, socket.socket, Addr, bytes]] = []
        self._seq = itertools.count()
        self._stop = False
        self._thread = threading.Thread(target=self._loop, daemon=True, name="link-shaper")
        self._started = False

    def submit(self, link: LinkModel, sock: socket.socket, dst: Addr, data: bytes) -> None:
        with self._cond:
            if not self._started:
                self._thread.start()
                self._started = True
            now = time.monotonic() * 1000
            for at, datagram in link.transmit(data, now):
                heapq.heappush(self._heap, (at, next(self._seq), sock, dst, datagram))
            self._cond.notify()

    def stop(self) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify()
        if self._started:
            self._thread.join(timeout=2.0)

    def _loop(self) -> None:
        while True:
            with self._cond:
                if self._stop:
                    return
                now = time.monotonic() * 1000
                while self._heap and self._heap[0][0] <= now:
                    _, _, sock, dst, data = heapq.heappop(self._heap)
                    try:
                        sock.sendto(data, dst)
                    except OSError:
                        pass
                wait_s = None
                if self._heap:
                    wait_s = max(0.0, (self._heap[0][0] - now) / 1000.0)
                self._cond.wait(wait_s)
