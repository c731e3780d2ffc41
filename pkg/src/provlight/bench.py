"""Overhead harness: paired runs, sweeps, CSV reports, baseline transport.

Each cell runs the synthetic workload twice, uninstrumented then instrumented,
and reports the relative wall-clock difference. Virtual mode runs everything
in one process on the simulated network (deterministic, fast); real mode uses
UDP sockets, actual sleeps, and sender-side link shaping on localhost.
"""

from __future__ import annotations

import csv
import logging
import math
import socket
import statistics
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Optional

from provlight.broker import Broker
from provlight.capture import (
    CaptureConfig,
    Data,
    task_begin,
    task_end,
    workflow_begin,
    workflow_end,
)
from provlight.link import LinkConfig, LinkModel
from provlight.model import GraphBuilder, graphs_equal, validate_graph
from provlight.net import RealNet, SimNet
from provlight.translator import FileStore, TranslatorService
from provlight.wire import CaptureRecord, RecordKind, encode_record
from provlight.workload import BANDWIDTH_PRESETS, WorkloadConfig, WorkloadScript, gen_workload

log = logging.getLogger(__name__)

CSV_COLUMNS = ["mode", "A", "d", "G", "bandwidth", "N", "repeat", "t_base_ms",
               "t_capture_ms", "overhead_pct", "envelopes", "records",
               "bytes_on_wire", "retransmissions", "ci95_pct"]

# two-sided 95% Student-t critical values by degrees of freedom
_T95 = {1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571, 6: 2.447, 7: 2.365,
        8: 2.306, 9: 2.262, 10: 2.228, 11: 2.201, 12: 2.179, 13: 2.160,
        14: 2.145, 15: 2.131, 20: 2.086, 25: 2.060, 30: 2.042}


def t95(df: int) -> float:
    if df <= 0:
        return 0.0
    if df in _T95:
        return _T95[df]
    candidates = [k for k in _T95 if k <= df]
    return _T95[max(candidates)] if candidates else 1.96


def mean_ci95(samples: list[float]) -> tuple[float, float]:
    if not samples:
        return 0.0, 0.0
    if len(samples) == 1:
        return samples[0], 0.0
    mean = statistics.fmean(samples)
    sd = statistics.stdev(samples)
    half = t95(len(samples) - 1) * sd / math.sqrt(len(samples))
    return mean, half


@dataclass
class LinkSpec:
    loss_prob: float = 0.0
    dup_prob: float = 0.0
    reorder_prob: float = 0.0

    def config(self, bandwidth: str, seed: int) -> LinkConfig:
        bps, delay = BANDWIDTH_PRESETS[bandwidth]
        return LinkConfig(loss_prob=self.loss_prob, dup_prob=self.dup_prob,
                          reorder_prob=self.reorder_prob, bandwidth_bps=bps,
                          base_delay_ms=delay, seed=seed)


@dataclass
class RunReport:
    mode: str
    A: int
    d: float
    G: int
    bandwidth: str
    N: int
    repeat: int
    t_base_ms: float
    t_capture_ms: float
    overhead_pct: float
    envelopes: int
    records: int
    bytes_on_wire: int
    retransmissions: int
    ci95_pct: float
    capture_call_ms: float = 0.0
    flush_wait_ms: float = 0.0
    fidelity_ok: bool = True
    violations: int = 0
    per_client: list[dict] = field(default_factory=list)
    error: Optional[str] = None

    def csv_row(self) -> dict:
        return {key: getattr(self, key) for key in CSV_COLUMNS}


def _make_net(mode: str):
    return SimNet() if mode == "virtual" else RealNet()


def retry_for_bandwidth(bandwidth: str, max_retries: int = 40):
    """Retransmission timeouts scaled to the link: at 25 kbit/s a full
    fragment needs ~0.5 s on the wire, so the default 250 ms timer would
    flood the link with spurious duplicates."""
    from provlight.qos2 import RetryPolicy
    if bandwidth == "25kbit":
        return RetryPolicy(initial_ms=2_500, cap_ms=10_000, max_retries=max_retries)
    return RetryPolicy(max_retries=max_retries)


class BenchRig:
    """Broker + translator + shaped client routes on one network."""

    def __init__(self, cfg: WorkloadConfig, mode: str,
                 link: LinkSpec = LinkSpec(),
                 store: Optional[FileStore] = None,
                 max_retries: int = 40):
        self.cfg = cfg
        self.mode = mode
        self.link = link
        self.net = _make_net(mode)
        self.retry = retry_for_bandwidth(cfg.bandwidth, max_retries)
        self.broker = Broker(retry=self.retry)
        broker_bind = ("127.0.0.1", 0) if mode == "real" else "broker"
        self.broker_addr = self.net.attach(broker_bind, self.broker)
        self.translator = TranslatorService(self.net, self.broker_addr, store=store)
        self.translator.start()
        self._install_link_policy()

    def _install_link_policy(self):
        broker_addr, translator_addr = self.broker_addr, self.translator.addr
        link, bandwidth, base_seed = self.link, self.cfg.bandwidth, self.cfg.seed

        def policy(src, dst):
            if broker_addr not in (src, dst):
                return None
            other = dst if src == broker_addr else src
            if other == translator_addr:
                return None  # broker<->translator stays clean and fast
            seed = base_seed ^ zlib.crc32(repr((src, dst)).encode())
            return link.config(bandwidth, seed)

        self.net.set_link_policy(policy)

    def close(self):
        self.translator.stop(persist_incomplete=False)
        self.net.close()


def _client_ids(n: int) -> list[str]:
    return [f"dev-{i}" for i in range(n)]


def _baseline_worker(net, script: WorkloadScript):
    def run():
        for task in script.tasks:
            net.sleep(task.duration_s * 1000)
    return run


def run_baseline(cfg: WorkloadConfig, mode: str) -> float:
    """Uninstrumented run: N workers sleeping through the script."""
    net = _make_net(mode)
    script = gen_workload(cfg)
    start = net.now_ms()
    handles = [net.spawn(_baseline_worker(net, script), name=f"base-{i}")
               for i in range(cfg.clients)]
    net.join(handles, timeout_ms=None if mode == "virtual" else
             (cfg.tasks * cfg.task_duration_s * 1000 * 3 + 60_000))
    elapsed = net.now_ms() - start
    net.close()
    return float(elapsed)


def _capture_worker(rig: BenchRig, cfg: WorkloadConfig, script: WorkloadScript,
                    client_id: str, results: dict):
    def run():
        ccfg = CaptureConfig(broker_addr=rig.broker_addr, client_id=client_id,
                             group_size=cfg.group_size, compress=cfg.compress,
                             record_log=True, retry=rig.retry)
        wf = workflow_begin(ccfg, f"wf-{client_id}", rig.net)
        for spec in script.tasks:
            task = task_begin(wf, spec.task_id, dependencies=spec.dependencies,
                              inputs=[_data_from(spec.input_data)])
            rig.net.sleep(spec.duration_s * 1000)
            task_end(task, [_data_from(spec.output_data)])
        stats = workflow_end(wf)
        results[client_id] = (stats, wf.record_log)
    return run


def _data_from(payload) -> Data:
    return Data(payload.id, attributes=payload.attributes,
                derivations=payload.derivations)


def run_captured(cfg: WorkloadConfig, mode: str, link: LinkSpec = LinkSpec(),
                 store: Optional[FileStore] = None,
                 check_fidelity: bool = True) -> dict:
    """Instrumented run; returns timing, counters, and fidelity flags."""
    rig = BenchRig(cfg, mode, link=link, store=store)
    script = gen_workload(cfg)
    results: dict = {}
    start = rig.net.now_ms()
    handles = [rig.net.spawn(_capture_worker(rig, cfg, script, client_id, results),
                             name=client_id)
               for client_id in _client_ids(cfg.clients)]
    budget = None if mode == "virtual" else \
        (cfg.tasks * cfg.task_duration_s * 1000 * 10 + 300_000)
    rig.net.join(handles, timeout_ms=budget)
    t_capture = float(rig.net.now_ms() - start)

    # drain the broker->translator leg before reading translator state
    wf_ids = [f"wf-{c}" for c in _client_ids(cfg.clients)]
    ok = rig.net.run_until(
        lambda: all(rig.translator.workflow_complete(w) for w in wf_ids),
        timeout_ms=100_000_000 if mode == "virtual" else 300_000)
    if not ok:
        rig.close()
        raise TimeoutError("translator never saw all workflow ends")

    fidelity_ok = True
    violations = 0
    if check_fidelity:
        for client_id in _client_ids(cfg.clients):
            oracle = GraphBuilder()
            for record in results[client_id][1]:
                oracle.add(record)
            graph = rig.translator.graph_for(f"wf-{client_id}")
            if not graphs_equal(graph, oracle.graph):
                fidelity_ok = False
            violations += len(validate_graph(graph))

    per_client = []
    for client_id in _client_ids(cfg.clients):
        stats = results[client_id][0]
        per_client.append({
            "client": client_id,
            "envelopes": stats.envelopes,
            "records": stats.records,
            "bytes_on_wire": stats.bytes_on_wire,
            "retransmissions": stats.retransmissions,
            "capture_wall_ms": stats.capture_wall_ms,
            "flush_wait_ms": stats.flush_wait_ms,
        })
    out = {
        "t_capture_ms": t_capture,
        "per_client": per_client,
        "envelopes": sum(p["envelopes"] for p in per_client),
        "records": sum(p["records"] for p in per_client),
        "bytes_on_wire": sum(p["bytes_on_wire"] for p in per_client),
        "retransmissions": sum(p["retransmissions"] for p in per_client),
        "capture_call_ms": sum(p["capture_wall_ms"] for p in per_client),
        "flush_wait_ms": sum(p["flush_wait_ms"] for p in per_client),
        "fidelity_ok": fidelity_ok,
        "violations": violations,
        "broker_topics": rig.broker.topic_count(),
        "translator_records": rig.translator.stats.records,
    }
    rig.close()
    return out


def run_pair(cfg: WorkloadConfig, repeats: int = 1, mode: Optional[str] = None,
             link: LinkSpec = LinkSpec(), store: Optional[FileStore] = None) -> RunReport:
    """Baseline + instrumented, ``repeats`` times; mean and 95% CI of overhead."""
    mode = mode or cfg.sleep_mode
    overheads, bases, captures = [], [], []
    last: dict = {}
    for _ in range(repeats):
        t_base = run_baseline(cfg, mode)
        captured = run_captured(cfg, mode, link=link, store=store)
        t_capture = captured["t_capture_ms"]
        bases.append(t_base)
        captures.append(t_capture)
        overheads.append(100.0 * (t_capture - t_base) / t_base)
        last = captured
    overhead_mean, ci95 = mean_ci95(overheads)
    return RunReport(
        mode=mode,
        A=cfg.attrs_per_task,
        d=cfg.task_duration_s,
        G=cfg.group_size,
        bandwidth=cfg.bandwidth,
        N=cfg.clients,
        repeat=repeats,
        t_base_ms=statistics.fmean(bases),
        t_capture_ms=statistics.fmean(captures),
        overhead_pct=overhead_mean,
        envelopes=last.get("envelopes", 0),
        records=last.get("records", 0),
        bytes_on_wire=last.get("bytes_on_wire", 0),
        retransmissions=last.get("retransmissions", 0),
        ci95_pct=ci95,
        capture_call_ms=last.get("capture_call_ms", 0.0),
        flush_wait_ms=last.get("flush_wait_ms", 0.0),
        fidelity_ok=last.get("fidelity_ok", True),
        violations=last.get("violations", 0),
        per_client=last.get("per_client", []),
    )


# -- sweeps -------------------------------------------------------------------------

def preset_grid(name: str, mode: str = "virtual") -> list[WorkloadConfig]:
    """The named experiment grids."""
    if name == "table1":
        return [WorkloadConfig(attrs_per_task=a, task_duration_s=d,
                               sleep_mode=mode)
                for a in (10, 100) for d in (0.5, 1, 3.5, 5)]
    if name == "table8":
        return [WorkloadConfig(attrs_per_task=100, task_duration_s=d,
                               group_size=g, bandwidth=bw, sleep_mode=mode)
                for g in (0, 10, 20, 50)
                for bw in ("1gbit", "25kbit")
                for d in (0.5, 1)]
    if name == "table9":
        return [WorkloadConfig(attrs_per_task=100, task_duration_s=0.5,
                               clients=n, sleep_mode=mode)
                for n in (8, 16, 32, 64)]
    raise ValueError(f"unknown preset {name!r}")


def sweep(cfgs: list[WorkloadConfig], repeats: int = 1, mode: str = "virtual",
          link: LinkSpec = LinkSpec()) -> list[RunReport]:
    """Run every cell; per-cell failures are recorded and the sweep continues."""
    reports = []
    for cfg in cfgs:
        try:
            reports.append(run_pair(cfg, repeats=repeats, mode=mode, link=link))
        except Exception as exc:  # noqa: BLE001 - cell failures must not kill the sweep
            log.error("cell %s failed: %s", cfg, exc)
            reports.append(RunReport(
                mode=mode, A=cfg.attrs_per_task, d=cfg.task_duration_s,
                G=cfg.group_size, bandwidth=cfg.bandwidth, N=cfg.clients,
                repeat=repeats, t_base_ms=0.0, t_capture_ms=0.0,
                overhead_pct=float("nan"), envelopes=0, records=0,
                bytes_on_wire=0, retransmissions=0, ci95_pct=float("nan"),
                error=str(exc)))
    return reports


def write_csv(reports: list[RunReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for report in reports:
            writer.writerow(report.csv_row())


def summary_grid(reports: list[RunReport]) -> str:
    """Bandwidth/grouping style text grid of overhead means."""
    lines = []
    header = f"{'G':>5} {'bandwidth':>10} {'d(s)':>6} {'overhead%':>10} {'ci95':>7} " \
             f"{'envelopes':>10} {'bytes':>12}"
    lines.append(header)
    lines.append("-" * len(header))
    for report in reports:
        over = "failed" if report.error else f"{report.overhead_pct:10.2f}"
        lines.append(f"{report.G:>5} {report.bandwidth:>10} {report.d:>6} "
                     f"{over:>10} {report.ci95_pct:7.2f} {report.envelopes:>10} "
                     f"{report.bytes_on_wire:>12}")
    return "\n".join(lines)


# -- request/response baseline transport ------------------------------------------

class ConnectionLost(Exception):
    pass


class RequestResponseServer:
    """Acknowledges each length-prefixed request; the simulated stand-in for
    an HTTP-over-TCP provenance endpoint."""

    ACK = b"\x00\x02ok"

    def __init__(self):
        self.received = 0

    def handle_datagram(self, src, data, now):
        if len(data) < 4:
            return []
        declared = struct.unpack(">I", data[:4])[0]
        if declared != len(data) - 4:
            return []
        self.received += 1
        return [(src, self.ACK)]

    def poll(self, now):
        return []

    def next_deadline(self):
        return None


class RequestResponseClient:
    """Blocking one-round-trip-per-record client over the simulated network."""

    def __init__(self, net, server_addr):
        self.net = net
        self.server_addr = server_addr
        self.addr = None
        self.acks = 0
        self.bytes_sent = 0

    def bind(self, addr):
        self.addr = addr
        return self

    def handle_datagram(self, src, data, now):
        if data == RequestResponseServer.ACK:
            self.acks += 1
        return []

    def poll(self, now):
        return []

    def next_deadline(self):
        return None

    def publish(self, payload: bytes, timeout_ms: int = 600_000) -> None:
        before = self.acks
        frame = struct.pack(">I", len(payload)) + payload
        self.bytes_sent += len(frame)
        self.net.emit(self.addr, [(self.server_addr, frame)])
        if not self.net.run_until(lambda: self.acks > before, timeout_ms):
            raise ConnectionLost("no acknowledgment from server")


def run_captured_rr(cfg: WorkloadConfig, mode: str = "virtual") -> dict:
    """Instrumented run over the request/response baseline: every record is a
    blocking round trip, no grouping, no compression."""
    if mode != "virtual":
        return _run_captured_rr_real(cfg)
    net = SimNet()
    server = RequestResponseServer()
    server_addr = net.attach("rr-server", server)
    bps, delay = BANDWIDTH_PRESETS[cfg.bandwidth]
    script = gen_workload(cfg)
    results: dict = {}

    def worker(client_id):
        def run():
            client = RequestResponseClient(net, server_addr)
            addr = net.attach(f"rr/{client_id}", client)
            client.bind(addr)
            net.set_route(addr, server_addr, LinkConfig(
                bandwidth_bps=bps, base_delay_ms=delay, seed=cfg.seed))
            net.set_route(server_addr, addr, LinkConfig(base_delay_ms=delay))
            wf_id = f"wf-{client_id}"

            def record(kind, task="", data=()):
                return CaptureRecord(kind=kind, workflow_id=wf_id, task_id=task,
                                     data=tuple(data), timestamp=net.now_ms())

            client.publish(encode_record(record(RecordKind.WORKFLOW_BEGIN)))
            for spec in script.tasks:
                client.publish(encode_record(CaptureRecord(
                    kind=RecordKind.TASK_BEGIN, workflow_id=wf_id,
                    task_id=spec.task_id, dependencies=spec.dependencies,
                    data=(spec.input_data,), timestamp=net.now_ms())))
                net.sleep(spec.duration_s * 1000)
                client.publish(encode_record(CaptureRecord(
                    kind=RecordKind.TASK_END, workflow_id=wf_id,
                    task_id=spec.task_id, data=(spec.output_data,),
                    timestamp=net.now_ms())))
            client.publish(encode_record(record(RecordKind.WORKFLOW_END)))
            results[client_id] = client.bytes_sent
        return run

    start = net.now_ms()
    handles = [net.spawn(worker(c), name=c) for c in _client_ids(cfg.clients)]
    net.join(handles, timeout_ms=None)
    elapsed = float(net.now_ms() - start)
    net.close()
    return {"t_capture_ms": elapsed, "bytes_on_wire": sum(results.values()),
            "records_sent": server.received}


class _TcpAckServer:
    """Real-mode stand-in: accepts connections, acks each framed request."""

    def __init__(self):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(64)
        self.addr = self.sock.getsockname()
        self.received = 0
        self._stop = False
        self._threads = [threading.Thread(target=self._accept_loop, daemon=True)]
        self._threads[0].start()

    def _accept_loop(self):
        while not self._stop:
            try:
                conn, _ = self.sock.accept()
            except OSError:
                return
            thread = threading.Thread(target=self._serve, args=(conn,), daemon=True)
            thread.start()
            self._threads.append(thread)

    def _serve(self, conn):
        try:
            while True:
                header = self._read_exact(conn, 4)
                if header is None:
                    return
                length = struct.unpack(">I", header)[0]
                if self._read_exact(conn, length) is None:
                    return
                self.received += 1
                conn.sendall(b"ok")
        except OSError:
            pass
        finally:
            conn.close()

    @staticmethod
    def _read_exact(conn, n):
        buf = b""
        while len(buf) < n:
            chunk = conn.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return buf

    def close(self):
        self._stop = True
        try:
            self.sock.close()
        except OSError:
            pass


def _run_captured_rr_real(cfg: WorkloadConfig) -> dict:
    server = _TcpAckServer()
    bps, delay = BANDWIDTH_PRESETS[cfg.bandwidth]
    script = gen_workload(cfg)
    results: dict = {}
    errors: list = []

    def worker(client_id):
        link = LinkModel(LinkConfig(bandwidth_bps=bps, base_delay_ms=delay))
        sock = socket.create_connection(server.addr, timeout=30)
        bytes_sent = 0
        wf_id = f"wf-{client_id}"

        def send(record):
            nonlocal bytes_sent
            payload = encode_record(record)
            frame = struct.pack(">I", len(payload)) + payload
            bytes_sent += len(frame)
            now = time.monotonic() * 1000
            arrive_at, _ = link.shape(frame, now)
            modeled_done = arrive_at + delay  # request uplink + ack downlink
            sock.sendall(frame)
            ack = sock.recv(2)
            if ack != b"ok":
                raise ConnectionLost("bad ack")
            remaining = modeled_done - time.monotonic() * 1000
            if remaining > 0:
                time.sleep(remaining / 1000)

        def run():
            try:
                send(CaptureRecord(kind=RecordKind.WORKFLOW_BEGIN, workflow_id=wf_id,
                                   timestamp=int(time.time() * 1000)))
                for spec in script.tasks:
                    send(CaptureRecord(kind=RecordKind.TASK_BEGIN, workflow_id=wf_id,
                                       task_id=spec.task_id,
                                       dependencies=spec.dependencies,
                                       data=(spec.input_data,),
                                       timestamp=int(time.time() * 1000)))
                    time.sleep(spec.duration_s)
                    send(CaptureRecord(kind=RecordKind.TASK_END, workflow_id=wf_id,
                                       task_id=spec.task_id, data=(spec.output_data,),
                                       timestamp=int(time.time() * 1000)))
                send(CaptureRecord(kind=RecordKind.WORKFLOW_END, workflow_id=wf_id,
                                   timestamp=int(time.time() * 1000)))
                results[client_id] = bytes_sent
            except Exception as exc:  # noqa: BLE001
                errors.append(exc)
            finally:
                sock.close()
        return run

    threads = [threading.Thread(target=worker(c), daemon=True)
               for c in _client_ids(cfg.clients)]
    start = time.monotonic()
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    elapsed = (time.monotonic() - start) * 1000
    server.close()
    if errors:
        raise errors[0]
    return {"t_capture_ms": elapsed, "bytes_on_wire": sum(results.values()),
            "records_sent": server.received}


def run_pair_rr(cfg: WorkloadConfig, repeats: int = 1,
                mode: str = "virtual") -> RunReport:
    """Paired run over the request/response baseline transport."""
    overheads, bases, captures = [], [], []
    last: dict = {}
    for _ in range(repeats):
        t_base = run_baseline(cfg, mode)
        captured = run_captured_rr(cfg, mode)
        bases.append(t_base)
        captures.append(captured["t_capture_ms"])
        overheads.append(100.0 * (captured["t_capture_ms"] - t_base) / t_base)
        last = captured
    overhead_mean, ci95 = mean_ci95(overheads)
    return RunReport(
        mode=mode, A=cfg.attrs_per_task, d=cfg.task_duration_s, G=0,
        bandwidth=cfg.bandwidth, N=cfg.clients, repeat=repeats,
        t_base_ms=statistics.fmean(bases),
        t_capture_ms=statistics.fmean(captures),
        overhead_pct=overhead_mean,
        envelopes=last.get("records_sent", 0),
        records=last.get("records_sent", 0),
        bytes_on_wire=last.get("bytes_on_wire", 0),
        retransmissions=0, ci95_pct=ci95)
