"""Command line entry points: broker, translator, bench, inspect.

One binary, subcommand style; flags override values from an optional TOML
config file. Addresses are ``host:port`` strings. The capture-side
environment override ``PROVLIGHT_BROKER`` also applies to the translator's
upstream broker address.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import signal
import sys
import threading

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - 3.10 path
    import tomli as tomllib

from provlight.bench import (
    LinkSpec,
    preset_grid,
    run_pair_rr,
    summary_grid,
    sweep,
    write_csv,
)
from provlight.broker import Broker
from provlight.net import RealNet
from provlight.translator import (
    FileStore,
    HttpLikeSink,
    NullSink,
    Selector,
    TranslatorService,
    UnknownWorkflow,
    query_graph,
)
from provlight.workload import BANDWIDTH_PRESETS, WorkloadConfig

log = logging.getLogger("provlight")


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"address must be host:port, got {text!r}")
    try:
        return (host, int(port))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port in {text!r}") from None


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="provlight",
        description="Lightweight workflow provenance capture toolkit: "
                    "pub/sub broker, provenance translator, overhead bench, "
                    "and store inspection.")
    parser.add_argument("--config", metavar="PATH",
                        help="TOML config file; flags override its values")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_broker = sub.add_parser("broker", help="run the datagram pub/sub broker")
    p_broker.add_argument("--bind", metavar="ADDR", help="bind address host:port")
    p_broker.add_argument("--max-sessions", type=int, default=None,
                          help="session limit (default 1024)")

    p_tr = sub.add_parser("translator", help="run the provenance translator")
    p_tr.add_argument("--broker", metavar="ADDR", help="broker address host:port")
    p_tr.add_argument("--bind", metavar="ADDR", help="local bind address")
    p_tr.add_argument("--store", metavar="DIR", help="store directory")
    p_tr.add_argument("--sink", metavar="SPEC", default=None,
                      help="forward sink: null | http:HOST:PORT[/PATH] (default null)")
    p_tr.add_argument("--flush-on", choices=["every-record", "workflow-end"],
                      default="every-record", help="event log flush policy")

    p_bench = sub.add_parser("bench", help="run the capture overhead benchmark")
    p_bench.add_argument("--preset", choices=["table1", "table8", "table9"],
                         help="predefined experiment grid")
    p_bench.add_argument("--mode", choices=["real", "virtual"], default=None,
                         help="timing mode (default virtual)")
    p_bench.add_argument("--repeats", type=int, default=None,
                         help="repeats per cell (default 1)")
    p_bench.add_argument("--seed", type=int, default=None, help="workload seed")
    p_bench.add_argument("--tasks", type=int, default=None)
    p_bench.add_argument("--attrs", type=int, default=None,
                         help="attributes per task")
    p_bench.add_argument("--duration", type=float, default=None,
                         help="task duration seconds")
    p_bench.add_argument("--group", type=int, default=None,
                         help="grouping batch size (0 disables)")
    p_bench.add_argument("--transformations", type=int, default=None)
    p_bench.add_argument("--bandwidth", choices=sorted(BANDWIDTH_PRESETS),
                         default=None)
    p_bench.add_argument("--clients", type=int, default=None,
                         help="concurrent capture clients")
    p_bench.add_argument("--loss", type=float, default=None,
                         help="link loss probability")
    p_bench.add_argument("--dup", type=float, default=None,
                         help="link duplication probability")
    p_bench.add_argument("--reorder", type=float, default=None,
                         help="link reorder probability")
    p_bench.add_argument("--transport", choices=["pubsub", "rr"], default="pubsub",
                         help="pubsub capture path or request/response baseline")
    p_bench.add_argument("--csv", metavar="PATH", default="bench.csv",
                         help="CSV output path")
    p_bench.add_argument("--plot", metavar="PATH", default=None,
                         help="write overhead-vs-grouping plot (PNG/SVG)")

    p_ins = sub.add_parser("inspect", help="query a persisted workflow")
    p_ins.add_argument("workflow_id")
    p_ins.add_argument("--store", metavar="DIR", help="store directory")
    p_ins.add_argument("--top", type=int, default=None, help="limit rows")
    p_ins.add_argument("--by", metavar="KEY", default=None,
                       help="numeric attribute to order by")
    p_ins.add_argument("--target", choices=["data", "tasks"], default="data")
    p_ins.add_argument("--ascending", action="store_true",
                       help="ascending order (default descending)")
    p_ins.add_argument("--document", action="store_true",
                       help="print the whole provenance document as JSON")
    return parser


def _setting(args, file_cfg: dict, section: str, key: str, default=None):
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    return file_cfg.get(section, {}).get(key.replace("-", "_"),
                                         file_cfg.get(section, {}).get(key, default))


def _wait_for_signal(stop: threading.Event) -> None:
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            signal.signal(sig, lambda *_: stop.set())
        except ValueError:  # not the main thread (tests)
            return
    while not stop.wait(0.2):
        pass


def cmd_broker(args, file_cfg: dict, stop: threading.Event | None = None) -> int:
    bind = _setting(args, file_cfg, "broker", "bind", "127.0.0.1:1883")
    max_sessions = _setting(args, file_cfg, "broker", "max_sessions", 1024)
    net = RealNet()
    broker = Broker(max_sessions=int(max_sessions))
    addr = net.attach(parse_addr(bind) if isinstance(bind, str) else bind, broker)
    log.info("broker listening on %s:%d", *addr)
    stop = stop or threading.Event()
    try:
        _wait_for_signal(stop)
    finally:
        net.close()
        for key, value in broker.counters().items():
            log.info("broker %s: %s", key, value)
    return 0


def _make_sink(spec: str | None):
    if spec in (None, "null"):
        return NullSink()
    if spec.startswith("http:"):
        rest = spec[len("http:"):].lstrip("/")
        hostport, _, path = rest.partition("/")
        host, port = parse_addr(hostport)
        return HttpLikeSink(host, port, "/" + path if path else "/prov")
    raise argparse.ArgumentTypeError(f"unknown sink spec {spec!r}")


def cmd_translator(args, file_cfg: dict, stop: threading.Event | None = None) -> int:
    broker = os.environ.get("PROVLIGHT_BROKER") \
        or _setting(args, file_cfg, "translator", "broker", "127.0.0.1:1883")
    store_dir = _setting(args, file_cfg, "translator", "store", "./prov-store")
    sink_spec = _setting(args, file_cfg, "translator", "sink", None)
    flush_on = _setting(args, file_cfg, "translator", "flush_on", "every-record")
    bind = _setting(args, file_cfg, "translator", "bind", None)
    net = RealNet()
    store = FileStore(store_dir, flush_every_record=(flush_on == "every-record"))
    service = TranslatorService(net, parse_addr(broker), store=store,
                                sink=_make_sink(sink_spec))
    try:
        service.start(addr=parse_addr(bind) if bind else None)
    except Exception as exc:  # noqa: BLE001 - startup failure is a CLI error
        log.error("translator failed to start: %s", exc)
        net.close()
        return 1
    log.info("translator subscribed via %s, store at %s", service.addr, store_dir)
    stop = stop or threading.Event()
    try:
        _wait_for_signal(stop)
    finally:
        service.stop(persist_incomplete=True)
        net.close()
        log.info("translator stats: %s", service.stats)
    return 0


def _bench_grid(args, file_cfg: dict) -> list[WorkloadConfig]:
    mode = _setting(args, file_cfg, "bench", "mode", "virtual") or "virtual"
    preset = _setting(args, file_cfg, "bench", "preset", None)
    if preset:
        grid = preset_grid(preset, mode=mode)
    else:
        grid = [WorkloadConfig(
            transformations=int(_setting(args, file_cfg, "bench", "transformations", 5)),
            tasks=int(_setting(args, file_cfg, "bench", "tasks", 100)),
            attrs_per_task=int(_setting(args, file_cfg, "bench", "attrs", 10)),
            task_duration_s=float(_setting(args, file_cfg, "bench", "duration", 0.5)),
            group_size=int(_setting(args, file_cfg, "bench", "group", 0)),
            bandwidth=_setting(args, file_cfg, "bench", "bandwidth", "unlimited"),
            clients=int(_setting(args, file_cfg, "bench", "clients", 1)),
            seed=int(_setting(args, file_cfg, "bench", "seed", 42)),
            sleep_mode=mode,
        )]
    seed = _setting(args, file_cfg, "bench", "seed", None)
    if seed is not None:
        grid = [dataclasses.replace(cfg, seed=int(seed)) for cfg in grid]
    return grid


def _plot_reports(reports, path: str) -> int:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.error("--plot needs matplotlib (pip install provlight[plots])")
        return 1
    fig, ax = plt.subplots()
    by_bandwidth: dict[str, list] = {}
    for report in reports:
        if report.error:
            continue
        by_bandwidth.setdefault(report.bandwidth, []).append(report)
    for bandwidth, rows in sorted(by_bandwidth.items()):
        rows.sort(key=lambda r: r.G)
        ax.plot([r.G for r in rows], [r.overhead_pct for r in rows],
                marker="o", label=bandwidth)
    ax.set_xlabel("grouping batch size")
    ax.set_ylabel("capture overhead (%)")
    ax.legend()
    fig.savefig(path, bbox_inches="tight")
    log.info("plot written to %s", path)
    return 0


def cmd_bench(args, file_cfg: dict) -> int:
    mode = _setting(args, file_cfg, "bench", "mode", "virtual") or "virtual"
    repeats = int(_setting(args, file_cfg, "bench", "repeats", 1) or 1)
    try:
        grid = _bench_grid(args, file_cfg)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    link = LinkSpec(
        loss_prob=float(_setting(args, file_cfg, "bench", "loss", 0.0) or 0.0),
        dup_prob=float(_setting(args, file_cfg, "bench", "dup", 0.0) or 0.0),
        reorder_prob=float(_setting(args, file_cfg, "bench", "reorder", 0.0) or 0.0),
    )
    if args.transport == "rr":
        reports = [run_pair_rr(cfg, repeats=repeats, mode=mode) for cfg in grid]
    else:
        reports = sweep(grid, repeats=repeats, mode=mode, link=link)
    write_csv(reports, args.csv)
    print(summary_grid(reports))
    print(f"csv written to {args.csv}")
    if args.plot:
        status = _plot_reports(reports, args.plot)
        if status:
            return status
    return 1 if any(r.error for r in reports) else 0


def cmd_inspect(args, file_cfg: dict) -> int:
    store_dir = _setting(args, file_cfg, "inspect", "store", "./prov-store")
    store = FileStore(store_dir)
    try:
        if args.document:
            doc = store.load_document(args.workflow_id)
            print(json.dumps(doc.to_json_obj(), indent=1))
            return 0
        selector = Selector(target=args.target, key=args.by, order_by=args.by,
                            descending=not args.ascending, limit=args.top)
        rows = query_graph(store, args.workflow_id, selector)
    except UnknownWorkflow:
        print(f"error: no persisted workflow {args.workflow_id!r} in {store_dir}",
              file=sys.stderr)
        return 1
    if not rows:
        print("(no rows)")
        return 0
    if args.target == "tasks":
        print(f"{'task':<16} {'start':>14} {'end':>14} {'elapsed':>9} status")
        for row in rows:
            print(f"{row['id']:<16} {row['start_time']!s:>14} "
                  f"{row['end_time']!s:>14} {row['elapsed']!s:>9} {row['status']}")
    else:
        print(f"{'data':<20} {'value':>12}  attributes")
        for row in rows:
            attrs = ", ".join(f"{k}={v}" for k, v in row["attributes"][:4])
            more = "..." if len(row["attributes"]) > 4 else ""
            print(f"{row['id']:<20} {row['value']!s:>12}  {attrs}{more}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = load_config(args.config)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    if args.command == "broker":
        return cmd_broker(args, file_cfg)
    if args.command == "translator":
        return cmd_translator(args, file_cfg)
    if args.command == "bench":
        return cmd_bench(args, file_cfg)
    if args.command == "inspect":
        return cmd_inspect(args, file_cfg)
    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
