"""Workload generation and the overhead harness (virtual mode)."""

import json
import math
from pathlib import Path

import pytest

from provlight.bench import (
    CSV_COLUMNS,
    LinkSpec,
    mean_ci95,
    preset_grid,
    run_baseline,
    run_pair,
    run_pair_rr,
    summary_grid,
    sweep,
    t95,
    write_csv,
)
from provlight.workload import WorkloadConfig, gen_workload, stage_sizes

DATA_DIR = Path(__file__).parent / "data"


class TestWorkloadGeneration:
    def test_hundred_tasks_five_stages_of_twenty(self):
        cfg = WorkloadConfig(transformations=5, tasks=100, attrs_per_task=10,
                             task_duration_s=0.5)
        script = gen_workload(cfg)
        assert script.stage_sizes == (20, 20, 20, 20, 20)
        assert len(script.tasks) == 100
        from collections import Counter
        counts = Counter(spec.stage for spec in script.tasks)
        assert counts == {0: 20, 1: 20, 2: 20, 3: 20, 4: 20}

    def test_remainder_goes_to_last_stage(self):
        assert stage_sizes(103, 5) == (20, 20, 20, 20, 23)
        cfg = WorkloadConfig(transformations=5, tasks=103)
        script = gen_workload(cfg)
        assert sum(1 for s in script.tasks if s.stage == 4) == 23

    def test_same_seed_identical_scripts(self):
        cfg = WorkloadConfig(tasks=20, attrs_per_task=10, seed=7)
        assert gen_workload(cfg) == gen_workload(cfg)

    def test_different_seed_differs(self):
        a = gen_workload(WorkloadConfig(tasks=20, seed=1))
        b = gen_workload(WorkloadConfig(tasks=20, seed=2))
        assert a != b

    def test_chain_structure(self):
        script = gen_workload(WorkloadConfig(tasks=5, attrs_per_task=3))
        assert script.tasks[0].dependencies == ()
        for i in range(1, 5):
            assert script.tasks[i].dependencies == (script.tasks[i - 1].task_id,)
            assert script.tasks[i].input_data.derivations == \
                (script.tasks[i - 1].output_data.id,)

    def test_golden_attribute_stream_seed42(self):
        script = gen_workload(WorkloadConfig(tasks=10, attrs_per_task=10, seed=42))
        golden = json.loads((DATA_DIR / "workload_seed42.json").read_text())
        for spec, expected in zip(script.tasks, golden):
            assert spec.task_id == expected["task_id"]
            assert spec.stage == expected["stage"]
            assert list(spec.dependencies) == expected["dependencies"]
            assert [list(p) for p in spec.input_data.attributes] == \
                expected["input_attributes"]
            assert [list(p) for p in spec.output_data.attributes] == \
                expected["output_attributes"]

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            WorkloadConfig(tasks=0)
        with pytest.raises(ValueError):
            WorkloadConfig(attrs_per_task=0)
        with pytest.raises(ValueError):
            WorkloadConfig(bandwidth="9600baud")
        with pytest.raises(ValueError):
            WorkloadConfig(group_size=-1)


class TestStatistics:
    def test_t95_table(self):
        assert t95(9) == 2.262
        assert t95(2) == 4.303
        assert 1.9 < t95(100) < 2.1

    def test_mean_ci95_known_values(self):
        # brute-force oracle: mean 10, sd 1, n 5 -> half-width t*1/sqrt(5)
        samples = [9.0, 9.5, 10.0, 10.5, 11.0]
        mean, half = mean_ci95(samples)
        assert mean == 10.0
        import statistics
        expected = 2.776 * statistics.stdev(samples) / math.sqrt(5)
        assert half == pytest.approx(expected)

    def test_single_sample_has_zero_ci(self):
        assert mean_ci95([5.0]) == (5.0, 0.0)


class TestVirtualRuns:
    def test_baseline_is_exact_sum_of_sleeps(self):
        cfg = WorkloadConfig(tasks=100, task_duration_s=1.0, attrs_per_task=10)
        assert run_baseline(cfg, "virtual") == 100_000.0

    def test_run_pair_counters_and_law(self):
        cfg = WorkloadConfig(tasks=100, attrs_per_task=10, task_duration_s=0.5,
                             group_size=50)
        report = run_pair(cfg, repeats=1, mode="virtual")
        assert report.envelopes == 104
        assert report.records == 202
        assert report.t_base_ms == 50_000.0
        assert report.fidelity_ok and report.violations == 0

    def test_virtual_runs_exactly_reproducible(self):
        cfg = WorkloadConfig(tasks=30, attrs_per_task=10, task_duration_s=0.5,
                             group_size=10, bandwidth="25kbit", clients=2)
        link = LinkSpec(loss_prob=0.1, dup_prob=0.05, reorder_prob=0.05)
        rows = []
        for _ in range(2):
            r = run_pair(cfg, repeats=1, mode="virtual", link=link)
            rows.append((r.t_base_ms, r.t_capture_ms, r.envelopes, r.records,
                         r.bytes_on_wire, r.retransmissions))
        assert rows[0] == rows[1]

    def test_attribute_count_shifts_bytes_not_overhead(self):
        reports = {}
        for attrs in (10, 100):
            cfg = WorkloadConfig(tasks=30, attrs_per_task=attrs,
                                 task_duration_s=0.5, group_size=0)
            reports[attrs] = run_pair(cfg, repeats=1, mode="virtual")
        assert reports[100].bytes_on_wire > reports[10].bytes_on_wire
        # on an unconstrained link capture stays asynchronous: both ~0
        assert abs(reports[100].overhead_pct - reports[10].overhead_pct) < 1.0

    def test_grouping_wins_on_slow_link(self):
        results = {}
        for group in (0, 50):
            cfg = WorkloadConfig(tasks=30, attrs_per_task=100, task_duration_s=1.0,
                                 group_size=group, bandwidth="25kbit")
            results[group] = run_pair(cfg, repeats=1, mode="virtual")
        assert results[50].overhead_pct < results[0].overhead_pct

    def test_multi_client_breakdown(self):
        cfg = WorkloadConfig(tasks=10, attrs_per_task=10, task_duration_s=0.5,
                             clients=3)
        report = run_pair(cfg, repeats=1, mode="virtual")
        assert len(report.per_client) == 3
        assert all(p["records"] == 22 for p in report.per_client)


class TestSweep:
    def test_table8_grid_shape(self):
        cfgs = preset_grid("table8")
        assert len(cfgs) == 16
        combos = {(c.group_size, c.bandwidth, c.task_duration_s) for c in cfgs}
        assert len(combos) == 16

    def test_table9_grid_shape(self):
        cfgs = preset_grid("table9")
        assert [c.clients for c in cfgs] == [8, 16, 32, 64]

    def test_table1_grid_shape(self):
        cfgs = preset_grid("table1")
        assert len(cfgs) == 8

    def test_sweep_writes_exact_csv_columns(self, tmp_path):
        cfgs = [WorkloadConfig(tasks=5, attrs_per_task=5, task_duration_s=0.5,
                               group_size=g) for g in (0, 5)]
        reports = sweep(cfgs, repeats=2, mode="virtual")
        csv_path = tmp_path / "out.csv"
        write_csv(reports, csv_path)
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 3
        assert summary_grid(reports)  # renders without error

    def test_sweep_survives_failing_cell(self, monkeypatch, tmp_path):
        import provlight.bench as bench_mod
        real = bench_mod.run_pair

        def sometimes_broken(cfg, **kw):
            if cfg.group_size == 5:
                raise RuntimeError("injected cell failure")
            return real(cfg, **kw)

        monkeypatch.setattr(bench_mod, "run_pair", sometimes_broken)
        cfgs = [WorkloadConfig(tasks=3, attrs_per_task=3, task_duration_s=0.5,
                               group_size=g) for g in (0, 5)]
        reports = bench_mod.sweep(cfgs, repeats=1, mode="virtual")
        assert reports[0].error is None
        assert reports[1].error == "injected cell failure"
        write_csv(reports, tmp_path / "partial.csv")


class TestRequestResponseBaseline:
    def test_single_record_single_round_trip(self):
        from provlight.net import SimNet
        from provlight.bench import RequestResponseClient, RequestResponseServer
        net = SimNet()
        server = RequestResponseServer()
        net.attach("server", server)
        client = RequestResponseClient(net, "server")
        client.bind(net.attach("client", client))
        client.publish(b"record-bytes")
        assert server.received == 1 and client.acks == 1

    def test_bandwidth_lower_bound(self):
        # 100 records through a 25 kbit/s link cannot beat total_bits/25000
        from provlight.net import SimNet
        from provlight.bench import RequestResponseClient, RequestResponseServer
        from provlight.link import LinkConfig
        net = SimNet()
        server = RequestResponseServer()
        net.attach("server", server)
        client = RequestResponseClient(net, "server")
        client.bind(net.attach("client", client))
        net.set_route("client", "server", LinkConfig(bandwidth_bps=25_000))
        payload = bytes(125)  # 129 bytes framed
        start = net.now_ms()
        for _ in range(100):
            client.publish(payload)
        elapsed = net.now_ms() - start
        assert elapsed >= 100 * (129 * 8 * 1000 / 25_000)

    def test_blocking_baseline_worse_than_pubsub_on_slow_link(self):
        cfg = WorkloadConfig(tasks=20, attrs_per_task=100, task_duration_s=0.5,
                             group_size=0, bandwidth="25kbit")
        pubsub = run_pair(cfg, repeats=1, mode="virtual")
        rr = run_pair_rr(cfg, repeats=1, mode="virtual")
        assert rr.overhead_pct > pubsub.overhead_pct

    def test_rr_sends_more_bytes_than_grouped_compressed(self):
        cfg = WorkloadConfig(tasks=20, attrs_per_task=100, task_duration_s=0.5,
                             group_size=10, bandwidth="25kbit", compress=True)
        pubsub = run_pair(cfg, repeats=1, mode="virtual")
        rr = run_pair_rr(cfg, repeats=1, mode="virtual")
        assert rr.bytes_on_wire > pubsub.bytes_on_wire
