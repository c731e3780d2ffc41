"""Instrumentation API: handles, misuse errors, envelope accounting."""

import math

import pytest

from conftest import BROKER, ScriptedLink, make_rig
from provlight.capture import (
    CaptureConfig,
    ConnectFailed,
    Data,
    TaskNotActive,
    WorkflowNotActive,
    task_begin,
    task_end,
    workflow_begin,
    workflow_end,
)
from provlight.model import GraphBuilder, graphs_equal
from provlight.translator import TranslatorService
from provlight.wire import RecordKind


def make_full_rig(store=None):
    net, broker = make_rig()
    translator = TranslatorService(net, BROKER, store=store)
    translator.start()
    return net, broker, translator


def cfg_for(client_id, **kw):
    kw.setdefault("record_log", True)
    return CaptureConfig(broker_addr=BROKER, client_id=client_id, **kw)


def run_workflow(net, cfg, wf_id, tasks=0, attach_data=False):
    wf = workflow_begin(cfg, wf_id, net)
    for i in range(tasks):
        inputs = [Data(f"{wf_id}.t{i}.in", {"lr": 0.01})] if attach_data else []
        task = task_begin(wf, f"t{i}", dependencies=[f"t{i-1}"] if i else [],
                          inputs=inputs)
        outputs = [Data(f"{wf_id}.t{i}.out", {"acc": 0.5 + i})] if attach_data else []
        task_end(task, outputs)
    stats = workflow_end(wf)
    return wf, stats


class TestWorkflowBegin:
    def test_broker_sees_workflow_begin_envelope(self):
        net, broker, translator = make_full_rig()
        cfg = cfg_for("dev-1")
        wf = workflow_begin(cfg, "wf1", net)
        assert net.run_until(lambda: translator.stats.envelopes == 1, 60_000)
        graph = translator.graph_for("wf1")
        assert "wf1" in graph.workflows
        workflow_end(wf)

    def test_unreachable_broker_fails_within_budget(self):
        net, broker, _ = make_full_rig()
        net.set_route("capture/dev-9", BROKER, ScriptedLink(lambda i, d: "drop"))
        with pytest.raises(ConnectFailed):
            workflow_begin(cfg_for("dev-9"), "wf9", net)
        assert net.now_ms() == pytest.approx(3800, abs=100)

    def test_two_workflows_two_sessions_two_topics(self):
        net, broker, translator = make_full_rig()
        wf_a = workflow_begin(cfg_for("dev-a"), "wfa", net)
        wf_b = workflow_begin(cfg_for("dev-b"), "wfb", net)
        assert broker.session_count() == 3  # translator + two clients
        assert "prov/dev-a" in broker.topic_ids
        assert "prov/dev-b" in broker.topic_ids
        workflow_end(wf_a)
        workflow_end(wf_b)


class TestTaskLifecycle:
    def test_task_begin_carries_input_attributes(self):
        net, broker, translator = make_full_rig()
        cfg = cfg_for("dev-1")
        wf = workflow_begin(cfg, "wf1", net)
        task = task_begin(wf, "t1", inputs=[Data("h1", {"lr": 0.01, "epochs": 100})])
        assert net.run_until(lambda: translator.stats.records == 2, 60_000)
        data = translator.graph_for("wf1").data["h1"]
        assert data.attributes == [("lr", 0.01), ("epochs", 100)]
        task_end(task)
        workflow_end(wf)

    def test_task_begin_after_workflow_end_rejected(self):
        net, broker, translator = make_full_rig()
        wf, _ = run_workflow(net, cfg_for("dev-1"), "wf1")
        with pytest.raises(WorkflowNotActive):
            task_begin(wf, "late")

    def test_double_task_end_rejected(self):
        net, broker, translator = make_full_rig()
        cfg = cfg_for("dev-1")
        wf = workflow_begin(cfg, "wf1", net)
        task = task_begin(wf, "t1")
        task_end(task)
        with pytest.raises(TaskNotActive):
            task_end(task)
        workflow_end(wf)

    def test_chained_dependencies_reach_translator(self):
        net, broker, translator = make_full_rig()
        cfg = cfg_for("dev-1")
        wf = workflow_begin(cfg, "wf1", net)
        for i in range(5):
            task = task_begin(wf, f"t{i}", dependencies=[f"t{i-1}"] if i else [])
            task_end(task)
        workflow_end(wf)
        assert net.run_until(lambda: translator.workflow_complete("wf1"), 120_000)
        graph = translator.graph_for("wf1")
        assert [graph.tasks[f"t{i}"].dependencies for i in range(5)] == \
            [[], ["t0"], ["t1"], ["t2"], ["t3"]]


class TestEnvelopeAccounting:
    def test_zero_tasks_two_envelopes(self):
        net, broker, translator = make_full_rig()
        _, stats = run_workflow(net, cfg_for("dev-1"), "wf1", tasks=0)
        assert stats.envelopes == 2
        assert stats.records == 2

    def test_group_disabled_one_envelope_per_task_end(self):
        net, broker, translator = make_full_rig()
        _, stats = run_workflow(net, cfg_for("dev-1", group_size=0), "wf1", tasks=10)
        assert stats.envelopes == 2 + 10 + 10

    @pytest.mark.parametrize("tasks,group,expected", [
        (100, 0, 202), (100, 10, 112), (100, 20, 107), (100, 50, 104),
        (30, 50, 33), (7, 3, 12),
    ])
    def test_transmission_count_law(self, tasks, group, expected):
        net, broker, translator = make_full_rig()
        _, stats = run_workflow(net, cfg_for("dev-1", group_size=group), "wf1",
                                tasks=tasks)
        law = 2 + 2 * tasks if group == 0 else 2 + tasks + math.ceil(tasks / group)
        assert expected == law
        assert stats.envelopes == expected
        assert stats.records == 2 + 2 * tasks
        assert net.run_until(lambda: translator.workflow_complete("wf1"), 600_000)
        assert translator.stats.envelopes == expected

    def test_compression_strictly_smaller_for_fat_tasks(self):
        results = {}
        for compress in (False, True):
            net, broker, translator = make_full_rig()
            cfg = cfg_for("dev-1", compress=compress, group_size=50)
            wf = workflow_begin(cfg, "wf1", net)
            for i in range(100):
                attrs = {f"a{j}": j for j in range(100)}
                task = task_begin(wf, f"t{i}", inputs=[Data(f"i{i}", attrs)])
                task_end(task, [Data(f"o{i}", attrs)])
            stats = workflow_end(wf)
            results[compress] = stats.bytes_on_wire
        assert results[True] < results[False]


class TestGraphFidelity:
    def test_translator_graph_equals_client_oracle(self):
        net, broker, translator = make_full_rig()
        cfg = cfg_for("dev-1", group_size=20)
        wf = workflow_begin(cfg, "wf1", net)
        prev_out = None
        for i in range(30):
            derivations = [prev_out] if prev_out else []
            task = task_begin(wf, f"t{i}", dependencies=[f"t{i-1}"] if i else [],
                              inputs=[Data(f"d{i}.in", {"step": i},
                                           derivations=derivations)])
            prev_out = f"d{i}.out"
            task_end(task, [Data(prev_out, {"loss": 1.0 / (i + 1)})])
        workflow_end(wf)
        assert net.run_until(lambda: translator.workflow_complete("wf1"), 600_000)

        oracle = GraphBuilder()
        for record in wf.record_log:
            oracle.add(record)
        assert graphs_equal(translator.graph_for("wf1"), oracle.graph)

    def test_record_log_reflects_emission_order(self):
        net, broker, translator = make_full_rig()
        wf, stats = run_workflow(net, cfg_for("dev-1", group_size=3), "wf1", tasks=4)
        # 4 tasks, G=3: begins immediate, one flush after 3 ends, drain of 1
        kinds = [r.kind for r in wf.record_log]
        B, E = RecordKind.TASK_BEGIN, RecordKind.TASK_END
        assert kinds == [RecordKind.WORKFLOW_BEGIN, B, B, B, E, E, E, B, E,
                         RecordKind.WORKFLOW_END]
        net.run_until(lambda: translator.workflow_complete("wf1"), 600_000)
        assert translator.stats.records == stats.records


class TestStatsTiming:
    def test_capture_wall_excludes_user_compute(self):
        net, broker, translator = make_full_rig()
        cfg = cfg_for("dev-1")
        done = {}

        def script():
            wf = workflow_begin(cfg, "wf1", net)
            task = task_begin(wf, "t1")
            net.sleep(5_000)  # user computation, must not count
            task_end(task)
            done["stats"] = workflow_end(wf)

        handle = net.spawn(script)
        net.join([handle], 600_000)
        stats = done["stats"]
        assert stats.capture_wall_ms < 1_000
        assert net.now_ms() >= 5_000
