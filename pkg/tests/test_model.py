"""Graph assembly, validation, export, and the pending-retry policy."""

import random

import pytest

from provlight.model import (
    DataRecord,
    GraphBuilder,
    InvalidGraph,
    OrderViolation,
    ProvGraph,
    RelationshipKind,
    TaskRecord,
    TaskStatus,
    UnknownTask,
    UnknownWorkflow,
    WorkflowRecord,
    apply_record,
    copy_graph,
    export_prov,
    graphs_equal,
    validate_graph,
)
from provlight.wire import CaptureRecord, DataPayload, RecordKind


def rec(kind, wf="wf1", task="", deps=(), data=(), t=0):
    return CaptureRecord(kind=kind, workflow_id=wf, task_id=task,
                         dependencies=tuple(deps), data=tuple(data), timestamp=t)


def one_task_session():
    """Begin workflow, run one task with input i1 and output o1, end workflow."""
    i1 = DataPayload("i1", attributes=(("lr", 0.01), ("epochs", 100)))
    o1 = DataPayload("o1", attributes=(("accuracy", 0.93),))
    return [
        rec(RecordKind.WORKFLOW_BEGIN, t=1000),
        rec(RecordKind.TASK_BEGIN, task="t1", data=[i1], t=1010),
        rec(RecordKind.TASK_END, task="t1", data=[o1], t=1500),
        rec(RecordKind.WORKFLOW_END, t=1600),
    ]


def build(records):
    graph = ProvGraph()
    for record in records:
        apply_record(graph, record)
    return graph


class TestApplyRecord:
    def test_workflow_begin_on_empty_graph(self):
        graph = build([rec(RecordKind.WORKFLOW_BEGIN, t=1000)])
        assert graph.workflows == {"wf1": WorkflowRecord("wf1", start_time=1000)}
        assert graph.tasks == {} and graph.data == {}

    def test_single_task_workflow(self):
        graph = build(one_task_session())
        assert set(graph.workflows) == {"wf1"}
        assert graph.workflows["wf1"].start_time == 1000
        assert graph.workflows["wf1"].end_time == 1600
        task = graph.tasks["t1"]
        assert task.status is TaskStatus.FINISHED
        assert task.inputs == ["i1"] and task.outputs == ["o1"]
        assert set(graph.data) == {"i1", "o1"}
        assert graph.data["i1"].attributes == [("lr", 0.01), ("epochs", 100)]

    def test_task_begin_idempotent(self):
        records = one_task_session()
        once = build(records[:2])
        twice = build(records[:2] + [records[1]])
        assert graphs_equal(once, twice)

    def test_duplicate_interleavings_converge(self):
        records = one_task_session()
        rng = random.Random(9)
        reference = build(records)
        for _ in range(25):
            stream = []
            for record in records:
                stream.append(record)
                if rng.random() < 0.5 and stream:
                    stream.append(rng.choice(stream))  # duplicate keeps first-occurrence order
            builder = GraphBuilder()
            for record in stream:
                builder.add(record)
            assert graphs_equal(builder.graph, reference)

    def test_late_task_begin_duplicate_keeps_finished_status(self):
        records = one_task_session()
        graph = build(records)
        apply_record(graph, records[1])  # duplicate TASK_BEGIN after TASK_END
        assert graph.tasks["t1"].status is TaskStatus.FINISHED
        assert graphs_equal(graph, build(records))

    def test_task_end_unknown_task(self):
        graph = build([rec(RecordKind.WORKFLOW_BEGIN)])
        with pytest.raises(UnknownTask):
            apply_record(graph, rec(RecordKind.TASK_END, task="ghost"))

    def test_workflow_end_before_begin(self):
        with pytest.raises(UnknownWorkflow):
            apply_record(ProvGraph(), rec(RecordKind.WORKFLOW_END))


class TestGraphBuilder:
    def test_out_of_order_stream_resolves(self):
        records = one_task_session()
        shuffled = [records[2], records[1], records[3], records[0]]
        builder = GraphBuilder()
        for record in shuffled:
            builder.add(record)
        assert not builder.pending
        assert graphs_equal(builder.graph, build(records))

    def test_pending_overflow_raises(self):
        builder = GraphBuilder(pending_limit=3)
        for i in range(3):
            builder.add(rec(RecordKind.TASK_END, task=f"t{i}"))
        with pytest.raises(OrderViolation):
            builder.add(rec(RecordKind.TASK_END, task="t99"))

    def test_duplicate_attribute_key_last_write_wins(self):
        payload = DataPayload("d", attributes=(("k", 1), ("k", 2), ("x", 0)))
        builder = GraphBuilder()
        builder.add(rec(RecordKind.WORKFLOW_BEGIN))
        builder.add(rec(RecordKind.TASK_BEGIN, task="t", data=[payload]))
        assert builder.graph.data["d"].attributes == [("k", 2), ("x", 0)]
        assert any(v.field == "attributes" for v in builder.violations)
        assert validate_graph(builder.graph) == []


class TestValidateGraph:
    def test_empty_graph_clean(self):
        assert validate_graph(ProvGraph()) == []

    def test_single_task_graph_clean(self):
        assert validate_graph(build(one_task_session())) == []

    def test_missing_workflow_reference(self):
        graph = ProvGraph(tasks={"t1": TaskRecord(id="t1", workflow="wfX", start_time=1)})
        violations = validate_graph(graph)
        assert len(violations) == 1
        v = violations[0]
        assert (v.entity_kind, v.entity_id, v.relationship) == \
            ("task", "t1", RelationshipKind.WAS_ASSOCIATED_WITH)
        assert "wfX" in v.detail

    def test_inputs_outputs_overlap(self):
        graph = build(one_task_session())
        graph.tasks["t1"].outputs.append("i1")
        assert any("overlap" in v.detail for v in validate_graph(graph))

    def test_self_dependency(self):
        graph = build(one_task_session())
        graph.tasks["t1"].dependencies.append("t1")
        assert any(v.relationship is RelationshipKind.WAS_INFORMED_BY
                   for v in validate_graph(graph))

    def test_missing_derivation_source(self):
        graph = build(one_task_session())
        graph.data["o1"].derivations.append("nowhere")
        assert any(v.relationship is RelationshipKind.WAS_DERIVED_FROM
                   for v in validate_graph(graph))

    def test_end_before_start(self):
        graph = ProvGraph(workflows={"w": WorkflowRecord("w", start_time=10, end_time=5)})
        assert any("before" in v.detail for v in validate_graph(graph))


def count_statements(doc, kind):
    return sum(1 for s in doc.statements if s.kind is kind)


class TestExportProv:
    def test_empty_graph(self):
        doc = export_prov(ProvGraph())
        assert doc.agents == [] and doc.activities == [] and doc.entities == []
        assert doc.statements == []

    def test_single_task_statement_counts(self):
        doc = export_prov(build(one_task_session()))
        assert count_statements(doc, RelationshipKind.WAS_ASSOCIATED_WITH) == 1
        assert count_statements(doc, RelationshipKind.USED) == 1
        assert count_statements(doc, RelationshipKind.WAS_GENERATED_BY) == 1
        assert count_statements(doc, RelationshipKind.WAS_ATTRIBUTED_TO) == 2
        assert count_statements(doc, RelationshipKind.WAS_INFORMED_BY) == 0
        assert count_statements(doc, RelationshipKind.WAS_DERIVED_FROM) == 0

    def test_chained_tasks_edges(self):
        o1 = DataPayload("o1")
        i2 = DataPayload("o2.in", derivations=("o1",))
        records = [
            rec(RecordKind.WORKFLOW_BEGIN, t=1),
            rec(RecordKind.TASK_BEGIN, task="t1", t=2),
            rec(RecordKind.TASK_END, task="t1", data=[o1], t=3),
            rec(RecordKind.TASK_BEGIN, task="t2", deps=["t1"], data=[i2], t=4),
            rec(RecordKind.TASK_END, task="t2", t=5),
            rec(RecordKind.WORKFLOW_END, t=6),
        ]
        doc = export_prov(build(records))
        informed = [s for s in doc.statements if s.kind is RelationshipKind.WAS_INFORMED_BY]
        assert [(s.subject, s.object) for s in informed] == [("t2", "t1")]
        derived = [s for s in doc.statements if s.kind is RelationshipKind.WAS_DERIVED_FROM]
        assert [(s.subject, s.object) for s in derived] == [("o2.in", "o1")]

    def test_statement_count_law(self):
        graph = build(one_task_session())
        doc = export_prov(graph)
        used = sum(len(t.inputs) for t in graph.tasks.values())
        generated = sum(len(t.outputs) for t in graph.tasks.values())
        informed = sum(len(t.dependencies) for t in graph.tasks.values())
        derived = sum(len(d.derivations) for d in graph.data.values())
        expected = used + generated + informed + derived + len(graph.tasks) + len(graph.data)
        assert len(doc.statements) == expected

    def test_strict_export_rejects_dirty_graph(self):
        graph = ProvGraph(tasks={"t": TaskRecord(id="t", workflow="missing", start_time=1)})
        with pytest.raises(InvalidGraph):
            export_prov(graph)

    def test_clean_validation_implies_export_succeeds(self):
        graph = build(one_task_session())
        assert validate_graph(graph) == []
        export_prov(graph)  # must not raise

    def test_deterministic_ordering(self):
        records = one_task_session()
        a = export_prov(build(records))
        b = export_prov(build(list(records)))
        assert a.to_json_obj() == b.to_json_obj()

    def test_json_round_trip(self):
        from provlight.model import ProvDocument
        doc = export_prov(build(one_task_session()))
        assert ProvDocument.from_json_obj(doc.to_json_obj()) == doc


class TestGraphEquality:
    def test_insertion_order_irrelevant(self):
        a = ProvGraph(data={"x": DataRecord("x", "w"), "y": DataRecord("y", "w")})
        b = ProvGraph(data={"y": DataRecord("y", "w"), "x": DataRecord("x", "w")})
        assert graphs_equal(a, b)

    def test_copy_is_deep(self):
        graph = build(one_task_session())
        clone = copy_graph(graph)
        assert graphs_equal(graph, clone)
        clone.tasks["t1"].inputs.append("zzz")
        assert not graphs_equal(graph, clone)
