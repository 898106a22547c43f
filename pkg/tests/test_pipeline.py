import random
import time

import pytest

from reflectrag.backend import ReflectionToken, RequestMode, ScriptedBackend
from reflectrag.errors import BackendError, DataError
from reflectrag.jsonl import dumps
from reflectrag.pipeline import Branch, PipelineConfig, Query, run_batch, run_query

from conftest import batch_world, retrieval_backend

Q = "Which dam is this?"
QUERY = Query("q1", Q, "dam.jpg", (1.0, 0.0, 0.0, 0.0))


def test_no_retrieval_branch(small_kb):
    b = ScriptedBackend()
    b.add_rule("retrieval_reflection", Q, {"reflection_token": "NoRetrieval", "reflection_prob": 0.9})
    b.add_rule("direct_answer", Q, {"answer_text": "a dam", "answer_token_logprobs": [-0.1]})
    before = small_kb.scan_count
    r = run_query(QUERY, small_kb, b)
    assert r.branch is Branch.NO_RETRIEVAL
    assert r.final_answer == r.direct_answer == "a dam"
    assert r.candidates == [] and r.retrieved == []
    assert b.calls_by_mode("relevance_and_answer") == []
    assert small_kb.scan_count == before
    assert [e.step for e in r.trace] == ["retrieval_reflection", "direct_answer"]


def test_one_relevant_paragraph(small_kb):
    b = retrieval_backend(Q, relevant_marker="Dam paragraph two")
    r = run_query(QUERY, small_kb, b, PipelineConfig(top_n=2))
    assert r.branch is Branch.RETRIEVAL
    assert len(b.calls_by_mode("relevance_and_answer")) == 4
    assert len(r.candidates) == 1
    c = r.candidates[0]
    assert (c.entry_id, c.entry_index, c.paragraph_index) == ("dam", 0, 1)
    assert c.s_rel == 0.9 and c.s_ret == pytest.approx(r.retrieved[0]["score"])
    assert c.s_ans == pytest.approx(0.8187307530779818)  # exp(-0.2)
    assert r.final_answer == "Hoover"


@pytest.mark.parametrize("fallback, final, abstained", [("direct_answer", "unknown", False), ("abstain", None, True)])
def test_all_irrelevant_fallback(small_kb, fallback, final, abstained):
    b = retrieval_backend(Q)
    r = run_query(QUERY, small_kb, b, PipelineConfig(top_n=2, fallback=fallback))
    assert r.candidates == []
    assert r.final_answer == final and r.abstained is abstained
    assert r.trace[-1].step == ("fallback" if fallback == "direct_answer" else "abstain")


def test_trace_records_every_call(small_kb):
    b = retrieval_backend(Q, relevant_marker="River")
    r = run_query(QUERY, small_kb, b, PipelineConfig(top_n=2))
    backend_events = [e for e in r.trace if e.mode is not None]
    assert len(backend_events) == len(b.calls)
    assert all(e.prob is not None for e in backend_events)
    assert len(r.candidates) == sum(e.token == "Relevant" for e in r.trace)


def test_failed_paragraph_skip_or_abort(small_kb):
    b = retrieval_backend(Q, relevant_marker="Dam paragraph one")
    b.add_rule("relevance_and_answer", Q, {"error": "flaky"}, context_contains="River paragraph two")
    r = run_query(QUERY, small_kb, b, PipelineConfig(top_n=2))
    assert [e.step for e in r.trace].count("relevance_error") == 1
    assert r.final_answer == "Hoover"
    with pytest.raises(BackendError):
        run_query(QUERY, small_kb, b, PipelineConfig(top_n=2, skip_failed_paragraphs=False))


def test_max_paragraphs_per_entry(small_kb):
    b = retrieval_backend(Q)
    run_query(QUERY, small_kb, b, PipelineConfig(top_n=2, max_paragraphs_per_entry=1))
    assert len(b.calls_by_mode("relevance_and_answer")) == 2


def test_retrieval_needs_embedding(small_kb):
    with pytest.raises(DataError):
        run_query(Query("q", Q), small_kb, retrieval_backend(Q))


def test_candidate_order_independent_of_completion_order(small_kb):
    b = ScriptedBackend(default_relevance=ReflectionToken.RELEVANT, default_prob=0.5)
    b.add_rule("retrieval_reflection", Q, {"reflection_token": "Retrieval", "reflection_prob": 0.9})
    jitter = random.Random(0)
    b.delay = lambda req: time.sleep(jitter.random() * 0.01)
    r = run_query(QUERY, small_kb, b, PipelineConfig(top_n=2, parallelism=4))
    assert [c.position for c in r.candidates] == [(0, 0), (0, 1), (1, 0), (1, 1)]


@pytest.mark.parametrize("bad", [dict(top_n=0), dict(parallelism=0), dict(max_paragraphs_per_entry=0), dict(fallback="x")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        PipelineConfig(**bad)


def test_batch_input_order_and_empty(small_kb):
    b = retrieval_backend(Q, relevant_marker="Dam")
    qs = [Query(f"q{i}", Q, "", (1.0, 0.0, 0.0, float(i))) for i in range(3)]
    assert [r.query_id for r in run_batch(qs, small_kb, b, PipelineConfig(parallelism=3))] == ["q0", "q1", "q2"]
    assert run_batch([], small_kb, b) == []


def test_batch_collects_errors(small_kb):
    b = retrieval_backend(Q)
    results = run_batch([Query("bad", Q), QUERY], small_kb, b)
    assert results[0].error.startswith("DataError") and results[1].error is None
    with pytest.raises(DataError):
        run_batch([Query("bad", Q)], small_kb, b, fail_fast=True)


def _batch_jsonl(parallelism):
    kb, backend, queries = batch_world()
    results = run_batch(queries, kb, backend, PipelineConfig(parallelism=parallelism))
    return "".join(dumps(r.to_dict()) + "\n" for r in results)


def test_batch_parallelism_byte_identical():
    serial = _batch_jsonl(1)
    assert serial == _batch_jsonl(8)
    assert '"branch": "retrieval"' in serial and '"branch": "no_retrieval"' in serial
    assert '"Relevant"' in serial


def test_query_from_dict():
    q = Query.from_dict({"query_id": 3, "question": "Q?", "image_embedding": [1, 2], "gold_answers": ["a"], "question_category": "TIME"})
    assert q.query_id == "3" and q.image_embedding == (1.0, 2.0) and q.gold_answers == ("a",)
    with pytest.raises(DataError):
        Query.from_dict({"question": "Q?"})
    with pytest.raises(DataError):
        Query.from_dict({"query_id": "x", "question": " "})
