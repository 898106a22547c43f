import json
import sys

import numpy as np
import pytest

from reflectrag.backend import ReflectionToken, RequestMode, ScriptedBackend
from reflectrag.knowledge_base import KbEntry, KnowledgeBase, build_kb


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def entry(entry_id, img, ttl, article="A long enough article paragraph here.", title=None):
    return KbEntry(entry_id, title or entry_id.title(), article, unit(img), unit(ttl))


def random_kb(rng, n, dim, ties=False):
    """Random unit-vector KB; with ``ties`` some entries duplicate others' vectors."""
    img = rng.normal(size=(n, dim))
    ttl = rng.normal(size=(n, dim))
    if ties and n > 2:
        dup = rng.choice(n, size=max(1, n // 5), replace=True)
        src = rng.choice(n, size=dup.size, replace=True)
        img[dup], ttl[dup] = img[src], ttl[src]
    ids = [f"e{i:05d}" for i in rng.permutation(n)]
    return KnowledgeBase([KbEntry(ids[i], f"T{i}", "Article text long enough.", unit(img[i]), unit(ttl[i])) for i in range(n)])


def kb_record(entry_id, img, ttl, article, title=None):
    return {
        "entry_id": entry_id,
        "title": title or entry_id,
        "article": article,
        "image_embedding": list(map(float, img)),
        "title_embedding": list(map(float, ttl)),
    }


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


TWO_PARA = "{0} paragraph one has plenty of words.\n\n{0} paragraph two also has plenty of words."


@pytest.fixture
def small_kb():
    """Two entries with two paragraphs each; the query [1, 0, 0, 0] prefers 'dam'."""
    return build_kb(
        [
            kb_record("dam", [1, 0, 0, 0], [0.8, 0.6, 0, 0], TWO_PARA.format("Dam")),
            kb_record("river", [0.6, 0.8, 0, 0], [0, 1, 0, 0], TWO_PARA.format("River")),
        ]
    )


@pytest.fixture
def scripted():
    return ScriptedBackend()


def retrieval_backend(question, relevant_marker=None, answer="Hoover", prob=0.9):
    """Backend that asks for retrieval and marks paragraphs containing ``relevant_marker`` relevant."""
    b = ScriptedBackend(default_relevance=ReflectionToken.IRRELEVANT, default_prob=0.8)
    b.add_rule(RequestMode.RETRIEVAL_REFLECTION, question, {"reflection_token": "Retrieval", "reflection_prob": 0.95})
    if relevant_marker:
        b.add_rule(
            RequestMode.RELEVANCE_AND_ANSWER,
            question,
            {"reflection_token": "Relevant", "reflection_prob": prob, "answer_text": answer, "answer_token_logprobs": [-0.1, -0.3]},
            context_contains=relevant_marker,
        )
    return b


def batch_world(n_queries=50, n_entries=20, dim=8, seed=0):
    """KB, scripted backend and queries for batch tests.

    Paragraphs carry unique tokens ``w<entry>_<para>``; each retrieval query
    marks a couple of them relevant, with distinct answers and probabilities.
    """
    from reflectrag.pipeline import Query

    rng = np.random.default_rng(seed)
    rows = []
    for e in range(n_entries):
        n_par = int(rng.integers(1, 5))
        article = "\n\n".join(f"Paragraph w{e}_{p} about entry {e} with enough text." for p in range(n_par))
        rows.append(kb_record(f"ent{e:03d}", rng.normal(size=dim), rng.normal(size=dim), article))
    kb = build_kb(rows)
    backend = ScriptedBackend(default_relevance=ReflectionToken.IRRELEVANT, default_prob=0.7)
    queries = []
    for k in range(n_queries):
        question = f"Question number {k}?"
        retrieve = bool(rng.random() < 0.7)
        backend.add_rule(
            RequestMode.RETRIEVAL_REFLECTION, question,
            {"reflection_token": "Retrieval" if retrieve else "NoRetrieval", "reflection_prob": round(float(rng.uniform(0.5, 1)), 3)},
        )
        backend.add_rule(
            RequestMode.DIRECT_ANSWER, question,
            {"answer_text": f"direct{k}", "answer_token_logprobs": [round(float(-rng.random()), 3)]},
        )
        for _ in range(int(rng.integers(0, 3))):
            e, p = int(rng.integers(n_entries)), int(rng.integers(0, 4))
            try:
                backend.add_rule(
                    RequestMode.RELEVANCE_AND_ANSWER, question,
                    {"reflection_token": "Relevant", "reflection_prob": round(float(rng.uniform(0.3, 1)), 3),
                     "answer_text": f"ans{k}_{e}_{p}", "answer_token_logprobs": [round(float(-rng.random()), 3) for _ in range(3)]},
                    context_contains=f"w{e}_{p} ",
                )
            except Exception:
                pass  # same paragraph drawn twice
        queries.append(Query(f"q{k:03d}", question, f"img{k}.jpg", tuple(map(float, rng.normal(size=dim)))))
    return kb, backend, queries


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, line = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {line}")
