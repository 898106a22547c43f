"""Seeded synthetic corpora for offline runs, scripts and acceptance checks.

Nothing here models real data; the generators only need to exercise every
branch of the pipeline and the annotation filter reproducibly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

SPLITS = ("unseen_question", "unseen_entity")

_FILLER = (
    "The structure is described in several historical surveys",
    "Visitors often remark on the surrounding landscape",
    "Local records mention a number of later renovations",
    "The site appears on maps from the early period",
    "Guides list it among the notable places of the region",
)


def _marker(e: int, p: int) -> str:
    return f"[w{e}p{p}]"


@dataclass
class SyntheticWorld:
    kb_rows: list[dict[str, Any]]
    fixture_rows: list[dict[str, Any]]
    query_rows: list[dict[str, Any]]


def synthetic_world(
    n_queries: int = 50,
    n_entries: int = 40,
    dim: int = 16,
    seed: int = 0,
    retrieval_rate: float = 0.7,
    noise: float = 0.6,
) -> SyntheticWorld:
    """KB records, backend fixture lines and queries that fit together.

    Each query targets one gold entry; its image embedding is that entry's
    image vector plus Gaussian ``noise``. The fixture marks the gold evidence
    paragraph relevant with the right answer and a few distractor paragraphs
    relevant with wrong answers, so ranking modes disagree.
    """
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(n_entries, dim))
    ttl = img + rng.normal(scale=0.8, size=(n_entries, dim))
    n_par = rng.integers(1, 5, size=n_entries)

    kb_rows = []
    for e in range(n_entries):
        paras = [f"{_marker(e, p)} {_FILLER[(e + p) % len(_FILLER)]} for entry {e}." for p in range(int(n_par[e]))]
        kb_rows.append({
            "entry_id": f"ent{e:04d}",
            "title": f"Entry {e}",
            "article": "\n\n".join(paras),
            "image_embedding": [round(float(x), 6) for x in img[e]],
            "title_embedding": [round(float(x), 6) for x in ttl[e]],
        })

    fixture_rows: list[dict[str, Any]] = []
    query_rows = []
    for k in range(n_queries):
        gold_e = int(rng.integers(n_entries))
        gold_p = int(rng.integers(n_par[gold_e]))
        answer = f"answer{k}"
        question = f"Synthetic question {k} about the pictured place?"
        retrieve = bool(rng.random() < retrieval_rate)
        lp = lambda n: [round(float(-x), 4) for x in rng.uniform(0.01, 1.5, size=n)]
        fixture_rows.append({
            "request_key": {"mode": "retrieval_reflection", "question": question},
            "response": {"reflection_token": "Retrieval" if retrieve else "NoRetrieval",
                         "reflection_prob": round(float(rng.uniform(0.55, 0.99)), 4)},
        })
        direct_ok = bool(rng.random() < (0.8 if not retrieve else 0.2))
        fixture_rows.append({
            "request_key": {"mode": "direct_answer", "question": question},
            "response": {"answer_text": answer if direct_ok else f"guess{k}", "answer_token_logprobs": lp(2)},
        })
        relevant = {(gold_e, gold_p): answer}
        for _ in range(int(rng.integers(0, 4))):
            e = int(rng.integers(n_entries))
            relevant.setdefault((e, int(rng.integers(n_par[e]))), f"wrong{k}_{e}")
        for (e, p), text in sorted(relevant.items()):
            fixture_rows.append({
                "request_key": {"mode": "relevance_and_answer", "question": question, "context_contains": _marker(e, p)},
                "response": {"reflection_token": "Relevant", "reflection_prob": round(float(rng.uniform(0.3, 0.99)), 4),
                             "answer_text": text, "answer_token_logprobs": lp(int(rng.integers(1, 6)))},
            })
        q = img[gold_e] + rng.normal(scale=noise, size=dim)
        query_rows.append({
            "query_id": f"q{k:04d}",
            "question": question,
            "image_ref": f"img{k:04d}.jpg",
            "image_embedding": [round(float(x), 6) for x in q],
            "gold_answers": [answer],
            "gold_entry_id": f"ent{gold_e:04d}",
            "question_category": "STRING",
            "split": SPLITS[k % len(SPLITS)],
        })
    return SyntheticWorld(kb_rows, fixture_rows, query_rows)


@dataclass
class EncVqaCorpus:
    samples: list[dict[str, Any]]
    clean_ids: set[str] = field(default_factory=set)
    planted: dict[str, str] = field(default_factory=dict)


VIOLATIONS = ("leak", "leak_case", "leak_whitespace", "missing", "multi_missing", "leak_thousands")


def synthetic_enc_vqa(n: int = 200, violation_rate: float = 0.4, seed: int = 0) -> EncVqaCorpus:
    """Enc-VQA-style samples, some with planted filter violations.

    Answers are unique nonsense tokens so no accidental substring matches
    occur. ``planted`` maps each violating sample id to its violation kind.
    """
    rng = np.random.default_rng(seed)
    corpus = EncVqaCorpus([])
    for i in range(n):
        sid = f"enc{i:04d}"
        multi = bool(rng.random() < 0.3)
        numeric = not multi and bool(rng.random() < 0.2)
        if numeric:
            answers = [f"{int(rng.integers(1, 99))},{int(rng.integers(100, 999))}"]
        else:
            answers = [f"Zorb{i} Vex{a}" for a in range(2 if multi else 1)]
        n_par = int(rng.integers(2, 6))
        ev = int(rng.integers(n_par))
        paragraphs = [
            {"text": f"{_FILLER[(i + j) % len(_FILLER)]} (section {j}).", "is_evidence": j == ev} for j in range(n_par)
        ]
        paragraphs[ev]["text"] = f"It is known as {' and '.join(answers)}. " + paragraphs[ev]["text"]

        kind = None
        if rng.random() < violation_rate:
            kind = VIOLATIONS[int(rng.integers(len(VIOLATIONS)))]
            if kind == "multi_missing" and not multi:
                kind = "missing"
            if kind == "leak_thousands" and not numeric:
                kind = "leak"
        other = (ev + 1 + int(rng.integers(n_par - 1))) % n_par
        a0 = answers[0]
        if kind == "leak":
            paragraphs[other]["text"] += f" Some also say {a0}."
        elif kind == "leak_case":
            paragraphs[other]["text"] += f" Some also say {a0.upper()}."
        elif kind == "leak_whitespace":
            spaced = a0.replace(" ", " \n  ") if " " in a0 else a0
            paragraphs[other]["text"] += f" Some also say {spaced}."
            if spaced == a0:
                kind = "leak"
        elif kind == "leak_thousands":
            paragraphs[other]["text"] += f" Roughly {a0.replace(',', '')} in total."
        elif kind == "missing":
            paragraphs[ev]["text"] = paragraphs[ev]["text"].replace(a0, "an unnamed place")
        elif kind == "multi_missing":
            paragraphs[ev]["text"] = paragraphs[ev]["text"].replace(answers[1], "another")

        corpus.samples.append({
            "sample_id": sid,
            "question": f"What is the name of item {i}?",
            "image_ref": f"enc{i:04d}.jpg",
            "answers": " && ".join(answers) if multi else answers,
            "paragraphs": paragraphs,
        })
        if kind is None:
            corpus.clean_ids.add(sid)
        else:
            corpus.planted[sid] = kind
    return corpus
