"""Query-time control flow.

1. Ask the backend whether the question needs retrieval.
2. ``NoRetrieval``: answer directly from the image and question, done.
3. ``Retrieval``: fetch the top-N KB entries, split every article into
   paragraphs, and ask the backend to judge each paragraph. Every ``Relevant``
   paragraph yields one answer candidate; ``Irrelevant`` ones stop there.
4. Rank the candidates and emit the best answer. When nothing was judged
   relevant, fall back to a direct answer or abstain, per config.
"""

from __future__ import annotations

import enum
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .backend import (
    Backend,
    BoundedBackend,
    GenerationRequest,
    GenerationResponse,
    ReflectionToken,
    RequestMode,
    renormalize_reflection,
)
from .errors import BackendError, DataError, ReflectRagError
from .knowledge_base import KnowledgeBase
from .ranking import AnswerCandidate, RankingMode, SRetPolicy, answer_confidence, select_final
from .retrieval import RetrievalMode, top_n

logger = logging.getLogger(__name__)


class FallbackPolicy(str, enum.Enum):
    DIRECT_ANSWER = "direct_answer"
    ABSTAIN = "abstain"


class Branch(str, enum.Enum):
    NO_RETRIEVAL = "no_retrieval"
    RETRIEVAL = "retrieval"


class QuestionCategory(str, enum.Enum):
    STRING = "STRING"
    TIME = "TIME"
    NUMERICAL = "NUMERICAL"


@dataclass
class PipelineConfig:
    top_n: int = 5
    parallelism: int = 1
    fallback: FallbackPolicy = FallbackPolicy.DIRECT_ANSWER
    prompt_template_id: str = "infoseek"
    ranking_mode: RankingMode = RankingMode.RET_REL_ANS
    retrieval_mode: RetrievalMode = RetrievalMode.COMBINED
    s_ret_policy: SRetPolicy = SRetPolicy.AUTO
    max_paragraphs_per_entry: int | None = None
    skip_failed_paragraphs: bool = True
    renormalize_reflection: bool = False
    seed: int = 0

    def __post_init__(self):
        self.fallback = FallbackPolicy(self.fallback)
        self.ranking_mode = RankingMode(self.ranking_mode)
        self.retrieval_mode = RetrievalMode(self.retrieval_mode)
        self.s_ret_policy = SRetPolicy(self.s_ret_policy)
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.max_paragraphs_per_entry is not None and self.max_paragraphs_per_entry < 1:
            raise ValueError("max_paragraphs_per_entry must be >= 1")


@dataclass(frozen=True)
class Query:
    query_id: str
    question: str
    image_ref: str = ""
    image_embedding: tuple[float, ...] = ()
    gold_answers: tuple[str, ...] | None = None
    question_category: QuestionCategory | None = None
    gold_entry_id: str | None = None

    def __post_init__(self):
        if not self.question or not self.question.strip():
            raise ValueError(f"query {self.query_id!r} has an empty question")
        if self.question_category is not None:
            object.__setattr__(self, "question_category", QuestionCategory(self.question_category))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Query":
        try:
            gold = d.get("gold_answers")
            return cls(
                query_id=str(d["query_id"]),
                question=d["question"],
                image_ref=d.get("image_ref", ""),
                image_embedding=tuple(float(x) for x in d.get("image_embedding", ())),
                gold_answers=None if gold is None else tuple(gold),
                question_category=d.get("question_category"),
                gold_entry_id=d.get("gold_entry_id"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed query record: {exc}") from exc


@dataclass(frozen=True)
class TraceEvent:
    step: str
    mode: str | None = None
    token: str | None = None
    prob: float | None = None
    entry_id: str | None = None
    entry_index: int | None = None
    paragraph_index: int | None = None
    detail: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class PipelineResult:
    query_id: str
    branch: Branch | None
    direct_answer: str | None = None
    candidates: list[AnswerCandidate] = field(default_factory=list)
    final_answer: str | None = None
    abstained: bool = False
    trace: list[TraceEvent] = field(default_factory=list)
    retrieved: list[dict[str, Any]] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "branch": None if self.branch is None else self.branch.value,
            "direct_answer": self.direct_answer,
            "candidates": [c.to_dict() for c in self.candidates],
            "final_answer": self.final_answer,
            "abstained": self.abstained,
            "trace": [e.to_dict() for e in self.trace],
            "retrieved": self.retrieved,
            "error": self.error,
        }


def query_seed(seed: int, query_id: str) -> int:
    """Per-query seed so random-mode ranking does not depend on batch order."""
    return (seed * 1_000_003 + zlib.crc32(query_id.encode("utf-8"))) % (2**32)


def _request(query: Query, mode: RequestMode, cfg: PipelineConfig, context: str | None = None) -> GenerationRequest:
    return GenerationRequest(mode, query.question, query.image_ref or None, context, cfg.prompt_template_id)


def _call(backend: Backend, req: GenerationRequest, cfg: PipelineConfig) -> GenerationResponse:
    resp = backend.generate(req).validate_for(req.mode)
    if cfg.renormalize_reflection:
        resp = renormalize_reflection(resp)
    return resp


def _direct_answer(query, backend, cfg, result: PipelineResult, step: str) -> None:
    resp = _call(backend, _request(query, RequestMode.DIRECT_ANSWER, cfg), cfg)
    conf = answer_confidence(resp.answer_token_logprobs)
    result.trace.append(TraceEvent(step, RequestMode.DIRECT_ANSWER.value, prob=conf, detail=resp.answer_text))
    result.direct_answer = resp.answer_text
    result.final_answer = resp.answer_text


def run_query(query: Query, kb: KnowledgeBase, backend: Backend, cfg: PipelineConfig | None = None) -> PipelineResult:
    cfg = cfg or PipelineConfig()
    result = PipelineResult(query.query_id, None)

    ret = _call(backend, _request(query, RequestMode.RETRIEVAL_REFLECTION, cfg), cfg)
    result.trace.append(
        TraceEvent("retrieval_reflection", RequestMode.RETRIEVAL_REFLECTION.value, ret.reflection_token.value, ret.reflection_prob)
    )
    if ret.reflection_token is ReflectionToken.NO_RETRIEVAL:
        result.branch = Branch.NO_RETRIEVAL
        _direct_answer(query, backend, cfg, result, "direct_answer")
        return result

    result.branch = Branch.RETRIEVAL
    if not query.image_embedding:
        raise DataError(f"query {query.query_id!r} needs an image_embedding for retrieval")
    hits = top_n(np.asarray(query.image_embedding), kb, cfg.top_n, cfg.retrieval_mode)
    result.retrieved = [h.to_dict() for h in hits]
    result.trace.append(TraceEvent("retrieve", detail=",".join(h.entry_id for h in hits)))

    jobs = []
    for i, hit in enumerate(hits):
        paragraphs = kb.paragraphs(hit.entry_id)
        if cfg.max_paragraphs_per_entry is not None:
            paragraphs = paragraphs[: cfg.max_paragraphs_per_entry]
        for p in paragraphs:
            jobs.append((i, hit, p))

    def judge(job):
        i, hit, p = job
        req = _request(query, RequestMode.RELEVANCE_AND_ANSWER, cfg, p.text)
        try:
            return job, _call(backend, req, cfg), None
        except BackendError as exc:
            return job, None, exc

    if cfg.parallelism > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            outcomes = list(pool.map(judge, jobs))
    else:
        outcomes = [judge(job) for job in jobs]

    # pool.map preserves job order, which is already (entry_index, paragraph_index)
    for (i, hit, p), resp, exc in outcomes:
        where = dict(entry_id=hit.entry_id, entry_index=i, paragraph_index=p.paragraph_index)
        if exc is not None:
            result.trace.append(TraceEvent("relevance_error", RequestMode.RELEVANCE_AND_ANSWER.value, detail=str(exc), **where))
            if not cfg.skip_failed_paragraphs:
                raise exc
            logger.warning("query %s: paragraph %s/%d failed: %s", query.query_id, hit.entry_id, p.paragraph_index, exc)
            continue
        result.trace.append(
            TraceEvent("relevance_reflection", RequestMode.RELEVANCE_AND_ANSWER.value, resp.reflection_token.value, resp.reflection_prob, **where)
        )
        if resp.reflection_token is ReflectionToken.RELEVANT:
            result.candidates.append(
                AnswerCandidate(
                    answer_text=resp.answer_text,
                    entry_index=i,
                    paragraph_index=p.paragraph_index,
                    s_ret=hit.score,
                    s_rel=resp.reflection_prob,
                    s_ans=answer_confidence(resp.answer_token_logprobs),
                    token_logprobs=tuple(resp.answer_token_logprobs),
                    entry_id=hit.entry_id,
                )
            )

    if result.candidates:
        seed = query_seed(cfg.seed, query.query_id)
        final, ranked = select_final(result.candidates, cfg.ranking_mode, seed, cfg.s_ret_policy)
        result.final_answer = final
        top = ranked[0]
        result.trace.append(
            TraceEvent("rank", detail=cfg.ranking_mode.value, entry_id=top.entry_id, entry_index=top.entry_index, paragraph_index=top.paragraph_index)
        )
    elif cfg.fallback is FallbackPolicy.DIRECT_ANSWER:
        _direct_answer(query, backend, cfg, result, "fallback")
    else:
        result.abstained = True
        result.trace.append(TraceEvent("abstain", detail="no relevant paragraph"))
    return result


def run_batch(
    queries: Sequence[Query],
    kb: KnowledgeBase,
    backend: Backend,
    cfg: PipelineConfig | None = None,
    fail_fast: bool = False,
) -> list[PipelineResult]:
    """Run queries, concurrently up to ``cfg.parallelism``, results in input order.

    Backend calls across the whole batch are capped at ``cfg.parallelism`` in
    flight. A failing query yields a result with ``error`` set unless
    ``fail_fast``.
    """
    cfg = cfg or PipelineConfig()
    bounded = BoundedBackend(backend, cfg.parallelism) if cfg.parallelism > 1 else backend

    def one(q: Query) -> PipelineResult:
        try:
            return run_query(q, kb, bounded, cfg)
        except ReflectRagError as exc:
            if fail_fast:
                raise
            logger.error("query %s failed: %s", q.query_id, exc)
            return PipelineResult(q.query_id, None, error=f"{type(exc).__name__}: {exc}")

    if cfg.parallelism > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            return list(pool.map(one, queries))
    return [one(q) for q in queries]
