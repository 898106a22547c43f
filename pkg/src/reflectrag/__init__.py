"""Reflection-gated multimodal retrieval-augmented answering engine."""

__version__ = "0.1.0"

from .backend import GenerationRequest, GenerationResponse, ReflectionToken, RequestMode, ScriptedBackend
from .knowledge_base import KbEntry, KnowledgeBase, Paragraph, ingest_kb, segment_article
from .pipeline import PipelineConfig, PipelineResult, Query, run_batch, run_query
from .ranking import AnswerCandidate, RankingMode, answer_confidence, composite_score, select_final
from .retrieval import RetrievalHit, RetrievalMode, cosine_similarity, recall_at_k, top_n

__all__ = [
    "AnswerCandidate",
    "GenerationRequest",
    "GenerationResponse",
    "KbEntry",
    "KnowledgeBase",
    "Paragraph",
    "PipelineConfig",
    "PipelineResult",
    "Query",
    "RankingMode",
    "ReflectionToken",
    "RequestMode",
    "RetrievalHit",
    "RetrievalMode",
    "ScriptedBackend",
    "answer_confidence",
    "composite_score",
    "cosine_similarity",
    "ingest_kb",
    "recall_at_k",
    "run_batch",
    "run_query",
    "segment_article",
    "select_final",
    "top_n",
]
