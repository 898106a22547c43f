"""Ablation harnesses: ranking modes, retrieval modes, number of retrieved entries."""

from __future__ import annotations

from typing import Any, Iterable, Sequence

import numpy as np

from .evaluation import MetricReport, ScoringOptions, aggregate, report_header, score_row
from .knowledge_base import KnowledgeBase
from .pipeline import PipelineResult, Query, query_seed
from .ranking import RankingMode, SRetPolicy, select_final
from .retrieval import RetrievalMode, recall_at_k, top_n


def answer_under_mode(
    result: PipelineResult,
    mode: RankingMode,
    seed: int = 0,
    s_ret_policy: SRetPolicy = SRetPolicy.AUTO,
) -> str | None:
    """Final answer ``result`` would have produced under another ranking mode."""
    if not result.candidates:
        return result.final_answer
    return select_final(result.candidates, mode, query_seed(seed, result.query_id), s_ret_policy)[0]


def ranking_ablation(
    results: Sequence[PipelineResult],
    gold_rows: dict[str, dict[str, Any]],
    opts: ScoringOptions = ScoringOptions(),
    splits: Sequence[str] | None = None,
    random_seeds: int = 5,
    seed: int = 0,
    s_ret_policy: SRetPolicy = SRetPolicy.AUTO,
) -> dict[str, MetricReport]:
    """Re-rank stored candidates under every mode and score each against gold.

    ``gold_rows`` maps query_id to ``{split, category, gold}``. Random mode is
    averaged over ``random_seeds`` seeds (split averages and overall alike).
    """
    out: dict[str, MetricReport] = {}
    for mode in RankingMode:
        seeds = range(seed, seed + random_seeds) if mode is RankingMode.RANDOM else [seed]
        reports = []
        for s in seeds:
            outcomes = []
            for r in results:
                g = gold_rows[r.query_id]
                pred = answer_under_mode(r, mode, s, s_ret_policy)
                outcomes.append(score_row({**g, "query_id": r.query_id, "predicted": pred or ""}, opts))
            reports.append(aggregate(outcomes, splits, report_header(opts)))
        out[mode.value] = reports[0] if len(reports) == 1 else _mean_report(reports)
    return out


def _mean_report(reports: list[MetricReport]) -> MetricReport:
    first = reports[0]
    split_avgs = {s: float(np.mean([r.split_averages[s] for r in reports])) for s in first.splits}
    per_cat = {
        s: {c: float(np.mean([r.per_category[s][c] for r in reports])) for c in first.per_category[s]}
        for s in first.splits
    }
    overall = float(np.mean([r.overall for r in reports]))
    header = {**first.header, "averaged_over_seeds": len(reports)}
    return MetricReport(first.splits, split_avgs, per_cat, first.counts, overall, header)


def retrieval_ablation(
    queries: Iterable[Query],
    kb: KnowledgeBase,
    ks: Sequence[int] = (1, 10, 20),
    modes: Sequence[RetrievalMode] = tuple(RetrievalMode),
) -> dict[str, dict[str, float]]:
    """Recall@K of the gold entry for each retrieval mode."""
    queries = [q for q in queries if q.gold_entry_id is not None]
    if not queries:
        raise ValueError("retrieval ablation needs queries with gold_entry_id")
    kmax = max(ks)
    table: dict[str, dict[str, float]] = {}
    for mode in modes:
        runs = [(q.gold_entry_id, top_n(np.asarray(q.image_embedding), kb, kmax, mode)) for q in queries]
        table[RetrievalMode(mode).value] = {f"R@{k}": recall_at_k(runs, k) for k in ks}
    return table
