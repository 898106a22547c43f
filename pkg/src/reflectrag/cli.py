"""Command-line entry point: ``reflectrag <subcommand> ...``.

Exit codes: 0 ok, 1 configuration/usage error, 2 data error, 3 backend error.
Logs and the resolved-config header go to stderr; data goes to stdout or files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .ablation import ranking_ablation, retrieval_ablation
from .annotation import Source, annotate_corpus, open_judge
from .backend import open_backend
from .config import EngineConfig, resolve_config
from .errors import BackendError, ConfigError, DataError
from .evaluation import MetricReport, ScoringOptions, evaluate_rows, format_table
from .jsonl import dumps, read_jsonl, write_jsonl
from .knowledge_base import ingest_kb, kb_summary, write_sidecar
from .pipeline import Query, run_batch, run_query
from .ranking import RankingMode
from .retrieval import RetrievalMode, top_n
from .training import DataSource, assemble_records

logger = logging.getLogger("reflectrag")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--parallelism", type=int)
    opts = {
        "kb": lambda: p.add_argument("--kb", dest="kb_path", help="knowledge base JSONL"),
        "backend": lambda: p.add_argument("--backend", help="http(s)://server or fixture JSONL path"),
        "top_n": lambda: p.add_argument("--top-n", dest="top_n", type=int),
        "pipeline": lambda: (
            p.add_argument("--ranking-mode", choices=[m.value for m in RankingMode]),
            p.add_argument("--retrieval-mode", choices=[m.value for m in RetrievalMode]),
            p.add_argument("--fallback", choices=["direct_answer", "abstain"]),
            p.add_argument("--prompt-template", dest="prompt_template_id"),
            p.add_argument("--max-paragraphs", dest="max_paragraphs_per_entry", type=int),
        ),
        "eval": lambda: (
            p.add_argument("--relaxed-tol", dest="relaxed_tolerance", type=float),
            p.add_argument("--normalize-dates", action="store_true", default=None),
        ),
    }
    for n in names:
        opts[n]()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reflectrag", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest-kb", help="validate a KB file and report its size")
    _common(p, "kb")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--sidecar", help="write a packed float32 vector cache here")

    p = sub.add_parser("retrieve", help="top-N entries for query image embeddings")
    _common(p, "kb")
    p.add_argument("--query-emb", required=True, help="JSON vector, or JSONL of {query_id, image_embedding, gold_entry_id?}")
    p.add_argument("--n", type=int, dest="top_n")
    p.add_argument("--mode", choices=[m.value for m in RetrievalMode] + ["all"], help="default: config retrieval_mode")
    p.add_argument("--recall-at", help="comma-separated K values; prints Recall@K per mode instead of hits")

    p = sub.add_parser("answer", help="run one query through the pipeline")
    _common(p, "kb", "backend", "top_n", "pipeline")
    p.add_argument("--query", required=True, help="query JSON object or path to one")

    p = sub.add_parser("batch", help="run a JSONL of queries through the pipeline")
    _common(p, "kb", "backend", "top_n", "pipeline", "eval")
    p.add_argument("--queries", required=True)
    p.add_argument("--out", help="results JSONL (default stdout)")
    p.add_argument("--report-out", help="write the evaluation report JSON here")
    p.add_argument("--ablate-ranking", action="store_true", help="score every ranking mode (needs gold)")
    p.add_argument("--splits", help="comma-separated split order for reports")

    p = sub.add_parser("eval", help="score predictions against gold")
    _common(p, "eval")
    p.add_argument("--predictions", required=True, help="JSONL of {query_id, predicted, [split, category, gold]}")
    p.add_argument("--gold", help="JSONL of {query_id, split, category, gold}")
    p.add_argument("--splits", help="comma-separated split order")
    p.add_argument("--out", help="write the report JSON here")
    p.add_argument("--format", choices=["table", "json"], default="table")

    p = sub.add_parser("annotate", help="build relevance-annotated records")
    _common(p)
    p.add_argument("--source", required=True, choices=["infoseek", "nq", "enc-vqa"])
    p.add_argument("--judge", help="'heuristic' or 'remote:<url>' (infoseek only)")
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="AnnotationRecord JSONL (default stdout)")
    p.add_argument("--max-distractors", type=int, help="nq: sample at most this many distractors")
    p.add_argument("--keep-flagged", action="store_true")

    p = sub.add_parser("export-training", help="assemble instruction-tuning records")
    _common(p)
    p.add_argument("--format", choices=["jsonl"], default="jsonl")
    p.add_argument("--visual-it", help="JSONL of {sample_id, question, image_ref, answer}")
    p.add_argument("--annotations", help="AnnotationRecord JSONL")
    p.add_argument("--out", help="default stdout")

    p = sub.add_parser("report", help="render a saved report JSON as a table")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["table", "json"], default="table")
    return parser


def _resolve(args: argparse.Namespace) -> EngineConfig:
    cfg = resolve_config(getattr(args, "config", None), vars(args))
    sys.stderr.write(dumps({"event": "config", "command": args.command, "config": cfg.to_dict()}) + "\n")
    return cfg


def _need(value: Any, flag: str) -> Any:
    if value is None:
        raise ConfigError(f"{flag} is required (flag or config file)")
    return value


def _out(path: str | None):
    return open(path, "w", encoding="utf-8") if path else sys.stdout


def _splits(arg: str | None) -> list[str] | None:
    return [s.strip() for s in arg.split(",") if s.strip()] if arg else None


def _load_json_arg(arg: str) -> Any:
    try:
        text = Path(arg).read_text(encoding="utf-8")
    except OSError:
        text = arg
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"cannot parse JSON from {arg[:60]!r}: {exc.msg}") from exc


def cmd_ingest(args, cfg: EngineConfig) -> int:
    kb = ingest_kb(_need(cfg.kb_path, "--kb"), normalize=not args.no_normalize, min_paragraph_chars=cfg.min_paragraph_chars)
    if args.sidecar:
        write_sidecar(kb, args.sidecar)
    print(dumps(kb_summary(kb)))
    return EXIT_OK


def _query_rows(arg: str) -> list[dict[str, Any]]:
    p = Path(arg)
    if not p.exists():
        raise DataError(f"query embedding file not found: {arg}")
    text = p.read_text(encoding="utf-8").strip()
    if text.startswith("["):
        return [{"query_id": "q0", "image_embedding": json.loads(text)}]
    return read_jsonl(p)


def cmd_retrieve(args, cfg: EngineConfig) -> int:
    kb = ingest_kb(_need(cfg.kb_path, "--kb"), min_paragraph_chars=cfg.min_paragraph_chars)
    rows = _query_rows(args.query_emb)
    mode_arg = args.mode or cfg.retrieval_mode
    modes = list(RetrievalMode) if mode_arg == "all" else [RetrievalMode(mode_arg)]
    if args.recall_at:
        ks = [int(k) for k in args.recall_at.split(",")]
        queries = [
            Query(str(r.get("query_id", n)), r.get("question") or "-", image_embedding=tuple(r["image_embedding"]),
                  gold_entry_id=r.get("gold_entry_id"))
            for n, r in enumerate(rows)
        ]
        print(dumps(retrieval_ablation(queries, kb, ks, modes)))
        return EXIT_OK
    for r in rows:
        for mode in modes:
            for hit in top_n(np.asarray(r["image_embedding"], dtype=float), kb, cfg.top_n, mode):
                rec = hit.to_dict()
                if len(rows) > 1 or "query_id" in r:
                    rec["query_id"] = r.get("query_id")
                if len(modes) > 1:
                    rec["mode"] = mode.value
                print(dumps(rec))
    return EXIT_OK


def cmd_answer(args, cfg: EngineConfig) -> int:
    kb = ingest_kb(_need(cfg.kb_path, "--kb"), min_paragraph_chars=cfg.min_paragraph_chars)
    backend = open_backend(_need(cfg.backend, "--backend"))
    query = Query.from_dict(_load_json_arg(args.query))
    result = run_query(query, kb, backend, cfg.pipeline_config())
    print(json.dumps(result.to_dict(), sort_keys=True, indent=2, ensure_ascii=False))
    return EXIT_OK


def _scoring(cfg: EngineConfig) -> ScoringOptions:
    return ScoringOptions(relaxed_tolerance=cfg.relaxed_tolerance, normalize_dates=cfg.normalize_dates)


def _gold_rows(raw: list[dict[str, Any]]) -> dict[str, dict[str, Any]]:
    gold = {}
    for r in raw:
        if r.get("gold_answers") is None:
            continue
        cat = r.get("category") or r.get("question_category") or "STRING"
        g = r["gold_answers"]
        if str(cat).upper() == "NUMERICAL" and len(g) == 1:
            g = g[0]
        gold[str(r["query_id"])] = {"split": r.get("split", "all"), "category": cat, "gold": g}
    return gold


def cmd_batch(args, cfg: EngineConfig) -> int:
    kb = ingest_kb(_need(cfg.kb_path, "--kb"), min_paragraph_chars=cfg.min_paragraph_chars)
    backend = open_backend(_need(cfg.backend, "--backend"))
    raw = read_jsonl(args.queries)
    queries = [Query.from_dict(r) for r in raw]
    results = run_batch(queries, kb, backend, cfg.pipeline_config())
    out = _out(args.out)
    try:
        for r in results:
            out.write(dumps(r.to_dict()) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    failed = sum(r.error is not None for r in results)
    logger.info("batch: %d queries, %d failed", len(results), failed)

    gold = _gold_rows(raw)
    if gold and len(gold) == len(results):
        opts, splits = _scoring(cfg), _splits(args.splits)
        if args.ablate_ranking:
            reports = ranking_ablation(results, gold, opts, splits, cfg.random_seeds, cfg.seed, cfg.s_ret_policy)
        else:
            rows = [{**gold[r.query_id], "query_id": r.query_id, "predicted": r.final_answer or ""} for r in results]
            reports = {cfg.ranking_mode: evaluate_rows(rows, opts, splits)[0]}
        sys.stderr.write(format_table(reports) + "\n")
        if args.report_out:
            Path(args.report_out).write_text(dumps({k: v.to_dict() for k, v in reports.items()}) + "\n", encoding="utf-8")
    elif args.ablate_ranking:
        raise DataError("--ablate-ranking needs gold_answers on every query")
    return EXIT_OK


def cmd_eval(args, cfg: EngineConfig) -> int:
    preds = read_jsonl(args.predictions)
    if args.gold:
        gold = {str(g["query_id"]): g for g in read_jsonl(args.gold)}
        rows = []
        for p in preds:
            qid = str(p["query_id"])
            if qid not in gold:
                raise DataError(f"prediction for unknown query_id {qid!r}")
            rows.append({**gold[qid], "query_id": qid, "predicted": p.get("predicted", "")})
        missing = set(gold) - {str(p["query_id"]) for p in preds}
        if missing:
            logger.warning("%d gold queries have no prediction; scored as wrong", len(missing))
            rows.extend({**gold[q], "query_id": q, "predicted": ""} for q in sorted(missing))
    else:
        rows = preds
    report, _ = evaluate_rows(rows, _scoring(cfg), _splits(args.splits))
    if args.out:
        Path(args.out).write_text(dumps(report.to_dict()) + "\n", encoding="utf-8")
    print(dumps(report.to_dict()) if args.format == "json" else format_table(report))
    return EXIT_OK


def cmd_annotate(args, cfg: EngineConfig) -> int:
    source = Source(args.source.replace("-", "_"))
    judge = open_judge(args.judge or cfg.judge) if source is Source.INFOSEEK else None
    run = annotate_corpus(
        read_jsonl(args.input), source, judge, cfg.min_paragraph_chars, args.max_distractors, cfg.seed, cfg.parallelism
    )
    records = run.records if args.keep_flagged else run.exported
    out = _out(args.out)
    try:
        for r in records:
            out.write(dumps(r.to_dict()) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    for sid, reason in run.excluded:
        logger.info("excluded %s: %s", sid, reason)
    sys.stderr.write(dumps({"event": "annotate", "written": len(records), "excluded": len(run.excluded)}) + "\n")
    return EXIT_OK


def cmd_export(args, cfg: EngineConfig) -> int:
    if not args.visual_it and not args.annotations:
        raise ConfigError("export-training needs --visual-it and/or --annotations")
    records = []
    if args.visual_it:
        records += assemble_records(read_jsonl(args.visual_it), DataSource.VISUAL_IT)
    if args.annotations:
        records += assemble_records(read_jsonl(args.annotations), DataSource.MR2AG_IT)
    if args.out:
        write_jsonl(args.out, (r.to_dict() for r in records))
    else:
        for r in records:
            print(dumps(r.to_dict()))
    counts = {k: sum(r.kind.value == k for r in records) for k in ("L1", "L2_relevant", "L2_irrelevant")}
    sys.stderr.write(dumps({"event": "export-training", "records": counts}) + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    data = _load_json_arg(args.input)
    if "overall" in data:
        reports: MetricReport | dict[str, MetricReport] = MetricReport.from_dict(data)
    else:
        # saved JSON has sorted keys; put ranking modes back in their canonical order
        order = {m.value: i for i, m in enumerate(RankingMode)}
        keys = sorted(data, key=lambda k: (order.get(k, len(order)), k))
        reports = {k: MetricReport.from_dict(data[k]) for k in keys}
    print(dumps(data) if args.format == "json" else format_table(reports))
    return EXIT_OK


COMMANDS = {
    "ingest-kb": cmd_ingest,
    "retrieve": cmd_retrieve,
    "answer": cmd_answer,
    "batch": cmd_batch,
    "eval": cmd_eval,
    "annotate": cmd_annotate,
    "export-training": cmd_export,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except BackendError as exc:
        logger.error("backend error: %s", exc)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
