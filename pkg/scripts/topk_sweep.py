"""Accuracy and relevance-call cost as the number of retrieved entries grows.

Every retrieved paragraph costs one relevance call, so cost grows with N
while accuracy saturates once the gold entry is usually inside the top N.
"""

import argparse
import logging
import tempfile

from reflectrag.backend import RequestMode, scripted_backend_from_fixture
from reflectrag.evaluation import evaluate_rows
from reflectrag.jsonl import write_jsonl
from reflectrag.knowledge_base import build_kb
from reflectrag.pipeline import PipelineConfig, Query, run_batch
from reflectrag.synthetic import SPLITS, synthetic_world


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ns", default="1,3,5,10,20")
    ap.add_argument("--queries", type=int, default=300)
    ap.add_argument("--entries", type=int, default=100)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--noise", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    world = synthetic_world(args.queries, args.entries, args.dim, args.seed, noise=args.noise)
    kb = build_kb(world.kb_rows)
    queries = [Query.from_dict(r) for r in world.query_rows]
    gold = {r["query_id"]: r for r in world.query_rows}

    print(f"{'N':>4}  {'overall':>8}  {'rel calls/query':>16}")
    with tempfile.TemporaryDirectory() as d:
        fixture = f"{d}/fixture.jsonl"
        write_jsonl(fixture, world.fixture_rows)
        for n in (int(x) for x in args.ns.split(",")):
            backend = scripted_backend_from_fixture(fixture)
            results = run_batch(queries, kb, backend, PipelineConfig(top_n=n))
            rows = [{"query_id": r.query_id, "split": gold[r.query_id]["split"], "category": "STRING",
                     "predicted": r.final_answer or "", "gold": gold[r.query_id]["gold_answers"]} for r in results]
            report, _ = evaluate_rows(rows, splits=list(SPLITS))
            calls = len(backend.calls_by_mode(RequestMode.RELEVANCE_AND_ANSWER)) / len(queries)
            print(f"{n:>4}  {report.overall:>8.1f}  {calls:>16.2f}")


if __name__ == "__main__":
    main()
