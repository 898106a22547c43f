"""Answer post-processing ablation: accuracy under each of the eight ranking modes.

Runs the pipeline once over a synthetic world (scripted backend), then
re-ranks the stored candidates under every mode. Random is averaged over
``--random-seeds`` seeds. Output is one row per mode, split columns then
Overall.
"""

import argparse
import json
import logging
import tempfile

from reflectrag.ablation import ranking_ablation
from reflectrag.backend import ScriptedBackend, scripted_backend_from_fixture
from reflectrag.evaluation import ScoringOptions, format_table
from reflectrag.jsonl import write_jsonl
from reflectrag.knowledge_base import build_kb
from reflectrag.pipeline import PipelineConfig, Query, run_batch
from reflectrag.synthetic import SPLITS, synthetic_world

# row order of the comparison table
ROWS = ["random", "ans", "ret", "rel", "ret_ans", "rel_ans", "ret_rel", "ret_rel_ans"]


def load_backend(rows, tmpdir) -> ScriptedBackend:
    path = f"{tmpdir}/fixture.jsonl"
    write_jsonl(path, rows)
    return scripted_backend_from_fixture(path)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queries", type=int, default=400)
    ap.add_argument("--entries", type=int, default=100)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--top-n", type=int, default=5)
    ap.add_argument("--random-seeds", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="print the reports as JSON instead of a table")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    world = synthetic_world(args.queries, args.entries, args.dim, args.seed)
    kb = build_kb(world.kb_rows)
    with tempfile.TemporaryDirectory() as d:
        backend = load_backend(world.fixture_rows, d)
    queries = [Query.from_dict(r) for r in world.query_rows]
    results = run_batch(queries, kb, backend, PipelineConfig(top_n=args.top_n, seed=args.seed))
    gold = {r["query_id"]: {"split": r["split"], "category": r["question_category"], "gold": r["gold_answers"]}
            for r in world.query_rows}
    reports = ranking_ablation(results, gold, ScoringOptions(), list(SPLITS), args.random_seeds, args.seed)
    ordered = {m: reports[m] for m in ROWS}
    if args.json:
        print(json.dumps({m: r.to_dict() for m, r in ordered.items()}, indent=2))
    else:
        print(format_table(ordered, title=f"ranking ablation, {args.queries} queries, top-{args.top_n}"))


if __name__ == "__main__":
    main()
