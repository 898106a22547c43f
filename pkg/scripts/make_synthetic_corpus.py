"""Write a seeded synthetic KB, backend fixture, query set and Enc-VQA corpus.

The outputs plug straight into the CLI, e.g.

    python3 scripts/make_synthetic_corpus.py --out data/
    reflectrag batch --kb data/kb.jsonl --backend data/fixture.jsonl \
        --queries data/queries.jsonl --splits unseen_question,unseen_entity --ablate-ranking
"""

import argparse
import logging
from pathlib import Path

from reflectrag.jsonl import write_jsonl
from reflectrag.synthetic import synthetic_enc_vqa, synthetic_world

log = logging.getLogger("make_synthetic_corpus")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--entries", type=int, default=100)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--enc-vqa", type=int, default=200, help="Enc-VQA samples")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    args.out.mkdir(parents=True, exist_ok=True)
    world = synthetic_world(args.queries, args.entries, args.dim, args.seed)
    enc = synthetic_enc_vqa(args.enc_vqa, seed=args.seed)
    for name, rows in [
        ("kb.jsonl", world.kb_rows),
        ("fixture.jsonl", world.fixture_rows),
        ("queries.jsonl", world.query_rows),
        ("enc_vqa.jsonl", enc.samples),
    ]:
        n = write_jsonl(args.out / name, rows)
        log.info("wrote %s (%d lines)", args.out / name, n)
    log.info("enc_vqa: %d clean, %d with planted violations", len(enc.clean_ids), len(enc.planted))


if __name__ == "__main__":
    main()
