"""Recall@K of the gold entry for cross-modal, uni-modal and combined scoring."""

import argparse
import logging

from reflectrag.ablation import retrieval_ablation
from reflectrag.knowledge_base import build_kb
from reflectrag.pipeline import Query
from reflectrag.synthetic import synthetic_world


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ks", default="1,5,10,20")
    ap.add_argument("--queries", type=int, default=500)
    ap.add_argument("--entries", type=int, default=500)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--noise", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    world = synthetic_world(args.queries, args.entries, args.dim, args.seed, noise=args.noise)
    kb = build_kb(world.kb_rows)
    queries = [Query.from_dict(r) for r in world.query_rows]
    ks = [int(k) for k in args.ks.split(",")]
    table = retrieval_ablation(queries, kb, ks)
    print(f"{'mode':<18}" + "".join(f"{'R@' + str(k):>8}" for k in ks))
    for mode, row in table.items():
        print(f"{mode:<18}" + "".join(f"{100 * row[f'R@{k}']:>8.1f}" for k in ks))


if __name__ == "__main__":
    main()
