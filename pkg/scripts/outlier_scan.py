"""Score a planted-outlier instance and check the planted rows surface.

Generates a uniform cloud with a few rows moved far outside it, ranks
every point by its mean k-NN distance, and reports whether the planted
rows occupy the top ranks.
"""

import argparse

from bufferknn.bench import run_engine
from bufferknn.datasets import gen_outlier_instance
from bufferknn.outliers import outlier_scores, rank_outliers, self_excluded_knn


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=5)
    ap.add_argument("--outliers", type=int, default=10)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--engine", default="bufferkdtree",
                    choices=("brute", "kdtree", "bufferkdtree"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    pts, planted = gen_outlier_instance(args.n, args.dim, args.outliers,
                                        seed=args.seed)

    def engine(refs, queries, params):
        res, _ = run_engine(args.engine, refs, queries, params)
        return res

    _, sq = self_excluded_knn(pts, args.k, engine)
    scores = outlier_scores(sq)
    order = rank_outliers(scores)

    top = order[:args.outliers]
    hits = len(set(top.tolist()) & set(planted.tolist()))
    print(f"planted rows: {planted.tolist()}")
    print("rank\tindex\tscore\tplanted")
    for r, i in enumerate(top, start=1):
        mark = "yes" if i in set(planted.tolist()) else ""
        print(f"{r}\t{i}\t{scores[i]:.4f}\t{mark}")
    print(f"{hits}/{args.outliers} planted rows in the top {args.outliers}")


if __name__ == "__main__":
    main()
