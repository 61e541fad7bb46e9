"""Measure how splitting the leaf structure into chunks affects wall time.

Runs the buffered engine over a range of chunk counts on one synthetic
workload and prints the time relative to the single-chunk run.  With the
copy throttle enabled the transfers take simulated time, so the table
shows how well the pipeline hides them.
"""

import argparse
import json

import numpy as np

from bufferknn.bench import run_engine
from bufferknn.core import SearchParams
from bufferknn.datasets import gen_synthetic


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--m", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=8)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--height", type=int, default=5)
    ap.add_argument("--chunks", default="1,2,4,8,16",
                    help="comma-separated chunk counts")
    ap.add_argument("--copy-rate", type=float, default=None,
                    help="simulated copy throughput, bytes per second")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="write rows as JSON")
    args = ap.parse_args()

    refs = gen_synthetic(args.n, args.dim, seed=args.seed)
    queries = gen_synthetic(args.m, args.dim, seed=args.seed + 1)
    params = SearchParams(k=args.k)

    rows = []
    base = None
    for num in [int(x) for x in args.chunks.split(",")]:
        _, info = run_engine("bufferkdtree", refs, queries.data, params,
                             height=args.height, num_chunks=num,
                             copy_rate=args.copy_rate, collect_stats=True)
        t = info["query_seconds"]
        base = base if base is not None else t
        rows.append({"num_chunks": num, "query_seconds": t, "ratio": t / base,
                     "copy_seconds": info["phase_seconds"].get("copy", 0.0),
                     "compute_seconds": info["phase_seconds"].get("compute", 0.0)})
        print(f"N={num:>3}: {t:.3f}s  ratio {t / base:.3f}  "
              f"copy {rows[-1]['copy_seconds']:.3f}s  "
              f"compute {rows[-1]['compute_seconds']:.3f}s")

    if args.out:
        with open(args.out, "w") as f:
            json.dump(rows, f, indent=2)
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
