"""Time the buffered engine across simulated device fleet sizes.

Every fleet size must produce the same result digest; the wall-time
column only says how well the host's cores back the simulated devices.
"""

import argparse
import json

from bufferknn.bench import result_digest, run_engine
from bufferknn.core import SearchParams
from bufferknn.datasets import gen_synthetic


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--m", type=int, default=4000)
    ap.add_argument("--dim", type=int, default=8)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--height", type=int, default=5)
    ap.add_argument("--fleets", default="1,2,4", help="comma-separated fleet sizes")
    ap.add_argument("--query-chunk-size", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="write rows as JSON")
    args = ap.parse_args()

    refs = gen_synthetic(args.n, args.dim, seed=args.seed)
    queries = gen_synthetic(args.m, args.dim, seed=args.seed + 1)
    params = SearchParams(k=args.k)

    rows = []
    base = None
    digest = None
    for devs in [int(x) for x in args.fleets.split(",")]:
        res, info = run_engine("bufferkdtree", refs, queries.data, params,
                               height=args.height, devices=devs,
                               query_chunk_size=args.query_chunk_size)
        d = result_digest(res)
        if digest is None:
            digest = d
        elif d != digest:
            raise SystemExit(f"digest changed with {devs} devices: {d[:16]}")
        t = info["query_seconds"]
        base = base if base is not None else t
        rows.append({"devices": devs, "query_seconds": t, "speedup": base / t})
        print(f"devices={devs}: {t:.3f}s  speedup {base / t:.2f}x")
    print(f"digest {digest[:16]} identical across fleets")

    if args.out:
        with open(args.out, "w") as f:
            json.dump({"digest": digest, "rows": rows}, f, indent=2)
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
