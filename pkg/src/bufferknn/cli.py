"""Command line front end.

Subcommands: ``gen`` (synthetic datasets), ``build`` (construct and
audit a tree), ``query`` (batch k-NN), ``outliers`` (score a set against
itself), ``bench`` (compare engines).  Shared flags keep the same names
everywhere; sizes in bytes accept K/M/G suffixes.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .core import SearchParams
from .buffer_tree import build_buffer_tree, validate_structure
from .bench import (BenchConfig, BenchReport, DEFAULT_DEVICE_MEMORY, ENGINES,
                    DigestMismatchError, auto_height, result_digest, run_benchmark,
                    run_engine)
from .datasets import DatasetFormatError, gen_synthetic, load_dataset, write_dataset
from .device import DeviceConfigError
from .outliers import outlier_scores, rank_outliers, self_excluded_knn

__all__ = ["main"]


def _parse_bytes(text: str) -> int:
    scale = {"k": 2 ** 10, "m": 2 ** 20, "g": 2 ** 30}
    t = text.strip().lower()
    if t and t[-1] in scale:
        return int(float(t[:-1]) * scale[t[-1]])
    return int(t)


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, default=10, help="neighbours per query")
    p.add_argument("--engine", choices=ENGINES, default="bufferkdtree")
    p.add_argument("--height", type=int, default=None,
                   help="tree height (default: sized from n)")
    p.add_argument("--num-chunks", type=int, default=None,
                   help="leaf-structure chunks (default: sized from device memory)")
    p.add_argument("--devices", type=int, default=1)
    p.add_argument("--device-memory", type=_parse_bytes, default=DEFAULT_DEVICE_MEMORY,
                   help="per-device byte budget, K/M/G suffixes allowed (default 512M)")
    p.add_argument("--copy-rate", type=float, default=None,
                   help="simulated copy throughput, bytes per second")
    p.add_argument("--buffer-capacity", type=int, default=None,
                   help="per-leaf query buffer slots (default: 2**(24 - height))")
    p.add_argument("--fetch-multiple", type=int, default=10,
                   help="queries fetched per round, in buffer capacities")
    p.add_argument("--query-chunk-size", type=int, default=None,
                   help="max queries resident per device at once")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--trace-out", default=None, help="device timeline CSV path")
    p.add_argument("--report-out", default=None, help="metrics JSON path")


def _engine_kwargs(args: argparse.Namespace) -> dict:
    return dict(height=args.height, num_chunks=args.num_chunks, devices=args.devices,
                device_memory=args.device_memory, copy_rate=args.copy_rate,
                buffer_capacity=args.buffer_capacity, fetch_multiple=args.fetch_multiple,
                query_chunk_size=args.query_chunk_size, workers=args.workers,
                trace_out=args.trace_out)


def _write_report(path: str | None, payload: dict) -> None:
    if path is not None:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _cmd_gen(args) -> int:
    pts = gen_synthetic(args.n, args.dim, kind=args.kind, seed=args.seed,
                        components=args.components)
    write_dataset(args.out, pts, fmt=args.format)
    print(f"wrote {pts.n} x {pts.d} points to {args.out} ({args.format})")
    return 0


def _cmd_build(args) -> int:
    refs = load_dataset(args.data)
    h = args.height if args.height is not None else auto_height(refs.n)
    t0 = time.perf_counter()
    tree = build_buffer_tree(refs, h, store_path=args.store)
    secs = time.perf_counter() - t0
    validate_structure(tree, refs)
    print(f"built height-{h} tree over {tree.n} x {tree.d} points: "
          f"{tree.n_leaves} leaves, {secs:.3f}s, structure audit passed")
    if args.out is not None:
        np.savez(args.out, points=np.asarray(tree.leaves.points),
                 original_index=tree.leaves.original_index,
                 leaf_starts=tree.leaves.leaf_starts,
                 split_values=tree.top.split_values, levels=tree.top.levels,
                 height=np.int64(h))
        print(f"saved tree arrays to {args.out}")
    _write_report(args.report_out, {"n": tree.n, "d": tree.d, "height": h,
                                    "n_leaves": tree.n_leaves,
                                    "build_seconds": secs})
    return 0


def _cmd_query(args) -> int:
    refs = load_dataset(args.refs)
    queries = load_dataset(args.queries)
    params = SearchParams(k=args.k)
    res, info = run_engine(args.engine, refs, queries.data, params,
                           collect_stats=True, **_engine_kwargs(args))
    info["digest"] = result_digest(res)
    if args.out is not None:
        np.savez(args.out, indices=res.indices, sq_dists=res.sq_dists)
        print(f"saved neighbours to {args.out}")
    print(f"{args.engine}: {queries.n} queries x k={args.k} in "
          f"{info['query_seconds']:.3f}s, digest {info['digest'][:16]}")
    _write_report(args.report_out, info)
    return 0


def _cmd_outliers(args) -> int:
    pts = load_dataset(args.data)
    infos: list[dict] = []

    def engine(refs, queries, params):
        res, info = run_engine(args.engine, refs, queries, params,
                               collect_stats=True, **_engine_kwargs(args))
        infos.append(info)
        return res

    t0 = time.perf_counter()
    _, sq = self_excluded_knn(pts, args.k, engine)
    scores = outlier_scores(sq)
    order = rank_outliers(scores)
    secs = time.perf_counter() - t0
    top = order[:args.top]
    print(f"scored {pts.n} points with {args.engine} (k={args.k}) in {secs:.3f}s")
    print("rank\tindex\tscore")
    for r, i in enumerate(top, start=1):
        print(f"{r}\t{i}\t{scores[i]:.6f}")
    if args.out is not None:
        with open(args.out, "w") as f:
            f.write("rank,index,score\n")
            for r, i in enumerate(order, start=1):
                f.write(f"{r},{i},{scores[i]:.9g}\n")
        print(f"saved full ranking to {args.out}")
    _write_report(args.report_out, {"n": pts.n, "k": args.k, "engine": args.engine,
                                    "seconds": secs,
                                    "top": [[int(i), float(scores[i])] for i in top],
                                    "search": infos[0] if infos else {}})
    return 0


def _cmd_bench(args) -> int:
    refs = load_dataset(args.refs)
    queries = load_dataset(args.queries)
    config = BenchConfig(engines=tuple(args.engines.split(",")), k=args.k,
                         height=args.height, num_chunks=args.num_chunks,
                         devices=args.devices, device_memory=args.device_memory,
                         copy_rate=args.copy_rate,
                         buffer_capacity=args.buffer_capacity,
                         fetch_multiple=args.fetch_multiple,
                         query_chunk_size=args.query_chunk_size,
                         workers=args.workers, trace_out=args.trace_out,
                         measure_chunk_ratio=args.measure_chunk_ratio,
                         measure_device_speedup=args.measure_device_speedup)
    report: BenchReport = run_benchmark(refs, queries.data, config)
    for engine, info in report.results.items():
        print(f"{engine}: build {info['build_seconds']:.3f}s, "
              f"query {info['query_seconds']:.3f}s")
    print(f"digest {report.digest[:16]} (all engines agree)")
    for key, val in report.extras.items():
        print(f"{key}: {val:.3f}")
    if args.report_out is not None:
        report.save(args.report_out)
        print(f"saved report to {args.report_out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bufferknn",
                                 description="batched k-NN with a buffered tree "
                                             "over a constrained-memory device")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--kind", choices=("uniform", "mixture"), default="uniform")
    g.add_argument("--components", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=("binary", "csv"), default="binary")
    g.set_defaults(fn=_cmd_gen)

    b = sub.add_parser("build", help="build a tree and audit its structure")
    b.add_argument("--data", required=True)
    b.add_argument("--height", type=int, default=None)
    b.add_argument("--store", default=None,
                   help="store rearranged leaf points here and memory-map them")
    b.add_argument("--out", default=None, help="save tree arrays to this .npz")
    b.add_argument("--report-out", default=None)
    b.set_defaults(fn=_cmd_build)

    q = sub.add_parser("query", help="batch k-NN of queries against references")
    q.add_argument("--refs", required=True)
    q.add_argument("--queries", required=True)
    q.add_argument("--out", default=None, help="save indices and distances (.npz)")
    _add_engine_flags(q)
    q.set_defaults(fn=_cmd_query)

    o = sub.add_parser("outliers", help="rank points by mean neighbour distance")
    o.add_argument("--data", required=True)
    o.add_argument("--top", type=int, default=10)
    o.add_argument("--out", default=None, help="save the full ranking (CSV)")
    _add_engine_flags(o)
    o.set_defaults(fn=_cmd_outliers)

    be = sub.add_parser("bench", help="compare engines on one workload")
    be.add_argument("--refs", required=True)
    be.add_argument("--queries", required=True)
    be.add_argument("--engines", default=",".join(ENGINES),
                    help="comma-separated engine list")
    be.add_argument("--measure-chunk-ratio", action="store_true",
                    help="also time a single-chunk run and report the ratio")
    be.add_argument("--measure-device-speedup", action="store_true",
                    help="also time a single-device run and report the speedup")
    _add_engine_flags(be)
    be.set_defaults(fn=_cmd_bench)
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (DatasetFormatError, DeviceConfigError, DigestMismatchError, ValueError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
