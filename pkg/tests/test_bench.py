import json

import numpy as np
import pytest

from bufferknn.bench import (
    BenchConfig,
    BenchReport,
    DigestMismatchError,
    auto_height,
    auto_num_chunks,
    query_block_bytes,
    result_digest,
    run_benchmark,
    run_engine,
)
from bufferknn.core import NeighborBatch, SearchParams
from bufferknn.device import chunk_required


class TestResultDigest:
    def test_accepts_batch_or_array(self, rng):
        nb = NeighborBatch(3, 2)
        nb.set_rows(np.arange(3), np.sort(rng.integers(0, 2**40, (3, 2)).astype(np.uint64),
                                          axis=1), 2)
        assert result_digest(nb) == result_digest(nb.indices)

    def test_sensitive_to_indices_only(self):
        a = np.array([[1, 2], [3, 4]], dtype=np.int64)
        assert result_digest(a) == result_digest(a.astype(np.int32))
        assert result_digest(a) != result_digest(a[::-1])


class TestAutoSizing:
    def test_auto_height_bands(self):
        assert auto_height(10) == 1
        assert auto_height(64) == 1
        assert auto_height(128) == 2
        assert auto_height(4096) == 7
        assert auto_height(10 ** 7) == 9

    def test_auto_num_chunks_fits_budget(self):
        n, d, k = 50_000, 8, 10
        qb = query_block_bytes(1000, d, k)
        for cap in [qb + 4_000, qb + 40_000, qb + 10 ** 7]:
            num = auto_num_chunks(n, d, qb, cap)
            max_len = -(-n // num)
            assert 2 * chunk_required(max_len, d) + qb <= cap

    def test_auto_num_chunks_minimal(self):
        n, d = 10_000, 4
        qb = 1000
        num = auto_num_chunks(n, d, qb, 10 ** 6)
        if num > 1:
            looser = -(-n // (num - 1))
            assert 2 * chunk_required(looser, d) + qb > 10 ** 6

    def test_auto_num_chunks_impossible(self):
        with pytest.raises(ValueError, match="cannot hold"):
            auto_num_chunks(100, 4, 10 ** 6, 10 ** 6)


@pytest.fixture(scope="module")
def workload():
    rng = np.random.default_rng(5)
    refs = rng.random((2500, 4), dtype=np.float32)
    queries = rng.random((300, 4), dtype=np.float32)
    return refs, queries, SearchParams(k=7)


class TestRunEngine:
    def test_engines_agree_bitwise(self, workload):
        refs, queries, params = workload
        outs = {}
        for engine in ("brute", "kdtree", "bufferkdtree"):
            res, info = run_engine(engine, refs, queries, params)
            outs[engine] = res
            assert info["engine"] == engine
            assert info["n"] == 2500 and info["m"] == 300 and info["k"] == 7
            assert info["query_seconds"] >= 0.0
        assert np.array_equal(outs["brute"].keys, outs["kdtree"].keys)
        assert np.array_equal(outs["brute"].keys, outs["bufferkdtree"].keys)

    def test_digest_invariant_to_streaming_shape(self, workload):
        refs, queries, params = workload
        base = None
        for kw in [dict(height=3), dict(height=5, num_chunks=6),
                   dict(height=4, buffer_capacity=16), dict(devices=2),
                   dict(height=4, num_chunks=3, devices=3, query_chunk_size=64)]:
            res, _ = run_engine("bufferkdtree", refs, queries, params, **kw)
            d = result_digest(res)
            base = base or d
            assert d == base

    def test_buffer_engine_reports_configuration(self, workload):
        refs, queries, params = workload
        _, info = run_engine("bufferkdtree", refs, queries, params,
                             height=4, num_chunks=2, collect_stats=True)
        assert info["height"] == 4
        assert info["num_chunks"] == 2
        assert info["devices"] == 1
        assert info["buffer_capacity"] == 2 ** 20
        assert info["fetch_count"] == 10 * 2 ** 20
        assert info["hazard_violations"] == 0
        assert info["process_rounds"] >= 1
        assert info["leaf_scan_events"] >= 300
        assert info["mean_leaves_visited"] >= 1.0
        for phase in ("stage", "copy", "compute", "find_leaf", "buffer"):
            assert phase in info["phase_seconds"]

    def test_trace_written(self, workload, tmp_path):
        refs, queries, params = workload
        trace = tmp_path / "run.csv"
        run_engine("bufferkdtree", refs, queries, params, height=3,
                   trace_out=str(trace))
        lines = trace.read_text().strip().splitlines()
        assert lines and all(len(line.split(",")) == 5 for line in lines)

    def test_fleet_traces_one_file_per_device(self, workload, tmp_path):
        refs, queries, params = workload
        trace = tmp_path / "run.csv"
        run_engine("bufferkdtree", refs, queries, params, height=3, devices=2,
                   trace_out=str(trace))
        assert (tmp_path / "run.dev0.csv").exists()
        assert (tmp_path / "run.dev1.csv").exists()

    def test_unknown_engine(self, workload):
        refs, queries, params = workload
        with pytest.raises(ValueError, match="unknown engine"):
            run_engine("annoy", refs, queries, params)


class TestBenchConfig:
    def test_defaults_valid(self):
        cfg = BenchConfig()
        assert cfg.engines == ("brute", "kdtree", "bufferkdtree")

    def test_empty_engines_rejected(self):
        with pytest.raises(ValueError, match="at least one engine"):
            BenchConfig(engines=())

    def test_unknown_engine_rejected(self):
        with pytest.raises(ValueError, match="unknown engine 'faiss'"):
            BenchConfig(engines=("brute", "faiss"))


class TestRunBenchmark:
    def test_report_structure_and_agreement(self, tmp_path):
        rng = np.random.default_rng(9)
        refs = rng.random((1200, 3), dtype=np.float32)
        queries = rng.random((150, 3), dtype=np.float32)
        report = run_benchmark(refs, queries, BenchConfig(k=5, height=3))
        assert report.workload == {"n": 1200, "m": 150, "d": 3, "k": 5}
        assert set(report.results) == {"brute", "kdtree", "bufferkdtree"}
        for info in report.results.values():
            assert info["digest"] == report.digest
        blob = json.loads(report.to_json())
        assert blob["digest"] == report.digest
        path = tmp_path / "report.json"
        report.save(path)
        assert json.loads(path.read_text())["workload"]["n"] == 1200

    def test_chunk_ratio_extra(self):
        rng = np.random.default_rng(10)
        refs = rng.random((900, 3), dtype=np.float32)
        queries = rng.random((60, 3), dtype=np.float32)
        cfg = BenchConfig(engines=("bufferkdtree",), k=4, height=3,
                          num_chunks=3, measure_chunk_ratio=True)
        report = run_benchmark(refs, queries, cfg)
        assert report.extras["chunk_time_ratio"] > 0.0

    def test_single_engine_report(self):
        rng = np.random.default_rng(11)
        refs = rng.random((400, 2), dtype=np.float32)
        report = run_benchmark(refs, refs[:40], BenchConfig(engines=("brute",), k=3))
        assert list(report.results) == ["brute"]
        assert report.digest == report.results["brute"]["digest"]

    def test_mismatch_error_message_names_engines(self):
        err = DigestMismatchError("engines disagree on neighbour indices: a=1, b=2")
        assert isinstance(err, RuntimeError)
