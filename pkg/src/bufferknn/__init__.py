"""Batched k nearest neighbours on a simulated constrained-memory device.

Three interchangeable engines produce bit-identical results: a full
pairwise scan, a classic recursive tree search, and a buffered tree that
collects queries at the leaves and streams the leaf structure through a
two-buffer copy/compute pipeline.  The buffered engine is the point of
the package; the other two are its correctness oracles and baselines.
"""

from .core import (
    EMPTY_KEY,
    INDEX_SENTINEL,
    NeighborBatch,
    NeighborList,
    PointMatrix,
    SearchParams,
    as_point_matrix,
    pack_keys,
    sq_euclidean,
    unpack_keys,
)
from .brute import EvalCounter, brute_knn, brute_knn_chunked
from .kdtree import KdTree, build_kdtree, median_split, query_kdtree, query_kdtree_parallel
from .buffer_tree import (
    BufferConfig,
    BufferKdTree,
    BufferOverflowError,
    QueryBuffers,
    SearchStats,
    build_buffer_tree,
    find_leaf_batch,
    lazy_search,
    process_all_buffers,
    validate_structure,
)
from .device import (
    ChunkPipeline,
    DeviceConfigError,
    DeviceSpec,
    PipelineHazardError,
    SimulatedDevice,
    audit_copy_overlap,
    chunk_required,
    device_init,
    run_chunk_pipeline,
    trace_phase_totals,
)
from .scheduler import (
    ChunkPlan,
    DeviceFleet,
    assign_query_to_chunks,
    chunk_queries,
    plan_chunks,
    run_multi_device,
)
from .datasets import (
    DatasetFormatError,
    gen_mixture,
    gen_outlier_instance,
    gen_synthetic,
    load_dataset,
    write_dataset,
)
from .outliers import exclude_self_matches, outlier_scores, rank_outliers, self_excluded_knn
from .bench import (
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

__version__ = "0.1.0"

__all__ = [
    "EMPTY_KEY",
    "INDEX_SENTINEL",
    "NeighborBatch",
    "NeighborList",
    "PointMatrix",
    "SearchParams",
    "as_point_matrix",
    "pack_keys",
    "sq_euclidean",
    "unpack_keys",
    "EvalCounter",
    "brute_knn",
    "brute_knn_chunked",
    "KdTree",
    "build_kdtree",
    "median_split",
    "query_kdtree",
    "query_kdtree_parallel",
    "BufferConfig",
    "BufferKdTree",
    "BufferOverflowError",
    "QueryBuffers",
    "SearchStats",
    "build_buffer_tree",
    "find_leaf_batch",
    "lazy_search",
    "process_all_buffers",
    "validate_structure",
    "ChunkPipeline",
    "DeviceConfigError",
    "DeviceSpec",
    "PipelineHazardError",
    "SimulatedDevice",
    "audit_copy_overlap",
    "chunk_required",
    "device_init",
    "run_chunk_pipeline",
    "trace_phase_totals",
    "ChunkPlan",
    "DeviceFleet",
    "assign_query_to_chunks",
    "chunk_queries",
    "plan_chunks",
    "run_multi_device",
    "DatasetFormatError",
    "gen_mixture",
    "gen_outlier_instance",
    "gen_synthetic",
    "load_dataset",
    "write_dataset",
    "exclude_self_matches",
    "outlier_scores",
    "rank_outliers",
    "self_excluded_knn",
    "BenchConfig",
    "BenchReport",
    "DigestMismatchError",
    "auto_height",
    "auto_num_chunks",
    "query_block_bytes",
    "result_digest",
    "run_benchmark",
    "run_engine",
    "__version__",
]
