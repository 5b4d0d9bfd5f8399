"""Graph-based approximate nearest neighbor search with probabilistic routing gates."""

from .errors import (
    AnnRouteError,
    CorruptionError,
    DegenerateInputError,
    FormatError,
    UsageError,
)
from .vecstore import (
    Dataset,
    Metric,
    PermutationPlan,
    apply_permutation,
    avg_squared_coordinate,
    build_permutation,
    distance,
    load_fvecs,
    load_ivecs,
    normalize,
    save_fvecs,
    save_ivecs,
)
from .projections import (
    ProjectionEnsemble,
    QueryProjectionTable,
    NULL_INDEX,
    RNG_ID,
    extreme_index,
    extreme_index_full,
    generate_ensemble,
    project_query,
)
from .routing import (
    Decomposition,
    EdgeMeta,
    EdgeMetaBlock,
    EdgeQuantizers,
    PartitionStats,
    QuantileTable,
    RoutingConfig,
    RoutingMode,
    ScalarQuantizer,
    SimHashSketch,
    ThresholdState,
    batch_peos_test,
    build_edge_meta,
    build_quantile_table,
    collision_count,
    compute_Ar,
    decompose,
    estimate_partition_stats,
    generate_simhash_hashes,
    peos_test,
    rceos_test,
    required_m_rceos,
    simhash_sketch,
    simhash_test,
    w_reg_lower_bound,
)
from .graph import (
    AuditTrace,
    HnswIndex,
    SearchParams,
    SearchStats,
    attach,
    attach_routing,
    brute_force_all,
    brute_force_knn,
    build_hnsw,
    edge_residual_avgs,
    load_index,
    save_index,
    search,
)
from .bench import (
    AuditReport,
    BenchmarkSpec,
    RunResult,
    audit_guarantee,
    compute_recall,
    run_audit,
    run_sweep,
    synthetic_dataset,
)

__version__ = "0.1.0"
