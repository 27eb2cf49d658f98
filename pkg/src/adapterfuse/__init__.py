"""Training-free adaptation by fusing low-rank adapters chosen per query."""

from .errors import AdapterFuseError, NumericError, StructuralError, UsageError
from .fusion import (
    FusedAdapter,
    FusionConfig,
    FusionPlan,
    apply_fused,
    compute_weights,
    fuse,
    late_fuse_outputs,
    merge_concat,
    merge_uniform,
    plan_report,
    select_top_k,
)
from .library import (
    ChecksumError,
    DomainRecord,
    Embedding,
    Library,
    TruncatedBlobError,
    UnsupportedVersionError,
    build_record,
    compute_centroid,
    compute_covariance,
    exclude,
    extend,
    library_digest,
    load,
    read_embeddings_file,
    save,
    write_embeddings_file,
)
from .metrics import (
    ConfusionMatrix,
    ContributionMatrix,
    CorrelationResult,
    contribution_matrix,
    distance_performance_correlation,
    harmonic_mean,
    miou,
    support_score,
)
from .stream import StreamState, batch_cluster_fuse, ema_update, run_stream
from .tensor import AdapterSet, LoraPair, Matrix, axpy_accumulate, delta, matmul

__all__ = [
    "AdapterFuseError",
    "NumericError",
    "StructuralError",
    "UsageError",
    "UnsupportedVersionError",
    "TruncatedBlobError",
    "ChecksumError",
    "Matrix",
    "LoraPair",
    "AdapterSet",
    "delta",
    "matmul",
    "axpy_accumulate",
    "Embedding",
    "DomainRecord",
    "Library",
    "compute_centroid",
    "compute_covariance",
    "build_record",
    "extend",
    "exclude",
    "library_digest",
    "save",
    "load",
    "read_embeddings_file",
    "write_embeddings_file",
    "FusionConfig",
    "FusionPlan",
    "FusedAdapter",
    "select_top_k",
    "compute_weights",
    "merge_concat",
    "merge_uniform",
    "fuse",
    "apply_fused",
    "late_fuse_outputs",
    "plan_report",
    "ConfusionMatrix",
    "ContributionMatrix",
    "CorrelationResult",
    "miou",
    "harmonic_mean",
    "contribution_matrix",
    "support_score",
    "distance_performance_correlation",
    "StreamState",
    "ema_update",
    "run_stream",
    "batch_cluster_fuse",
]
