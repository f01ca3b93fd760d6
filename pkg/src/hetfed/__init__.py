"""Subspace-angle heterogeneity profiling and super-cluster Non-IID partitioning for FL."""
from .clustering import Linkage, SuperClustering, agglomerative_cluster, suggest_threshold
from .ingest import DatasetView, synth_superclusters, to_common_dim
from .numerics import OrthonormalBasis, principal_angles, truncated_svd
from .partition import Method, Partition, PartitionSpec, make_partition
from .signature import Measure, ProximityMatrix, Signature, build_signature, class_signatures

__version__ = "0.1.0"

__all__ = [
    "DatasetView", "Linkage", "Measure", "Method", "OrthonormalBasis", "Partition",
    "PartitionSpec", "ProximityMatrix", "Signature", "SuperClustering",
    "agglomerative_cluster", "build_signature", "class_signatures", "make_partition",
    "principal_angles", "suggest_threshold", "synth_superclusters", "to_common_dim",
    "truncated_svd",
]
