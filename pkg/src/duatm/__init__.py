"""Dual attention matching of feature sequences.

Compares variable-length sequences of unit-norm feature vectors by jointly
refining each vector within its own sequence and aligning it against the
opposite sequence through a shared attention filter, then averaging the
per-vector Euclidean distances of both comparison directions into one
symmetric score. Includes toy trainable extractors, triplet training with
batch-hard mining, and CMC/mAP retrieval evaluation.
"""

from .autodiff import BatchNormState, Node
from .data import (
    DatasetManifest,
    FeatureSequence,
    SyntheticSpec,
    generate_synthetic,
    normalize_sequence,
    read_fseq,
    read_manifest,
    split_manifest,
    write_fseq,
    write_manifest,
)
from .evaluation import (
    MetricReport,
    RankingResult,
    ablation_report,
    compute_cmc,
    compute_map,
    evaluate_manifest,
    rank_gallery,
)
from .extractors import (
    SpatialExtractorParams,
    TemporalExtractorParams,
    extract_passthrough,
    extract_spatial,
    extract_temporal,
)
from .losses import (
    ClassifierHead,
    LossConfig,
    PoolingWeights,
    combined_loss,
    convex_pool,
    decorrelation_loss,
    identity_ce_loss,
    triplet_loss,
)
from .matcher import (
    AlignedPair,
    AttentionFilter,
    MatcherParams,
    PairDistanceReport,
    attend,
    baseline_avepool_distance,
    compute_filter,
    dual_attention,
    inter_only_distance,
    intra_only_distance,
    pairwise_distances,
    sequence_distance,
)
from .mining import BatchSpec, MinedTriplet, mine_hard_triplets, sample_pk_batch
from .training import (
    Checkpoint,
    Model,
    TrainConfig,
    TrainResult,
    load_checkpoint,
    save_checkpoint,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
