"""Targeted data selection via optimal transport over whitened features."""

from .attribution import (
    AttributionScores,
    LdsResult,
    SubsetArchive,
    ensemble_scores,
    lds,
    load_archive,
    load_scores,
    neg_wfd_ensemble,
    neg_wfd_score,
    save_archive,
    save_scores,
    spearman,
    tracin_score,
)
from .errors import (
    BadHeaderError,
    BadMagicError,
    ConfigError,
    DataError,
    FormatError,
    NonFiniteError,
    NonFiniteFileError,
    NumericalError,
    ShapeMismatchError,
    TarotError,
    TruncatedPayloadError,
)
from .featurestore import (
    DatasetManifest,
    FeatureMatrix,
    aggregate_checkpoints,
    load_csv_features,
    load_dataset,
    load_features,
    load_manifest,
    write_features,
)
from .metric import (
    ProjectionSpec,
    WhitenedFeatures,
    WhiteningTransform,
    apply_whitening,
    build_metric,
    default_projection_spec,
    fit_whitening,
    make_projection,
    normalize_rows,
    project,
    wfd,
)
from .ot import (
    CostMatrix,
    MassVector,
    TransportPlan,
    candidate_potentials,
    concat_features,
    cost_matrix,
    exact_ot,
    ot_distance,
    sinkhorn,
    solve,
)
from .selection import (
    NeighborTable,
    SelectionResult,
    build_neighbor_table,
    nearest_rank_set,
    select_fixed,
    select_otm,
    selection_ratio,
)
from .weighting import WeightAssignment, assign_weights, default_repetition

__version__ = "0.1.0"
