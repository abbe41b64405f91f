"""Learning per-sample labels from group-aggregated multi-label annotations.

A dataset whose labels are only known for groups of samples is modeled by
two binary matrices (sample-to-group, group-to-label). This package learns a
unit embedding per label that stays close to at least one member of every
positively annotated group, assigns each group label to its best-matching
member, and ships simulation/evaluation tooling for the statistical claims
behind that procedure.
"""

from .core import (
    AggLabelError,
    BoundsError,
    ConfigError,
    DatasetIntegrityError,
    EmptyLabelError,
    InfeasibleError,
    InvalidInputError,
    ParseError,
    SingularSystemError,
    SparseMatrix,
    cosine,
    make_rng,
    proj,
    sparse_row_dot,
)
from .dataio import (
    AggregatedDataset,
    DatasetDiagnostics,
    GroundTruthAssignment,
    XmcDataset,
    diagnostics,
    parse_sparse_matrix,
    parse_xmc,
    write_sparse_matrix,
    write_xmc,
)
from .embeddings import (
    LabelEmbeddings,
    LearnConfig,
    LearnTrace,
    brute_force_embedding,
    label_feature_sums,
    learn_all_embeddings,
    learn_embedding,
    normalize_rows,
    one_step_aggregate,
    selection_objective,
    summed_embeddings,
)
from .grouping import (
    aggregate_blocks,
    antipodal_pairs_dataset,
    block_grouping,
    hierarchical_grouping,
    random_grouping,
    separated_unit_vectors,
    synth_clustered_dataset,
)
from .assign import (
    AssignmentResult,
    PipelineResult,
    assign_labels,
    run_pipeline,
    soft_assignment_mask,
)
from .metrics import (
    RankedPrediction,
    assignment_accuracy,
    metrics_to_csv,
    nearest_embedding_classifier,
    precision_at_k,
)
from .simlab import (
    ClassificationSimConfig,
    RegressionSimConfig,
    RegressionInstance,
    SweepRow,
    SweepTable,
    estimate_as,
    estimate_noas,
    gen_regression,
    lr_closed_form,
    oracle_estimator,
    run_classification_sim,
    run_classification_trial,
    run_regression_sweep,
    sweep_to_csv,
)

__version__ = "0.1.0"
