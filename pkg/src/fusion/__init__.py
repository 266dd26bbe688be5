"""Few-shot unsupervised continual learning with meta-example meta-learning.

The package splits into data handling (data_io), unsupervised task
construction (task_builder), the functional network (network), the bilevel
training loop (meta_learner), rehearsal buffers (replay), the
class-incremental evaluation harness (eval_harness), and a CLI (cli).
"""

from .errors import (
    ConfigError,
    CorruptionError,
    EmptySetError,
    FormatError,
    FusionError,
    MetricError,
    StateError,
    TaskError,
    ValidationError,
)
from .data_io import (
    Dataset,
    EmbeddingSet,
    LabeledExample,
    embed_dataset_baseline,
    generate_synthetic_glyphs,
    load_embeddings,
    load_image_folder,
    store_embeddings,
)
from .task_builder import (
    BalancingVector,
    ClusterAssignment,
    Task,
    augment_to_size,
    compute_balancing_vector,
    kmeans_partition,
    make_balanced_task,
    make_unbalanced_task,
    proportional_sample_size,
    support_size,
    truncate_to_balanced,
)
from .replay import ReservoirBuffer, reservoir_batch, reservoir_insert
from .network import (
    ArchConfig,
    MetaExample,
    ParameterBundle,
    attention_logits,
    attention_pool,
    classify,
    cln_forward,
    expected_shapes,
    fen_forward,
    film_transform,
    init_params,
    load_checkpoint,
    mean_pool,
    reinit_cln,
    reset_context,
    save_checkpoint,
)
from .meta_learner import (
    VARIANTS,
    AdamState,
    TrainingConfig,
    TrainLog,
    apply_loss_balancing,
    composed_query_grads,
    inner_update_meml,
    inner_update_oml,
    inner_update_single,
    meta_train,
    outer_update,
    run_inner,
)
from .eval_harness import (
    AccuracyCurve,
    ExperimentConfig,
    FineTuneConfig,
    ResultsRecord,
    accuracy,
    adapt_images,
    build_datasets,
    emit_report,
    invert_dataset,
    load_results,
    meta_test,
    ood_evaluate,
    override_param,
    run_experiment,
    run_sweep,
)

__version__ = "0.1.0"

__all__ = [
    "AccuracyCurve",
    "AdamState",
    "ArchConfig",
    "BalancingVector",
    "ClusterAssignment",
    "ConfigError",
    "CorruptionError",
    "Dataset",
    "EmbeddingSet",
    "EmptySetError",
    "ExperimentConfig",
    "FineTuneConfig",
    "FormatError",
    "FusionError",
    "LabeledExample",
    "MetaExample",
    "MetricError",
    "ParameterBundle",
    "ResultsRecord",
    "ReservoirBuffer",
    "StateError",
    "Task",
    "TaskError",
    "TrainLog",
    "TrainingConfig",
    "VARIANTS",
    "ValidationError",
    "accuracy",
    "adapt_images",
    "apply_loss_balancing",
    "attention_logits",
    "attention_pool",
    "augment_to_size",
    "build_datasets",
    "classify",
    "cln_forward",
    "composed_query_grads",
    "compute_balancing_vector",
    "embed_dataset_baseline",
    "emit_report",
    "expected_shapes",
    "fen_forward",
    "film_transform",
    "generate_synthetic_glyphs",
    "init_params",
    "inner_update_meml",
    "inner_update_oml",
    "inner_update_single",
    "invert_dataset",
    "kmeans_partition",
    "load_checkpoint",
    "load_embeddings",
    "load_image_folder",
    "load_results",
    "make_balanced_task",
    "make_unbalanced_task",
    "mean_pool",
    "meta_test",
    "meta_train",
    "ood_evaluate",
    "outer_update",
    "override_param",
    "proportional_sample_size",
    "reinit_cln",
    "reservoir_batch",
    "reservoir_insert",
    "reset_context",
    "run_experiment",
    "run_inner",
    "run_sweep",
    "save_checkpoint",
    "store_embeddings",
    "support_size",
    "truncate_to_balanced",
]
