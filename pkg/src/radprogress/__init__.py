"""Two-stage, progression-aware radiology report generation.

Stage 1 predicts per-observation presence/status from the current image and
multi-label progression (Better/Stable/Worse) from the image pair. Stage 2
generates the report with a dual-cross-attention decoder that consumes the
current image plus predicted observations, the prior image plus prior
report, and a PMI-mined progression graph whose retrieved subgraph is
encoded with a relational GCN and folded into decoding through a gated
entity-copy distribution.
"""

from .backbone import ShapeError, VisualEncoder, VisualSequence
from .config import (
    ABLATIONS,
    ConfigError,
    ExperimentConfig,
    ModelConfig,
    TrainConfig,
    apply_overrides,
    default_stage1_config,
    default_stage2_config,
    experiment_config_from_obj,
    experiment_config_to_obj,
    load_experiment_config,
    resolve_num_workers,
    toy_experiment_config,
)
from .constants import (
    OBSERVATIONS,
    PROGRESSIONS,
    RELATIONS,
    SPATIAL_LEXICON,
    TEMPORAL_LEXICON,
)
from .corpus import (
    CorpusFormatError,
    CorpusSplit,
    CorpusValidationError,
    VisitRecord,
    Vocabulary,
    ingest_corpus,
    link_prior_visits,
    write_corpus_jsonl,
)
from .evaluator import (
    MetricsReport,
    bleu,
    ce_f1,
    compute_metrics,
    decode_report,
    decode_reports,
    evaluate_records,
    rouge_l,
    tem,
)
from .graph import (
    GraphError,
    ProgressionGraph,
    UndefinedPairError,
    build_progression_graph,
    compute_pmi,
    graph_from_json,
    graph_to_json,
    retrieve_subgraph,
)
from .stage1 import Stage1Model, build_stage1_labels, stage1_loss
from .stage2 import ReportGenerator, build_stage2_example, collate_stage2
from .synthetic import (
    SyntheticSpec,
    generate_synthetic_corpus,
    label_report_observations,
)
from .trainer import (
    CheckpointError,
    TrainerError,
    load_stage1_checkpoint,
    load_stage2_checkpoint,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS",
    "CheckpointError",
    "ConfigError",
    "CorpusFormatError",
    "CorpusSplit",
    "CorpusValidationError",
    "ExperimentConfig",
    "GraphError",
    "MetricsReport",
    "ModelConfig",
    "OBSERVATIONS",
    "PROGRESSIONS",
    "ProgressionGraph",
    "RELATIONS",
    "ReportGenerator",
    "SPATIAL_LEXICON",
    "ShapeError",
    "Stage1Model",
    "SyntheticSpec",
    "TEMPORAL_LEXICON",
    "TrainConfig",
    "TrainerError",
    "UndefinedPairError",
    "VisitRecord",
    "VisualEncoder",
    "VisualSequence",
    "Vocabulary",
    "apply_overrides",
    "bleu",
    "build_progression_graph",
    "build_stage1_labels",
    "build_stage2_example",
    "ce_f1",
    "collate_stage2",
    "compute_metrics",
    "compute_pmi",
    "decode_report",
    "decode_reports",
    "default_stage1_config",
    "default_stage2_config",
    "evaluate_records",
    "experiment_config_from_obj",
    "experiment_config_to_obj",
    "generate_synthetic_corpus",
    "graph_from_json",
    "graph_to_json",
    "ingest_corpus",
    "label_report_observations",
    "link_prior_visits",
    "load_experiment_config",
    "load_stage1_checkpoint",
    "load_stage2_checkpoint",
    "resolve_num_workers",
    "retrieve_subgraph",
    "rouge_l",
    "stage1_loss",
    "tem",
    "toy_experiment_config",
    "train_stage1",
    "train_stage2",
    "write_corpus_jsonl",
]
