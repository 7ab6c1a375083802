"""Explainable workout form assessment.

Given video features and per-category standard technical steps, the assessor
predicts the action category, a binary form-quality verdict and a
chain-of-thought coaching explanation.
"""

from .data import (
    ActionLexiconEntry,
    DatasetManifest,
    Quality,
    SampleRecord,
    SplitAssignment,
    SyntheticSpec,
    Viewpoint,
    WorkoutMode,
    generate_synthetic_dataset,
    load_manifest,
    sample_frames,
    save_manifest,
    split_dataset,
    write_synthetic_dataset,
)
from .encoders import EncoderConfig, text_encode, visual_encode
from .fusion import FusionConfig, MultimodalFusion
from .heads import AssessmentResult, Vocabulary
from .metrics import (
    CorpusStats,
    MetricReport,
    bleu,
    cider,
    corpus_statistics,
    evaluate_model,
    meteor,
    rouge_l,
    topk_accuracy,
)
from .model import AssessmentModel, AssessmentPipeline, FitnessAssessor, ModelConfig
from .training import (
    AblationConfig,
    LossWeights,
    TrainConfig,
    load_checkpoint,
    loss_total,
    lr_at,
    run_weight_sweep,
    save_checkpoint,
    train_pipeline,
)

__version__ = "0.1.0"

__all__ = [
    "ActionLexiconEntry",
    "AblationConfig",
    "AssessmentModel",
    "AssessmentPipeline",
    "AssessmentResult",
    "CorpusStats",
    "DatasetManifest",
    "EncoderConfig",
    "FitnessAssessor",
    "FusionConfig",
    "LossWeights",
    "MetricReport",
    "ModelConfig",
    "MultimodalFusion",
    "Quality",
    "SampleRecord",
    "SplitAssignment",
    "SyntheticSpec",
    "TrainConfig",
    "Viewpoint",
    "Vocabulary",
    "WorkoutMode",
    "bleu",
    "cider",
    "corpus_statistics",
    "evaluate_model",
    "generate_synthetic_dataset",
    "load_checkpoint",
    "load_manifest",
    "loss_total",
    "lr_at",
    "meteor",
    "rouge_l",
    "run_weight_sweep",
    "sample_frames",
    "save_checkpoint",
    "save_manifest",
    "split_dataset",
    "text_encode",
    "topk_accuracy",
    "train_pipeline",
    "visual_encode",
    "write_synthetic_dataset",
]
