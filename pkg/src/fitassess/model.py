"""Full assessor: encoders feeding fusion feeding the three heads, plus an
estimator-style facade (fit / predict / get_params) over the whole pipeline.

Training conditions on the ground-truth category's technical steps.  At
inference no category is known yet, so the pipeline first runs a text-free
forward pass (zeroed text features, the same graph as the ``w/o text``
ablation) to predict the category, retrieves that category's steps, and only
then produces the form verdict and the generated explanation from the
text-conditioned pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .data import (
    ActionLexiconEntry,
    DatasetManifest,
    SampleRecord,
    STEPS_PER_CATEGORY,
    SplitAssignment,
    split_dataset,
)
from .encoders import EncoderConfig, encode_record, text_encode
from .fusion import FusionConfig, MultimodalFusion
from .heads import AssessmentResult, CategoryHead, ExplanationDecoder, QualityHead, Vocabulary


class ModelError(ValueError):
    """Invalid model configuration or usage."""


@dataclass(frozen=True)
class ModelConfig:
    num_categories: int
    visual_dim: int = 32
    text_dim: int = 32
    model_dim: int = 512
    num_heads: int = 8
    decoder_layers: int = 2
    decoder_ffn_dim: int | None = None
    max_explanation_len: int = 160
    enable_global: bool = True
    enable_step: bool = True
    direction: str = "bidirectional"
    merge: str = "gate"
    residual_scale_init: float = 1e-3

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            visual_dim=self.visual_dim,
            text_dim=self.text_dim,
            model_dim=self.model_dim,
            num_heads=self.num_heads,
            enable_global=self.enable_global,
            enable_step=self.enable_step,
            direction=self.direction,
            merge=self.merge,
            residual_scale_init=self.residual_scale_init,
        )


@dataclass
class ModelOutputs:
    fused: torch.Tensor
    category_logits: torch.Tensor
    quality_prob: torch.Tensor
    caption_logits: torch.Tensor | None


class AssessmentModel(nn.Module):
    """Fusion plus the three prediction heads (trainable parameters only)."""

    def __init__(self, config: ModelConfig, vocab_size: int):
        super().__init__()
        if config.num_categories < 1:
            raise ModelError("num_categories must be >= 1")
        self.config = config
        self.fusion = MultimodalFusion(config.fusion_config())
        fused_dim = self.fusion.fused_dim
        self.category_head = CategoryHead(fused_dim, config.num_categories)
        self.quality_head = QualityHead(fused_dim)
        self.decoder = ExplanationDecoder(
            vocab_size=vocab_size,
            memory_dim=fused_dim,
            model_dim=config.model_dim,
            num_heads=config.num_heads,
            num_layers=config.decoder_layers,
            ffn_dim=config.decoder_ffn_dim,
            max_len=config.max_explanation_len,
        )

    def forward(
        self,
        video: torch.Tensor,
        steps: torch.Tensor,
        global_row: torch.Tensor,
        captions: torch.Tensor | None = None,
    ) -> ModelOutputs:
        fused = self.fusion(video, steps, global_row)
        caption_logits = None
        if captions is not None:
            caption_logits = self.decoder.teacher_forced_logits(fused, captions)
        return ModelOutputs(
            fused=fused,
            category_logits=self.category_head(fused),
            quality_prob=self.quality_head(fused),
            caption_logits=caption_logits,
        )


class AssessmentPipeline:
    """Bundles encoder config, lexicon, vocabulary and the trainable model."""

    def __init__(
        self,
        model_config: ModelConfig,
        encoder_config: EncoderConfig,
        lexicon: Mapping[int, ActionLexiconEntry],
        category_names: Mapping[int, str],
        vocab: Vocabulary,
        model: AssessmentModel | None = None,
    ):
        if len(lexicon) != model_config.num_categories:
            raise ModelError(
                f"lexicon covers {len(lexicon)} categories but the model is "
                f"configured for {model_config.num_categories}"
            )
        if encoder_config.visual_dim != model_config.visual_dim:
            raise ModelError("encoder visual_dim must match model visual_dim")
        if encoder_config.text_dim != model_config.text_dim:
            raise ModelError("encoder text_dim must match model text_dim")
        self.model_config = model_config
        self.encoder_config = encoder_config
        self.lexicon = dict(lexicon)
        self.category_names = dict(category_names)
        self.vocab = vocab
        self.model = model if model is not None else AssessmentModel(model_config, len(vocab))
        self._text_cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
        self._feature_cache: dict[str, torch.Tensor] = {}

    @classmethod
    def from_manifest(
        cls,
        manifest: DatasetManifest,
        model_config: ModelConfig | None = None,
        encoder_config: EncoderConfig | None = None,
        **config_overrides,
    ) -> "AssessmentPipeline":
        encoder_config = encoder_config or EncoderConfig()
        if model_config is None:
            model_config = ModelConfig(
                num_categories=manifest.num_categories,
                visual_dim=encoder_config.visual_dim,
                text_dim=encoder_config.text_dim,
                **config_overrides,
            )
        vocab = Vocabulary.build(rec.cot_text for rec in manifest.records)
        names = {rec.category_id: rec.category_name for rec in manifest.records}
        for cid in manifest.lexicon:
            names.setdefault(cid, f"category {cid}")
        return cls(model_config, encoder_config, manifest.lexicon, names, vocab)

    def text_features(self, category_id: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Encoded (steps [M,E], instruction [1,E]) for a category, cached."""
        if category_id not in self._text_cache:
            if category_id not in self.lexicon:
                raise ModelError(f"no lexicon entry for category {category_id}")
            steps, global_row = text_encode(self.lexicon[category_id], self.encoder_config)
            self._text_cache[category_id] = (
                torch.from_numpy(np.array(steps)),
                torch.from_numpy(np.array(global_row)),
            )
        return self._text_cache[category_id]

    def zero_text(self) -> tuple[torch.Tensor, torch.Tensor]:
        e = self.encoder_config.text_dim
        return (
            torch.zeros(STEPS_PER_CATEGORY, e),
            torch.zeros(1, e),
        )

    def record_features(self, record: SampleRecord, manifest_path: str | Path) -> torch.Tensor:
        if record.sample_id not in self._feature_cache:
            feats = encode_record(record, manifest_path, self.encoder_config)
            self._feature_cache[record.sample_id] = torch.from_numpy(np.array(feats))
        return self._feature_cache[record.sample_id]

    def batch_text(
        self,
        category_ids: Sequence[int],
        zero_text: bool = False,
        shuffle_rng: np.random.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Stack per-sample step/instruction features for a batch."""
        steps_rows, global_rows = [], []
        for cid in category_ids:
            if zero_text:
                steps, global_row = self.zero_text()
            else:
                steps, global_row = self.text_features(int(cid))
                if shuffle_rng is not None:
                    order = shuffle_rng.permutation(steps.shape[0])
                    steps = steps[torch.from_numpy(order)]
            steps_rows.append(steps)
            global_rows.append(global_row)
        return torch.stack(steps_rows), torch.stack(global_rows)

    @torch.no_grad()
    def assess(
        self,
        video_features: torch.Tensor | np.ndarray,
        decode_mode: str = "greedy",
        beam_width: int = 1,
    ) -> AssessmentResult:
        """Run inference for one sample: predict the category from the
        text-free pass, retrieve its steps, then judge form and explain."""
        self.model.eval()
        if isinstance(video_features, torch.Tensor):
            video = video_features.detach().to(torch.float32)
        else:
            video = torch.as_tensor(np.array(video_features), dtype=torch.float32)
        if video.ndim != 2:
            raise ModelError("assess expects a single N x visual_dim feature matrix")
        zero_steps, zero_global = self.zero_text()
        fused_zero = self.model.fusion(video, zero_steps, zero_global)
        category_logits = self.model.category_head(fused_zero)
        category_id = int(torch.argmax(category_logits).item())

        steps, global_row = self.text_features(category_id)
        fused = self.model.fusion(video, steps, global_row)
        quality_prob = float(self.model.quality_head(fused).item())
        ids = self.model.decoder.decode(
            fused, mode=decode_mode, beam_width=beam_width
        )
        return AssessmentResult(
            category_logits=category_logits.detach(),
            quality_prob=quality_prob,
            explanation_ids=tuple(int(i) for i in ids),
            explanation_text=self.vocab.decode(ids),
        )

    def assess_record(
        self, record: SampleRecord, manifest_path: str | Path, **decode_kwargs
    ) -> AssessmentResult:
        return self.assess(self.record_features(record, manifest_path), **decode_kwargs)


class FitnessAssessor:
    """Estimator-style wrapper: construct with hyperparameters, ``fit`` on a
    manifest, ``predict`` on feature matrices.  ``get_params``/``set_params``
    follow the scikit-learn convention so the assessor drops into generic
    tooling without a hard scikit-learn dependency."""

    def __init__(
        self,
        model_dim: int = 512,
        num_heads: int = 8,
        decoder_layers: int = 2,
        visual_dim: int = 32,
        text_dim: int = 32,
        max_explanation_len: int = 160,
        epochs: int = 300,
        max_steps: int | None = None,
        batch_size: int = 8,
        base_lr: float = 1e-4,
        lambda_category: float = 3.0,
        label_smoothing: float = 0.1,
        seed: int = 0,
    ):
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.decoder_layers = decoder_layers
        self.visual_dim = visual_dim
        self.text_dim = text_dim
        self.max_explanation_len = max_explanation_len
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.lambda_category = lambda_category
        self.label_smoothing = label_smoothing
        self.seed = seed
        self.pipeline_: AssessmentPipeline | None = None
        self.history_: list[dict] | None = None

    _PARAM_NAMES = (
        "model_dim", "num_heads", "decoder_layers", "visual_dim", "text_dim",
        "max_explanation_len", "epochs", "max_steps", "batch_size", "base_lr",
        "lambda_category", "label_smoothing", "seed",
    )

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params) -> "FitnessAssessor":
        for name, value in params.items():
            if name not in self._PARAM_NAMES:
                raise ModelError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    def fit(
        self,
        manifest: DatasetManifest,
        manifest_path: str | Path,
        split: SplitAssignment | None = None,
    ) -> "FitnessAssessor":
        from .training import TrainConfig, train_pipeline

        if split is None:
            split = split_dataset(manifest, seed=self.seed)
        torch.manual_seed(self.seed)
        encoder_config = EncoderConfig(
            visual_dim=self.visual_dim, text_dim=self.text_dim, seed=self.seed
        )
        model_config = ModelConfig(
            num_categories=manifest.num_categories,
            visual_dim=self.visual_dim,
            text_dim=self.text_dim,
            model_dim=self.model_dim,
            num_heads=self.num_heads,
            decoder_layers=self.decoder_layers,
            max_explanation_len=self.max_explanation_len,
        )
        self.pipeline_ = AssessmentPipeline.from_manifest(
            manifest, model_config=model_config, encoder_config=encoder_config
        )
        config = TrainConfig(
            epochs=self.epochs,
            max_steps=self.max_steps,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            lambda_category=self.lambda_category,
            label_smoothing=self.label_smoothing,
            seed=self.seed,
        )
        self.history_ = train_pipeline(
            self.pipeline_, manifest, split, config, manifest_path
        )
        return self

    def _require_fitted(self) -> AssessmentPipeline:
        if self.pipeline_ is None:
            raise ModelError("this assessor is not fitted yet; call fit() first")
        return self.pipeline_

    def predict(self, feature_matrices: Sequence) -> list[AssessmentResult]:
        pipeline = self._require_fitted()
        return [pipeline.assess(feats) for feats in feature_matrices]

    def score(
        self,
        manifest: DatasetManifest,
        manifest_path: str | Path,
        sample_ids: Sequence[str] | None = None,
    ):
        """Metric report on the given samples (all records by default)."""
        from .metrics import evaluate_model

        pipeline = self._require_fitted()
        return evaluate_model(pipeline, manifest, manifest_path, sample_ids=sample_ids)
