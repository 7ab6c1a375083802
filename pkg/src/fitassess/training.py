"""Multi-task training: total loss, warmup/decay schedule, the end-to-end
loop, checkpointing, and the loss-weight sweep harness.

The total loss is ``lambda * L_category + L_quality + L_caption`` with a
multi-class cross-entropy for the action category, a binary cross-entropy
for the form verdict (probability of "standard"), and a label-smoothed
cross-entropy over the teacher-forced explanation tokens.

Each batch retrieves the technical steps of the ground-truth category.  By
default the category term also covers a second, text-free forward pass of
the same batch (``zero_text_category_aux``) so the category path used at
inference -- where no steps can be retrieved before the category is known --
is trained directly; disable the switch to train strictly on the
text-conditioned logits.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, Quality, SampleRecord, SplitAssignment
from .encoders import EncoderConfig
from .model import AssessmentPipeline, ModelConfig
from .heads import Vocabulary

CHECKPOINT_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    """Training cannot proceed (divergence, bad config, bad checkpoint)."""


class CheckpointError(TrainingError):
    """Checkpoint file is missing, corrupt, or incompatible."""


@dataclass(frozen=True)
class LossWeights:
    """Balance of the three task losses; the weight multiplies the
    action-classification term."""

    lambda_category: float = 3.0

    def __post_init__(self):
        if not math.isfinite(self.lambda_category) or self.lambda_category < 0:
            raise TrainingError(
                f"lambda_category must be finite and >= 0, got {self.lambda_category}"
            )


@dataclass(frozen=True)
class AblationConfig:
    """Runtime computation-graph variants used by the ablation studies."""

    disable_global_fusion: bool = False
    disable_step_fusion: bool = False
    attention_direction: str = "bidirectional"  # or text_query_only / video_query_only
    merge_mode: str = "gate"  # or concat / add
    zero_text: bool = False
    shuffle_steps: bool = False


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    max_steps: int | None = None
    batch_size: int = 8
    base_lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    label_smoothing: float = 0.1
    lambda_category: float = 3.0
    seed: int = 0
    zero_text_category_aux: bool = True
    deterministic: bool = True
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise TrainingError("label_smoothing must be in [0, 1)")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise TrainingError("warmup_fraction must be in [0, 1)")
        LossWeights(self.lambda_category)  # validates the weight

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_category)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    category: torch.Tensor
    quality: torch.Tensor
    caption: torch.Tensor

    def to_floats(self) -> dict[str, float]:
        return {
            "loss_total": float(self.total.detach()),
            "loss_category": float(self.category.detach()),
            "loss_quality": float(self.quality.detach()),
            "loss_caption": float(self.caption.detach()),
        }


def loss_total(
    category_logits: torch.Tensor,
    quality_prob: torch.Tensor,
    caption_logits: torch.Tensor,
    category_labels: torch.Tensor,
    quality_labels: torch.Tensor,
    caption_targets: torch.Tensor,
    weights: LossWeights,
    label_smoothing: float = 0.0,
    pad_id: int = 0,
) -> LossBreakdown:
    """Total loss ``lambda * L_c + L_q + L_t`` with the per-task breakdown.

    ``caption_logits`` are teacher-forced rows; ``caption_targets`` are the
    token ids each row predicts (pad positions are ignored).
    """
    for name, tensor in (
        ("category logits", category_logits),
        ("quality probabilities", quality_prob),
        ("caption logits", caption_logits),
    ):
        if not torch.isfinite(tensor).all():
            raise TrainingError(f"{name} contain non-finite values")

    l_c = F.cross_entropy(category_logits, category_labels)
    l_q = F.binary_cross_entropy(quality_prob, quality_labels.to(quality_prob.dtype))
    l_t = F.cross_entropy(
        caption_logits.reshape(-1, caption_logits.shape[-1]),
        caption_targets.reshape(-1),
        ignore_index=pad_id,
        label_smoothing=label_smoothing,
    )
    total = weights.lambda_category * l_c + l_q + l_t
    return LossBreakdown(total=total, category=l_c, quality=l_q, caption=l_t)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to base_lr, then linear decay back to 0.

    Continuous at the warmup boundary; step counts are absolute so resumed
    runs continue the schedule exactly.
    """
    if total_steps <= 0:
        raise TrainingError("total_steps must be > 0")
    if not 0 <= step <= total_steps:
        raise TrainingError(f"step {step} outside [0, {total_steps}]")
    warmup = round(config.warmup_fraction * total_steps)
    if warmup > 0 and step < warmup:
        return config.base_lr * step / warmup
    if total_steps == warmup:
        return config.base_lr
    return config.base_lr * (total_steps - step) / (total_steps - warmup)


@dataclass
class TrainingBatch:
    video: torch.Tensor       # [B, N, D]
    category: torch.Tensor    # [B] long
    quality: torch.Tensor     # [B] float, 1.0 = standard form
    captions: torch.Tensor    # [B, T] long, begin token first, padded


def quality_target(record: SampleRecord) -> float:
    return 1.0 if record.quality is Quality.STANDARD else 0.0


def _pad_captions(caption_ids: Sequence[Sequence[int]], pad_id: int) -> torch.Tensor:
    width = max(len(ids) for ids in caption_ids)
    out = torch.full((len(caption_ids), width), pad_id, dtype=torch.long)
    for i, ids in enumerate(caption_ids):
        out[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
    return out


def build_batches(
    pipeline: AssessmentPipeline,
    records: Sequence[SampleRecord],
    manifest_path: str | Path,
    batch_size: int,
    rng: np.random.Generator,
) -> list[TrainingBatch]:
    """Shuffle the records and assemble padded batches (mixed categories)."""
    order = rng.permutation(len(records))
    vocab = pipeline.vocab
    max_body = pipeline.model_config.max_explanation_len - 1
    batches = []
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start : start + batch_size]]
        video = torch.stack(
            [pipeline.record_features(rec, manifest_path) for rec in chunk]
        )
        captions = _pad_captions(
            [vocab.encode_caption(rec.cot_text, max_len=max_body) for rec in chunk],
            vocab.pad_id,
        )
        batches.append(
            TrainingBatch(
                video=video,
                category=torch.tensor([rec.category_id for rec in chunk], dtype=torch.long),
                quality=torch.tensor([quality_target(rec) for rec in chunk]),
                captions=captions,
            )
        )
    return batches


def batch_forward(
    pipeline: AssessmentPipeline,
    batch: TrainingBatch,
    config: TrainConfig,
    shuffle_rng: np.random.Generator | None = None,
) -> tuple[LossBreakdown, dict[str, torch.Tensor]]:
    """One training forward pass over a batch, returning the loss breakdown."""
    model = pipeline.model
    ablation = config.ablation
    steps, global_row = pipeline.batch_text(
        batch.category.tolist(),
        zero_text=ablation.zero_text,
        shuffle_rng=shuffle_rng if ablation.shuffle_steps else None,
    )
    outputs = model(batch.video, steps, global_row, captions=batch.captions)

    category_logits = outputs.category_logits
    category_labels = batch.category
    if config.zero_text_category_aux and not ablation.zero_text:
        zero_steps, zero_global = pipeline.batch_text(
            batch.category.tolist(), zero_text=True
        )
        fused_zero = model.fusion(batch.video, zero_steps, zero_global)
        category_logits = torch.cat(
            [category_logits, model.category_head(fused_zero)], dim=0
        )
        category_labels = torch.cat([category_labels, batch.category], dim=0)

    breakdown = loss_total(
        category_logits,
        outputs.quality_prob,
        outputs.caption_logits,
        category_labels,
        batch.quality,
        batch.captions[:, 1:],
        config.loss_weights(),
        label_smoothing=config.label_smoothing,
        pad_id=pipeline.vocab.pad_id,
    )
    return breakdown, {"fused": outputs.fused}


def _apply_ablation_to_model_config(config: ModelConfig, ablation: AblationConfig) -> ModelConfig:
    return replace(
        config,
        enable_global=config.enable_global and not ablation.disable_global_fusion,
        enable_step=config.enable_step and not ablation.disable_step_fusion,
        direction=ablation.attention_direction,
        merge=ablation.merge_mode,
    )


def build_pipeline(
    manifest: DatasetManifest,
    model_config: ModelConfig | None = None,
    encoder_config: EncoderConfig | None = None,
    train_config: TrainConfig | None = None,
) -> AssessmentPipeline:
    """Construct a pipeline for a manifest, applying ablation switches and
    seeding parameter initialization from the train seed."""
    train_config = train_config or TrainConfig()
    encoder_config = encoder_config or EncoderConfig(seed=train_config.seed)
    torch.manual_seed(train_config.seed)
    if model_config is None:
        model_config = ModelConfig(
            num_categories=manifest.num_categories,
            visual_dim=encoder_config.visual_dim,
            text_dim=encoder_config.text_dim,
        )
    model_config = _apply_ablation_to_model_config(model_config, train_config.ablation)
    return AssessmentPipeline.from_manifest(
        manifest, model_config=model_config, encoder_config=encoder_config
    )


def train_pipeline(
    pipeline: AssessmentPipeline,
    manifest: DatasetManifest,
    split: SplitAssignment,
    config: TrainConfig,
    manifest_path: str | Path,
    history_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    start_step: int = 0,
    optimizer_state: dict | None = None,
    stop_after_steps: int | None = None,
) -> list[dict]:
    """Run the training loop; returns the per-epoch history records.

    Deterministic under a fixed seed: parameter init, shuffling and any
    step-row shuffling all flow from ``config.seed``.  ``stop_after_steps``
    interrupts the run early without shortening the schedule horizon, so a
    checkpointed run resumes the learning-rate curve exactly.
    """
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)

    records = [rec for rec in manifest.records if rec.sample_id in split.train]
    if not records:
        raise TrainingError("training split is empty")
    records.sort(key=lambda rec: rec.sample_id)

    model = pipeline.model
    model.train()
    steps_per_epoch = math.ceil(len(records) / config.batch_size)
    total_steps = config.max_steps or config.epochs * steps_per_epoch
    stop_step = (
        total_steps
        if stop_after_steps is None
        else min(total_steps, start_step + stop_after_steps)
    )
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay
    )
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, 1)))
    step_shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, 2)))

    history: list[dict] = []
    history_file = Path(history_path).open("a", encoding="utf-8") if history_path else None
    step = start_step
    try:
        epoch = 0
        while step < stop_step:
            epoch += 1
            batches = build_batches(
                pipeline, records, manifest_path, config.batch_size, shuffle_rng
            )
            sums = {"loss_total": 0.0, "loss_category": 0.0, "loss_quality": 0.0,
                    "loss_caption": 0.0}
            batch_count = 0
            last_lr = 0.0
            for batch in batches:
                if step >= stop_step:
                    break
                last_lr = lr_at(step, total_steps, config)
                for group in optimizer.param_groups:
                    group["lr"] = last_lr
                breakdown, _ = batch_forward(
                    pipeline, batch, config, shuffle_rng=step_shuffle_rng
                )
                if not torch.isfinite(breakdown.total):
                    raise TrainingError(
                        f"training diverged: non-finite loss at step {step}"
                    )
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                step += 1
                batch_count += 1
                for key, value in breakdown.to_floats().items():
                    sums[key] += value
            if batch_count:
                entry = {
                    "epoch": epoch,
                    "step": step,
                    "lr": last_lr,
                    **{key: value / batch_count for key, value in sums.items()},
                }
                history.append(entry)
                if history_file:
                    history_file.write(json.dumps(entry, sort_keys=True) + "\n")
    finally:
        if history_file:
            history_file.close()

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, pipeline, config, step, total_steps, optimizer)
    model.eval()
    return history


# --- checkpointing -----------------------------------------------------------

def _lexicon_payload(pipeline: AssessmentPipeline) -> list[dict]:
    return [
        {
            "category_id": entry.category_id,
            "steps": list(entry.steps),
            "general_instruction": entry.general_instruction,
            "category_name": pipeline.category_names.get(entry.category_id, ""),
        }
        for _, entry in sorted(pipeline.lexicon.items())
    ]


def save_checkpoint(
    path: str | Path,
    pipeline: AssessmentPipeline,
    config: TrainConfig,
    step: int,
    total_steps: int,
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(pipeline.model_config),
        "encoder_config": asdict(pipeline.encoder_config),
        "train_config": asdict(config),
        "step": step,
        "total_steps": total_steps,
        "vocab_tokens": list(pipeline.vocab.tokens()),
        "lexicon": _lexicon_payload(pipeline),
        "model_state": pipeline.model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[AssessmentPipeline, TrainConfig, int, int, dict | None]:
    """Restore (pipeline, train config, step, total_steps, optimizer state)."""
    from .data import ActionLexiconEntry
    from .heads import RESERVED_TOKENS

    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint file not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is corrupt: {exc}") from None
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {version!r} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    model_config = ModelConfig(**payload["model_config"])
    encoder_config = EncoderConfig(**payload["encoder_config"])
    tc_payload = dict(payload["train_config"])
    tc_payload["ablation"] = AblationConfig(**tc_payload.get("ablation", {}))
    train_config = TrainConfig(**tc_payload)

    lexicon = {}
    names = {}
    for entry in payload["lexicon"]:
        lexicon[entry["category_id"]] = ActionLexiconEntry(
            category_id=entry["category_id"],
            steps=tuple(entry["steps"]),
            general_instruction=entry["general_instruction"],
        )
        names[entry["category_id"]] = entry.get("category_name", "")
    vocab = Vocabulary(
        tok for tok in payload["vocab_tokens"] if tok not in RESERVED_TOKENS
    )
    pipeline = AssessmentPipeline(model_config, encoder_config, lexicon, names, vocab)
    try:
        pipeline.model.load_state_dict(payload["model_state"])
    except RuntimeError as exc:
        raise CheckpointError(
            f"checkpoint parameters do not match the configured shapes: {exc}"
        ) from None
    pipeline.model.eval()
    return (
        pipeline,
        train_config,
        int(payload["step"]),
        int(payload["total_steps"]),
        payload.get("optimizer_state"),
    )


# --- loss-weight sweep harness ------------------------------------------------

def run_weight_sweep(
    manifest: DatasetManifest,
    manifest_path: str | Path,
    lambdas: Sequence[float],
    split: SplitAssignment,
    base_train_config: TrainConfig,
    model_config: ModelConfig | None = None,
    encoder_config: EncoderConfig | None = None,
    eval_sample_ids: Sequence[str] | None = None,
) -> list[dict]:
    """Train one model per loss weight and collect the metric table rows.

    Mirrors the loss-weight ablation protocol: identical data, seed and
    schedule per run, varying only the weight on the category loss.
    """
    from .metrics import evaluate_model

    rows = []
    for lam in lambdas:
        config = replace(base_train_config, lambda_category=float(lam))
        pipeline = build_pipeline(manifest, model_config, encoder_config, config)
        train_pipeline(pipeline, manifest, split, config, manifest_path)
        report = evaluate_model(
            pipeline, manifest, manifest_path, sample_ids=eval_sample_ids
        )
        rows.append({"lambda": float(lam), **report.to_dict()})
    return rows


def format_sweep_table(rows: list[dict]) -> str:
    header = f"{'lambda':>8} {'BLEU':>8} {'METEOR':>8} {'CIDEr':>8} {'ROUGE-L':>8} {'TOP1':>8} {'Acc':>8}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['lambda']:>8.1f} {100 * row['bleu']:>8.2f} {100 * row['meteor']:>8.2f} "
            f"{100 * row['cider']:>8.2f} {100 * row['rouge_l']:>8.2f} "
            f"{row['top1']:>8.3f} {row['quality_acc']:>8.3f}"
        )
    return "\n".join(lines)
