"""Multimodal fusion: bidirectional cross-attention between video tokens and
the technical-step text, in two parallel branches, merged by a dynamic gate.

* The global branch lets the single general-instruction embedding attend over
  the video tokens, then lets the video tokens attend back over the updated
  instruction.
* The step branch does the same with the five per-step embeddings.
* The hierarchical merge computes a sigmoid gate from the concatenated branch
  outputs and mixes them convexly (or, as ablations, concatenates or adds
  them directly).

Both attention directions carry a learnable per-channel residual scale
(``sigma_1`` .. ``sigma_4``, initialized to 1e-3).  No positional encoding is
added inside fusion, so permuting video tokens permutes the fused rows
identically.

Checkpoint naming contract: parameter entries are exposed as ``sigma_1`` ..
``sigma_4``, ``W_g``/``b_g`` and per-attention ``W_Q``/``W_K``/``W_V``/``W_O``
so checkpoints stay inspectable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

DIRECTIONS = ("bidirectional", "text_query_only", "video_query_only")
MERGE_MODES = ("gate", "concat", "add")


class FusionError(ValueError):
    """Invalid fusion configuration or input."""


@dataclass(frozen=True)
class FusionConfig:
    visual_dim: int = 32
    text_dim: int = 32
    model_dim: int = 512
    num_heads: int = 8
    enable_global: bool = True
    enable_step: bool = True
    direction: str = "bidirectional"
    merge: str = "gate"
    residual_scale_init: float = 1e-3

    def __post_init__(self):
        if min(self.visual_dim, self.text_dim, self.model_dim, self.num_heads) < 1:
            raise FusionError("fusion dims and head count must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise FusionError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.direction not in DIRECTIONS:
            raise FusionError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.merge not in MERGE_MODES:
            raise FusionError(f"merge must be one of {MERGE_MODES}, got {self.merge!r}")
        if not (self.enable_global or self.enable_step):
            raise FusionError("at least one fusion branch must stay enabled")

    @property
    def fused_dim(self) -> int:
        """Width of the fused output (doubles under direct concatenation)."""
        if self.merge == "concat" and self.enable_global and self.enable_step:
            return 2 * self.model_dim
        return self.model_dim


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise FusionError(f"{name} contains non-finite values")


class MultiHeadCrossAttention(nn.Module):
    """Scaled dot-product attention of queries over a key/value sequence.

    Heads are concatenated and linearly mixed; all projections are bias-free
    square matrices applied as ``x @ W``.
    """

    def __init__(self, model_dim: int, num_heads: int):
        super().__init__()
        if model_dim % num_heads != 0:
            raise FusionError(
                f"model_dim {model_dim} not divisible by num_heads {num_heads}"
            )
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.W_Q = nn.Parameter(torch.empty(model_dim, model_dim))
        self.W_K = nn.Parameter(torch.empty(model_dim, model_dim))
        self.W_V = nn.Parameter(torch.empty(model_dim, model_dim))
        self.W_O = nn.Parameter(torch.empty(model_dim, model_dim))
        for weight in (self.W_Q, self.W_K, self.W_V, self.W_O):
            nn.init.xavier_uniform_(weight)

    def forward(
        self,
        queries: torch.Tensor,
        keys_values: torch.Tensor,
        attn_mask: torch.Tensor | None = None,
        return_weights: bool = False,
    ):
        """Attend ``queries`` [.., N_q, d] over ``keys_values`` [.., N_kv, d].

        ``attn_mask`` is boolean with True marking blocked positions,
        broadcastable to [.., N_q, N_kv].
        """
        if queries.shape[-1] != self.model_dim or keys_values.shape[-1] != self.model_dim:
            raise FusionError(
                f"attention inputs must have width {self.model_dim}, got "
                f"{queries.shape[-1]} and {keys_values.shape[-1]}"
            )
        _check_finite("attention queries", queries)
        _check_finite("attention keys/values", keys_values)

        squeeze = queries.ndim == 2
        if squeeze:
            queries = queries.unsqueeze(0)
            keys_values = keys_values.unsqueeze(0)

        bs, n_q, _ = queries.shape
        n_kv = keys_values.shape[1]
        q = (queries @ self.W_Q).view(bs, n_q, self.num_heads, self.head_dim).transpose(1, 2)
        k = (keys_values @ self.W_K).view(bs, n_kv, self.num_heads, self.head_dim).transpose(1, 2)
        v = (keys_values @ self.W_V).view(bs, n_kv, self.num_heads, self.head_dim).transpose(1, 2)

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if attn_mask is not None:
            scores = scores.masked_fill(attn_mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        mixed = (weights @ v).transpose(1, 2).reshape(bs, n_q, self.model_dim)
        out = mixed @ self.W_O

        if squeeze:
            out = out.squeeze(0)
            weights = weights.squeeze(0)
        if return_weights:
            return out, weights
        return out


class _BidirectionalBranch(nn.Module):
    """Shared machinery of the global-aware and step-aware branches.

    First the text rows query the video tokens, then the video tokens query
    the updated text; each direction adds a per-channel scaled residual.
    Under a unidirectional ablation the dropped direction keeps only its
    residual term.
    """

    def __init__(self, config: FusionConfig, scale_names: tuple[str, str]):
        super().__init__()
        self.direction = config.direction
        self.text_reads_video = MultiHeadCrossAttention(config.model_dim, config.num_heads)
        self.video_reads_text = MultiHeadCrossAttention(config.model_dim, config.num_heads)
        self._text_scale_name, self._video_scale_name = scale_names
        init = config.residual_scale_init
        setattr(self, self._text_scale_name,
                nn.Parameter(torch.full((config.model_dim,), float(init))))
        setattr(self, self._video_scale_name,
                nn.Parameter(torch.full((config.model_dim,), float(init))))

    @property
    def text_scale(self) -> nn.Parameter:
        return getattr(self, self._text_scale_name)

    @property
    def video_scale(self) -> nn.Parameter:
        return getattr(self, self._video_scale_name)

    def forward(self, video: torch.Tensor, text: torch.Tensor):
        """Returns (updated text rows, text-infused video rows)."""
        if text.shape[-2] < 1 or video.shape[-2] < 1:
            raise FusionError("fusion inputs need at least one row per modality")
        if self.direction in ("bidirectional", "text_query_only"):
            text_updated = self.text_reads_video(text, video) + self.text_scale * text
        else:
            text_updated = self.text_scale * text
        if self.direction in ("bidirectional", "video_query_only"):
            video_fused = self.video_reads_text(video, text_updated) + self.video_scale * video
        else:
            video_fused = self.video_scale * video
        return text_updated, video_fused


class GlobalAwareFusion(_BidirectionalBranch):
    """Aligns video tokens with the single general-instruction embedding."""

    def __init__(self, config: FusionConfig):
        super().__init__(config, scale_names=("sigma_1", "sigma_2"))


class StepAwareFusion(_BidirectionalBranch):
    """Grounds the five procedural step embeddings in the video tokens."""

    def __init__(self, config: FusionConfig):
        super().__init__(config, scale_names=("sigma_3", "sigma_4"))


class HierarchicalFusionLayer(nn.Module):
    """Merge the two branch outputs.

    ``gate``: G = sigmoid(W_g [global, step] + b_g) per position and channel,
    output G * global + (1 - G) * step.  ``concat`` returns the direct
    concatenation along the feature dimension; ``add`` the elementwise sum.
    """

    def __init__(self, model_dim: int, merge: str = "gate"):
        super().__init__()
        if merge not in MERGE_MODES:
            raise FusionError(f"merge must be one of {MERGE_MODES}, got {merge!r}")
        self.merge = merge
        self.model_dim = model_dim
        if merge == "gate":
            self.W_g = nn.Parameter(torch.empty(model_dim, 2 * model_dim))
            self.b_g = nn.Parameter(torch.zeros(model_dim))
            nn.init.xavier_uniform_(self.W_g)

    def gate_values(self, global_stream: torch.Tensor, step_stream: torch.Tensor) -> torch.Tensor:
        joint = torch.cat([global_stream, step_stream], dim=-1)
        return torch.sigmoid(joint @ self.W_g.t() + self.b_g)

    def forward(self, global_stream: torch.Tensor, step_stream: torch.Tensor) -> torch.Tensor:
        if global_stream.shape != step_stream.shape:
            raise FusionError(
                f"branch outputs must share a shape, got {tuple(global_stream.shape)} "
                f"vs {tuple(step_stream.shape)}"
            )
        if self.merge == "concat":
            return torch.cat([global_stream, step_stream], dim=-1)
        if self.merge == "add":
            return global_stream + step_stream
        gate = self.gate_values(global_stream, step_stream)
        return gate * global_stream + (1.0 - gate) * step_stream


@dataclass
class FusionDetail:
    """Intermediate tensors of one fusion pass, for inspection and tests."""

    video_proj: torch.Tensor
    steps_proj: torch.Tensor
    global_proj: torch.Tensor
    global_text_updated: torch.Tensor | None
    global_video: torch.Tensor | None
    step_text_updated: torch.Tensor | None
    step_video: torch.Tensor | None
    fused: torch.Tensor


class MultimodalFusion(nn.Module):
    """Project both modalities to a shared width and run the full fusion.

    Raw widths differ (visual_dim vs text_dim), so everything is first
    projected to ``model_dim``; the step and global text rows get separate
    projections.  Disabled branches reduce the output to the surviving
    branch exactly.
    """

    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        self.project_video = nn.Linear(config.visual_dim, config.model_dim)
        self.project_steps = nn.Linear(config.text_dim, config.model_dim)
        self.project_global = nn.Linear(config.text_dim, config.model_dim)
        self.global_fusion = GlobalAwareFusion(config) if config.enable_global else None
        self.step_fusion = StepAwareFusion(config) if config.enable_step else None
        if config.enable_global and config.enable_step:
            self.merge = HierarchicalFusionLayer(config.model_dim, config.merge)
        else:
            self.merge = None

    @property
    def fused_dim(self) -> int:
        return self.config.fused_dim

    def forward_detail(
        self,
        video_raw: torch.Tensor,
        steps_raw: torch.Tensor,
        global_raw: torch.Tensor,
    ) -> FusionDetail:
        squeeze = video_raw.ndim == 2
        if squeeze:
            video_raw = video_raw.unsqueeze(0)
            steps_raw = steps_raw.unsqueeze(0)
            global_raw = global_raw.unsqueeze(0)
        if steps_raw.shape[1] < 1:
            raise FusionError("step text must contain at least one row")
        if global_raw.shape[1] != 1:
            raise FusionError(
                f"global text must be a single row, got {global_raw.shape[1]}"
            )

        video = self.project_video(video_raw)
        steps = self.project_steps(steps_raw)
        global_row = self.project_global(global_raw)

        g_text = g_video = s_text = s_video = None
        if self.global_fusion is not None:
            g_text, g_video = self.global_fusion(video, global_row)
        if self.step_fusion is not None:
            s_text, s_video = self.step_fusion(video, steps)

        if g_video is None:
            fused = s_video
        elif s_video is None:
            fused = g_video
        else:
            fused = self.merge(g_video, s_video)

        if squeeze:
            fused = fused.squeeze(0)
        return FusionDetail(
            video_proj=video,
            steps_proj=steps,
            global_proj=global_row,
            global_text_updated=g_text,
            global_video=g_video,
            step_text_updated=s_text,
            step_video=s_video,
            fused=fused,
        )

    def forward(
        self,
        video_raw: torch.Tensor,
        steps_raw: torch.Tensor,
        global_raw: torch.Tensor,
    ) -> torch.Tensor:
        return self.forward_detail(video_raw, steps_raw, global_raw).fused
