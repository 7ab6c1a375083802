"""Prediction heads: action-category classifier, form-quality classifier and
the autoregressive chain-of-thought explanation decoder.

All heads consume the fused video-text tokens.  The classifiers mean-pool
over tokens before a two-layer MLP.  The decoder is a small transformer with
causal self-attention plus cross-attention to the fused tokens; greedy and
beam decoding share scoring (summed token log-probabilities, no length
normalization), so beam width 1 reproduces greedy exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

from .fusion import MultiHeadCrossAttention
from .text import tokenize

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
RESERVED_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)


class HeadError(ValueError):
    """Invalid head configuration or input."""


class Vocabulary:
    """Bijective token <-> id mapping with fixed reserved ids 0..3."""

    def __init__(self, tokens: Iterable[str]):
        self._tokens: list[str] = list(RESERVED_TOKENS)
        seen = set(self._tokens)
        for tok in tokens:
            if tok in seen:
                if tok in RESERVED_TOKENS:
                    continue
                raise HeadError(f"duplicate vocabulary token {tok!r}")
            seen.add(tok)
            self._tokens.append(tok)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        words = sorted({tok for text in texts for tok in tokenize(text)})
        return cls(words)

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    def token(self, token_id: int) -> str:
        return self._tokens[token_id]

    def id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def tokens(self) -> tuple[str, ...]:
        return tuple(self._tokens)

    def encode_caption(self, text: str, max_len: int | None = None) -> list[int]:
        """Token ids for ``text`` wrapped in begin/end markers."""
        ids = [self.id(tok) for tok in tokenize(text)]
        if max_len is not None:
            ids = ids[:max_len]
        return [self.bos_id] + ids + [self.eos_id]

    def decode(self, token_ids: Sequence[int]) -> str:
        words = []
        for tid in token_ids:
            if tid == self.eos_id:
                break
            if tid in (self.pad_id, self.bos_id):
                continue
            words.append(self.token(int(tid)))
        return " ".join(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise HeadError(
                f"vocabulary file {path} must start with the reserved header "
                f"{RESERVED_TOKENS}"
            )
        return cls(lines[len(RESERVED_TOKENS) :])


@dataclass(frozen=True)
class AssessmentResult:
    """Full model output for one sample."""

    category_logits: torch.Tensor
    quality_prob: float
    explanation_ids: tuple[int, ...]
    explanation_text: str

    @property
    def category_id(self) -> int:
        return int(torch.argmax(self.category_logits).item())

    @property
    def quality_label(self) -> str:
        return "standard" if self.quality_prob >= 0.5 else "non_standard"


def _pool_tokens(fused: torch.Tensor) -> torch.Tensor:
    if fused.ndim == 2:
        return fused.mean(dim=0)
    if fused.ndim == 3:
        return fused.mean(dim=1)
    raise HeadError(f"fused features must be 2-D or 3-D, got shape {tuple(fused.shape)}")


class CategoryHead(nn.Module):
    """Mean-pool over tokens, then a two-layer MLP to category logits."""

    def __init__(self, in_dim: int, num_categories: int):
        super().__init__()
        if num_categories < 1:
            raise HeadError("number of categories is unset")
        self.num_categories = num_categories
        self.hidden = nn.Linear(in_dim, in_dim)
        self.out = nn.Linear(in_dim, num_categories)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        pooled = _pool_tokens(fused)
        return self.out(torch.nn.functional.gelu(self.hidden(pooled)))


class QualityHead(nn.Module):
    """Mean-pool over tokens, then an MLP to one sigmoid probability."""

    def __init__(self, in_dim: int):
        super().__init__()
        self.hidden = nn.Linear(in_dim, in_dim)
        self.out = nn.Linear(in_dim, 1)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        pooled = _pool_tokens(fused)
        logit = self.out(torch.nn.functional.gelu(self.hidden(pooled)))
        return torch.sigmoid(logit.squeeze(-1))


class _DecoderLayer(nn.Module):
    def __init__(self, model_dim: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = MultiHeadCrossAttention(model_dim, num_heads)
        self.self_norm = nn.LayerNorm(model_dim)
        self.cross_attn = MultiHeadCrossAttention(model_dim, num_heads)
        self.cross_norm = nn.LayerNorm(model_dim)
        self.ffn = nn.Sequential(
            nn.Linear(model_dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, model_dim)
        )
        self.ffn_norm = nn.LayerNorm(model_dim)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, causal_mask: torch.Tensor):
        x = self.self_norm(x + self.self_attn(x, x, attn_mask=causal_mask))
        x = self.cross_norm(x + self.cross_attn(x, memory))
        return self.ffn_norm(x + self.ffn(x))


class ExplanationDecoder(nn.Module):
    """Transformer decoder generating the explanation token by token,
    conditioned on the fused video-text tokens and the previous words."""

    def __init__(
        self,
        vocab_size: int,
        memory_dim: int,
        model_dim: int = 512,
        num_heads: int = 8,
        num_layers: int = 2,
        ffn_dim: int | None = None,
        max_len: int = 160,
        pad_id: int = 0,
        bos_id: int = 1,
        eos_id: int = 2,
    ):
        super().__init__()
        if max_len < 1:
            raise HeadError("max_len must be >= 1")
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.pad_id = pad_id
        self.bos_id = bos_id
        self.eos_id = eos_id
        ffn_dim = ffn_dim or 2 * model_dim
        self.token_embedding = nn.Embedding(vocab_size, model_dim)
        self.position_embedding = nn.Embedding(max_len + 2, model_dim)
        self.memory_proj = nn.Linear(memory_dim, model_dim)
        self.layers = nn.ModuleList(
            _DecoderLayer(model_dim, num_heads, ffn_dim) for _ in range(num_layers)
        )
        self.out = nn.Linear(model_dim, vocab_size)

    def _check_tokens(self, targets: torch.Tensor) -> None:
        if targets.numel() == 0:
            raise HeadError("target token sequence is empty")
        if int(targets.min()) < 0 or int(targets.max()) >= self.vocab_size:
            raise HeadError(
                f"token id out of vocabulary (size {self.vocab_size}): "
                f"range [{int(targets.min())}, {int(targets.max())}]"
            )

    def _forward_prefix(self, fused: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        """Logits for the next token at every prefix position, [B, L, V]."""
        bs, length = prefix.shape
        if length > self.max_len + 1:
            raise HeadError(
                f"decoder input length {length} exceeds max_len {self.max_len}"
            )
        positions = torch.arange(length, device=prefix.device).unsqueeze(0)
        x = self.token_embedding(prefix) + self.position_embedding(positions)
        memory = self.memory_proj(fused)
        causal = torch.triu(
            torch.ones(length, length, dtype=torch.bool, device=prefix.device), 1
        )
        pad_keys = (prefix == self.pad_id).unsqueeze(1)  # [B, 1, L]
        mask = (causal.unsqueeze(0) | pad_keys).unsqueeze(1)  # [B, 1, L, L]
        for layer in self.layers:
            x = layer(x, memory, mask)
        return self.out(x)

    def teacher_forced_logits(
        self, fused: torch.Tensor, targets: torch.Tensor
    ) -> torch.Tensor:
        """Next-token logits under teacher forcing.

        ``targets`` is [B, L] (or [L]) starting with the begin token; the
        returned row i is the distribution for targets[i + 1] and depends
        only on the fused features and targets[.. i].
        """
        squeeze = targets.ndim == 1
        if squeeze:
            targets = targets.unsqueeze(0)
            fused = fused.unsqueeze(0) if fused.ndim == 2 else fused
        self._check_tokens(targets)
        if not bool((targets[:, 0] == self.bos_id).all()):
            raise HeadError("teacher-forced targets must begin with the begin token")
        logits = self._forward_prefix(fused, targets[:, :-1])
        return logits.squeeze(0) if squeeze else logits

    @torch.no_grad()
    def greedy_decode(self, fused: torch.Tensor, max_len: int | None = None) -> list[int]:
        """Argmax decoding for one sample; returns body ids ending with the
        end token (omitted only when max_len truncates first)."""
        max_len = self.max_len if max_len is None else max_len
        if fused.ndim != 2:
            raise HeadError("greedy_decode expects a single sample (2-D fused matrix)")
        device = fused.device
        prefix = torch.tensor([[self.bos_id]], dtype=torch.long, device=device)
        generated: list[int] = []
        for _ in range(max_len):
            logits = self._forward_prefix(fused.unsqueeze(0), prefix)
            next_id = int(torch.argmax(logits[0, -1]).item())
            generated.append(next_id)
            if next_id == self.eos_id:
                break
            prefix = torch.cat(
                [prefix, torch.tensor([[next_id]], dtype=torch.long, device=device)], dim=1
            )
        return generated

    @torch.no_grad()
    def beam_decode(
        self, fused: torch.Tensor, beam_width: int, max_len: int | None = None
    ) -> list[int]:
        """Beam search over summed log-probabilities (no length penalty)."""
        if beam_width < 1:
            raise HeadError(f"beam width must be >= 1, got {beam_width}")
        max_len = self.max_len if max_len is None else max_len
        if fused.ndim != 2:
            raise HeadError("beam_decode expects a single sample (2-D fused matrix)")
        device = fused.device

        beams: list[tuple[float, list[int]]] = [(0.0, [self.bos_id])]
        finished: list[tuple[float, list[int]]] = []
        for _ in range(max_len):
            candidates: list[tuple[float, list[int]]] = []
            for score, prefix in beams:
                prefix_t = torch.tensor([prefix], dtype=torch.long, device=device)
                logits = self._forward_prefix(fused.unsqueeze(0), prefix_t)
                logprobs = torch.log_softmax(logits[0, -1], dim=-1)
                top = torch.topk(logprobs, min(beam_width, self.vocab_size))
                for logp, tid in zip(top.values.tolist(), top.indices.tolist()):
                    candidates.append((score + logp, prefix + [int(tid)]))
            candidates.sort(key=lambda item: (-item[0], item[1]))
            beams = []
            for score, seq in candidates:
                if seq[-1] == self.eos_id:
                    finished.append((score, seq))
                else:
                    beams.append((score, seq))
                if len(beams) == beam_width:
                    break
            if not beams:
                break
        pool = finished + beams
        pool.sort(key=lambda item: (-item[0], item[1]))
        best = pool[0][1]
        return best[1:]  # strip the begin token

    def decode(
        self,
        fused: torch.Tensor,
        mode: str = "greedy",
        beam_width: int = 1,
        max_len: int | None = None,
    ) -> list[int]:
        if mode == "greedy":
            return self.greedy_decode(fused, max_len=max_len)
        if mode == "beam":
            return self.beam_decode(fused, beam_width=beam_width, max_len=max_len)
        raise HeadError(f"unknown decode mode {mode!r}")


def sequence_log_prob(
    decoder: ExplanationDecoder, fused: torch.Tensor, body_ids: Sequence[int]
) -> float:
    """Summed log-probability the decoder assigns to a generated body."""
    target = torch.tensor(
        [[decoder.bos_id, *body_ids]], dtype=torch.long, device=fused.device
    )
    with torch.no_grad():
        logits = decoder.teacher_forced_logits(fused.unsqueeze(0), target)
        logprobs = torch.log_softmax(logits[0], dim=-1)
    total = 0.0
    for pos, tid in enumerate(body_ids):
        total += float(logprobs[pos, tid].item())
    return total
