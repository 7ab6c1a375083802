"""Caption metrics, classification accuracies and corpus statistics.

Every metric is pinned bit-exactly here because upstream papers leave
tokenization and smoothing open:

* Tokenization: :func:`fitassess.text.tokenize` (lowercase, punctuation
  stripped, whitespace split) for hypotheses and references alike.
* BLEU: corpus-level BLEU-4.  Modified n-gram precisions are clipped against
  the reference; orders n >= 2 get add-one smoothing on both numerator and
  denominator.  Zero unigram overlap yields 0.  Brevity penalty is
  exp(1 - r/c) for c < r, else 1.
* ROUGE-L: per-pair LCS F-measure with beta = 1.2, i.e.
  F = (1 + beta^2) P R / (R + beta^2 P); corpus mean.
* CIDEr: per sample the mean over n = 1..4 of the clipped TF-IDF cosine
  times a Gaussian length penalty exp(-(len_h - len_r)^2 / (2 * 6^2)).
  TF is the raw n-gram count; IDF is ln(N) - ln(max(1, df)) with document
  frequencies taken over the evaluated reference corpus (df floored at 1,
  so a single-reference corpus degenerates to 0).  Scores lie in [0, 1].
* METEOR(exact+stem): greedy leftmost unigram alignment, exact stage then
  stem stage (light suffix stemmer), F = 10PR / (R + 9P), fragmentation
  penalty 0.5 * (chunks / matches)^3, score = F * (1 - penalty); corpus
  mean.  A synonym stage is intentionally not wired in by default.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest, Quality
from .text import ngrams, split_sentences, tokenize

CIDER_SIGMA = 6.0
ROUGE_BETA = 1.2
BLEU_MAX_ORDER = 4


class MetricError(ValueError):
    """Invalid metric input (e.g. empty corpus, mismatched lengths)."""


def _check_corpus(hypotheses: Sequence[str], references: Sequence[str]) -> None:
    if len(hypotheses) != len(references):
        raise MetricError(
            f"hypotheses and references differ in length: "
            f"{len(hypotheses)} vs {len(references)}"
        )
    if not hypotheses:
        raise MetricError("empty corpus")


def bleu(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Corpus-level BLEU-4 in [0, 1]."""
    _check_corpus(hypotheses, references)
    matches = [0] * BLEU_MAX_ORDER
    totals = [0] * BLEU_MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_toks = tokenize(hyp)
        ref_toks = tokenize(ref)
        hyp_len += len(hyp_toks)
        ref_len += len(ref_toks)
        for n in range(1, BLEU_MAX_ORDER + 1):
            hyp_counts = Counter(ngrams(hyp_toks, n))
            ref_counts = Counter(ngrams(ref_toks, n))
            matches[n - 1] += sum(
                min(count, ref_counts[gram]) for gram, count in hyp_counts.items()
            )
            totals[n - 1] += sum(hyp_counts.values())

    if totals[0] == 0 or matches[0] == 0:
        return 0.0
    log_sum = math.log(matches[0] / totals[0])
    for n in range(2, BLEU_MAX_ORDER + 1):
        log_sum += math.log((matches[n - 1] + 1) / (totals[n - 1] + 1))
    geo_mean = math.exp(log_sum / BLEU_MAX_ORDER)
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return brevity * geo_mean


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for tok_a in a:
        cur = [0] * (len(b) + 1)
        for j, tok_b in enumerate(b, start=1):
            if tok_a == tok_b:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Corpus mean of the LCS F-measure (beta = 1.2)."""
    _check_corpus(hypotheses, references)
    scores = []
    beta_sq = ROUGE_BETA**2
    for hyp, ref in zip(hypotheses, references):
        hyp_toks = tokenize(hyp)
        ref_toks = tokenize(ref)
        lcs = _lcs_length(hyp_toks, ref_toks)
        if lcs == 0 or not hyp_toks or not ref_toks:
            scores.append(0.0)
            continue
        precision = lcs / len(hyp_toks)
        recall = lcs / len(ref_toks)
        scores.append(
            (1 + beta_sq) * precision * recall / (recall + beta_sq * precision)
        )
    return sum(scores) / len(scores)


def cider(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Consensus TF-IDF n-gram similarity in [0, 1] (see module docstring)."""
    _check_corpus(hypotheses, references)
    n_docs = len(references)
    ref_token_lists = [tokenize(ref) for ref in references]
    hyp_token_lists = [tokenize(hyp) for hyp in hypotheses]

    doc_freq: list[Counter] = [Counter() for _ in range(BLEU_MAX_ORDER)]
    for toks in ref_token_lists:
        for n in range(1, BLEU_MAX_ORDER + 1):
            for gram in set(ngrams(toks, n)):
                doc_freq[n - 1][gram] += 1

    def tfidf_vector(toks: list[str], n: int) -> dict:
        vec = {}
        for gram, count in Counter(ngrams(toks, n)).items():
            idf = math.log(n_docs) - math.log(max(1, doc_freq[n - 1][gram]))
            vec[gram] = count * idf
        return vec

    sample_scores = []
    for hyp_toks, ref_toks in zip(hyp_token_lists, ref_token_lists):
        penalty = math.exp(
            -((len(hyp_toks) - len(ref_toks)) ** 2) / (2 * CIDER_SIGMA**2)
        )
        per_n = []
        for n in range(1, BLEU_MAX_ORDER + 1):
            hyp_vec = tfidf_vector(hyp_toks, n)
            ref_vec = tfidf_vector(ref_toks, n)
            norm_h = math.sqrt(sum(v * v for v in hyp_vec.values()))
            norm_r = math.sqrt(sum(v * v for v in ref_vec.values()))
            if norm_h == 0.0 or norm_r == 0.0:
                per_n.append(0.0)
                continue
            dot = sum(
                min(value, ref_vec[gram]) * ref_vec[gram]
                for gram, value in hyp_vec.items()
                if gram in ref_vec
            )
            per_n.append(penalty * dot / (norm_h * norm_r))
        sample_scores.append(sum(per_n) / BLEU_MAX_ORDER)
    return sum(sample_scores) / len(sample_scores)


_STEM_RULES = (
    ("sses", "ss"),
    ("ies", "i"),
    ("ing", ""),
    ("ed", ""),
    ("ly", ""),
    ("es", ""),
    ("s", ""),
)


def stem(token: str) -> str:
    """Light suffix stemmer: first matching rule wins, stems stay >= 3 chars."""
    for suffix, repl in _STEM_RULES:
        if token.endswith(suffix):
            if suffix == "s" and token.endswith("ss"):
                continue
            candidate = token[: len(token) - len(suffix)] + repl
            if len(candidate) >= 3:
                return candidate
    return token


def _greedy_align(
    hyp_toks: list[str], ref_toks: list[str]
) -> list[tuple[int, int]]:
    """Leftmost greedy unigram alignment: exact stage then stem stage."""
    pairs: list[tuple[int, int]] = []
    hyp_used = [False] * len(hyp_toks)
    ref_used = [False] * len(ref_toks)

    def run_stage(key):
        for i, htok in enumerate(hyp_toks):
            if hyp_used[i]:
                continue
            for j, rtok in enumerate(ref_toks):
                if not ref_used[j] and key(htok) == key(rtok):
                    pairs.append((i, j))
                    hyp_used[i] = True
                    ref_used[j] = True
                    break

    run_stage(lambda tok: tok)
    run_stage(stem)
    return sorted(pairs)


def _chunk_count(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """METEOR with exact and stem stages (no synonym stage); corpus mean."""
    _check_corpus(hypotheses, references)
    scores = []
    for hyp, ref in zip(hypotheses, references):
        hyp_toks = tokenize(hyp)
        ref_toks = tokenize(ref)
        pairs = _greedy_align(hyp_toks, ref_toks)
        m = len(pairs)
        if m == 0 or not hyp_toks or not ref_toks:
            scores.append(0.0)
            continue
        precision = m / len(hyp_toks)
        recall = m / len(ref_toks)
        f_mean = 10 * precision * recall / (recall + 9 * precision)
        penalty = 0.5 * (_chunk_count(pairs) / m) ** 3
        scores.append(f_mean * (1.0 - penalty))
    return sum(scores) / len(scores)


def topk_accuracy(logit_rows, labels: Sequence[int], k: int) -> float:
    """Fraction of rows whose label ranks in the k highest logits.

    Ties resolve toward the lower index, matching a stable descending sort.
    """
    logits = np.asarray(logit_rows, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise MetricError("logit rows must form a non-empty 2-D matrix")
    if len(labels) != logits.shape[0]:
        raise MetricError("labels must match the number of logit rows")
    if k < 1:
        raise MetricError("k must be >= 1")
    k = min(k, logits.shape[1])
    hits = 0
    for row, label in zip(logits, labels):
        top = np.argsort(-row, kind="stable")[:k]
        hits += int(label in top)
    return hits / logits.shape[0]


# --- corpus statistics ---------------------------------------------------------

@dataclass(frozen=True)
class CorpusStats:
    avg_words: float
    avg_sentences: float
    vocab_size: int
    avg_reasoning_steps: float
    avg_suggestions: float

    def to_dict(self) -> dict:
        return {
            "avg_words": self.avg_words,
            "avg_sentences": self.avg_sentences,
            "vocab_size": self.vocab_size,
            "avg_reasoning_steps": self.avg_reasoning_steps,
            "avg_suggestions": self.avg_suggestions,
        }


def _load_keyword_resource(name: str) -> list[tuple[str, ...]]:
    raw = resources.files("fitassess.resources").joinpath(name).read_text("utf-8")
    phrases = []
    for line in raw.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            phrases.append(tuple(tokenize(line)))
    return phrases


def load_causal_keywords() -> list[tuple[str, ...]]:
    return _load_keyword_resource("causal_keywords.txt")


def load_corrective_keywords() -> list[tuple[str, ...]]:
    return _load_keyword_resource("corrective_keywords.txt")


def count_keyword_occurrences(tokens: list[str], phrases: list[tuple[str, ...]]) -> int:
    """Non-overlapping phrase occurrences over the token stream; at each
    position the longest matching phrase wins and consumes its span."""
    ordered = sorted(phrases, key=len, reverse=True)
    count = 0
    i = 0
    while i < len(tokens):
        matched = 0
        for phrase in ordered:
            if tuple(tokens[i : i + len(phrase)]) == phrase:
                matched = len(phrase)
                break
        if matched:
            count += 1
            i += matched
        else:
            i += 1
    return count


def corpus_statistics(
    texts: Sequence[str],
    causal_keywords: list[tuple[str, ...]] | None = None,
    corrective_keywords: list[tuple[str, ...]] | None = None,
) -> CorpusStats:
    """Scale, vocabulary and reasoning statistics of an explanation corpus."""
    if not texts:
        raise MetricError("empty text list")
    causal = causal_keywords if causal_keywords is not None else load_causal_keywords()
    corrective = (
        corrective_keywords if corrective_keywords is not None else load_corrective_keywords()
    )
    vocab: set[str] = set()
    word_counts, sentence_counts, reasoning, suggestions = [], [], [], []
    for text in texts:
        tokens = tokenize(text)
        vocab.update(tokens)
        word_counts.append(len(tokens))
        sentence_counts.append(len(split_sentences(text)))
        reasoning.append(count_keyword_occurrences(tokens, causal))
        suggestions.append(count_keyword_occurrences(tokens, corrective))
    n = len(texts)
    return CorpusStats(
        avg_words=sum(word_counts) / n,
        avg_sentences=sum(sentence_counts) / n,
        vocab_size=len(vocab),
        avg_reasoning_steps=sum(reasoning) / n,
        avg_suggestions=sum(suggestions) / n,
    )


# --- whole-model evaluation ----------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    bleu: float
    meteor: float
    cider: float
    rouge_l: float
    top1: float
    top5: float
    quality_acc: float
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "meteor": self.meteor,
            "cider": self.cider,
            "rouge_l": self.rouge_l,
            "top1": self.top1,
            "top5": self.top5,
            "quality_acc": self.quality_acc,
            "sample_count": self.sample_count,
        }


def format_report_table(report: MetricReport) -> str:
    """Flat table with caption metrics scaled by 100."""
    rows = [
        ("samples", f"{report.sample_count}"),
        ("BLEU", f"{100 * report.bleu:.2f}"),
        ("METEOR(exact+stem)", f"{100 * report.meteor:.2f}"),
        ("CIDEr", f"{100 * report.cider:.2f}"),
        ("ROUGE-L", f"{100 * report.rouge_l:.2f}"),
        ("TOP1", f"{report.top1:.4f}"),
        ("TOP5", f"{report.top5:.4f}"),
        ("quality Acc", f"{report.quality_acc:.4f}"),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


def save_report(report: MetricReport, out_dir: str | Path, stem_name: str = "report") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem_name}.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out / f"{stem_name}.txt").write_text(
        format_report_table(report) + "\n", encoding="utf-8"
    )


def evaluate_model(
    pipeline,
    manifest: DatasetManifest,
    manifest_path: str | Path,
    sample_ids: Sequence[str] | None = None,
    decode_mode: str = "greedy",
    beam_width: int = 1,
    return_outputs: bool = False,
):
    """Full inference over the chosen samples, aggregated into a report.

    The category is predicted before any step text is retrieved (see
    :meth:`AssessmentPipeline.assess`), so evaluation never peeks at the
    ground-truth category.
    """
    wanted = set(sample_ids) if sample_ids is not None else None
    records = [
        rec for rec in manifest.records if wanted is None or rec.sample_id in wanted
    ]
    if not records:
        raise MetricError("no records selected for evaluation")

    logit_rows, labels = [], []
    correct_quality = 0
    hypotheses, references, outputs = [], [], []
    for rec in records:
        result = pipeline.assess_record(
            rec, manifest_path, decode_mode=decode_mode, beam_width=beam_width
        )
        logit_rows.append(result.category_logits.numpy())
        labels.append(rec.category_id)
        verdict_standard = result.quality_prob >= 0.5
        correct_quality += int(verdict_standard == (rec.quality is Quality.STANDARD))
        hypotheses.append(result.explanation_text)
        references.append(rec.cot_text)
        if return_outputs:
            outputs.append(
                {
                    "sample_id": rec.sample_id,
                    "predicted_category": result.category_id,
                    "true_category": rec.category_id,
                    "quality_prob": result.quality_prob,
                    "explanation": result.explanation_text,
                }
            )

    logits = np.stack(logit_rows)
    report = MetricReport(
        bleu=bleu(hypotheses, references),
        meteor=meteor(hypotheses, references),
        cider=cider(hypotheses, references),
        rouge_l=rouge_l(hypotheses, references),
        top1=topk_accuracy(logits, labels, 1),
        top5=topk_accuracy(logits, labels, 5),
        quality_acc=correct_quality / len(records),
        sample_count=len(records),
    )
    if return_outputs:
        return report, outputs
    return report
