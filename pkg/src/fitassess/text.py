"""Shared text tokenization rules.

The same word tokenizer is used for caption metrics, corpus statistics and
the desk-scale vocabulary so that scores and generated text stay comparable.
The rule is pinned bit-exactly:

* lowercase the input,
* replace every character that is not a letter, digit or apostrophe with a
  space,
* split on whitespace.

Sentences are split on runs of ``.``, ``!`` or ``?``; empty chunks are
dropped.
"""

from __future__ import annotations

import re

_NON_WORD = re.compile(r"[^a-z0-9']+")
_SENTENCE_BREAK = re.compile(r"[.!?]+")


def tokenize(text: str) -> list[str]:
    """Split ``text`` into lowercase word tokens under the pinned rule."""
    return [tok for tok in _NON_WORD.split(text.lower()) if tok]


def split_sentences(text: str) -> list[str]:
    """Split ``text`` into sentences on ``.``, ``!`` and ``?`` runs."""
    return [chunk.strip() for chunk in _SENTENCE_BREAK.split(text) if chunk.strip()]


def ngrams(tokens: list[str], n: int) -> list[tuple[str, ...]]:
    """All contiguous n-grams of ``tokens`` (empty list if too short)."""
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]
