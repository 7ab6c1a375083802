"""Visual and text encoder contracts plus deterministic toy providers.

The toy providers make the whole pipeline runnable and testable without any
pretrained backbone: the visual side turns per-frame content hashes into
seeded random projections (one token per frame) and the text side uses
seeded bag-of-subword hashing per step.  Both are pure functions of
(input bytes, seed) and always emit the configured widths.

Real backbones plug in behind the same contract as adapters selected
explicitly through :class:`EncoderConfig`; they are never auto-detected.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ActionLexiconEntry, SampleRecord, resolve_media_path, sample_frames
from .text import tokenize

FIXTURE_HEADER = "# fitassess feature fixture v1"


class EncoderError(ValueError):
    """Invalid encoder configuration or input."""


class ProviderUnavailableError(EncoderError):
    """A non-toy provider was requested but is not installed/configured."""


class DimensionMismatchError(EncoderError):
    """A feature matrix does not match the configured width."""


@dataclass(frozen=True)
class EncoderConfig:
    visual_dim: int = 32
    text_dim: int = 32
    frames_per_video: int = 6
    provider: str = "toy"
    seed: int = 0
    trainable: bool = False  # adapters only; toy providers have no weights
    frame_jitter: bool = False  # jittered frame sampling for raw media

    def __post_init__(self):
        for name in ("visual_dim", "text_dim", "frames_per_video"):
            if getattr(self, name) < 1:
                raise EncoderError(f"encoder config field {name!r} must be >= 1")


def check_feature_matrix(values, dim: int | None = None, name: str = "features") -> np.ndarray:
    """Validate an N x d feature matrix and return it as read-only float32."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise EncoderError(f"{name} must be a 2-D matrix with N,d >= 1, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise EncoderError(f"{name} contains non-finite values")
    if dim is not None and arr.shape[1] != dim:
        raise DimensionMismatchError(
            f"{name} has width {arr.shape[1]}, expected {dim}"
        )
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


# --- feature fixture files ---------------------------------------------------

def save_feature_fixture(values: np.ndarray, path: str | Path) -> None:
    """Write a feature matrix as text: header, "N d" line, row-major values."""
    arr = check_feature_matrix(values)
    lines = [FIXTURE_HEADER, f"{arr.shape[0]} {arr.shape[1]}"]
    for row in arr:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_feature_fixture(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise EncoderError(f"feature fixture not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    body = [ln for ln in lines if ln.strip() and not ln.startswith("#")]
    if not body:
        raise EncoderError(f"feature fixture {path} is empty")
    try:
        n, d = (int(tok) for tok in body[0].split())
        rows = [[float(tok) for tok in ln.split()] for ln in body[1 : 1 + n]]
    except ValueError as exc:
        raise EncoderError(f"feature fixture {path} is malformed: {exc}") from None
    if len(rows) != n or any(len(r) != d for r in rows):
        raise EncoderError(
            f"feature fixture {path} body does not match declared shape {n}x{d}"
        )
    return check_feature_matrix(np.array(rows, dtype=np.float32), name=str(path))


# --- toy providers -----------------------------------------------------------

def _hash_to_rng(seed: int, *parts: bytes) -> np.random.Generator:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(seed).encode("utf-8"))
    for part in parts:
        h.update(b"\x1f")
        h.update(part)
    return np.random.default_rng(int.from_bytes(h.digest(), "little"))


def _frame_token(frame: bytes, slot: int, seed: int, dim: int) -> np.ndarray:
    rng = _hash_to_rng(seed, b"frame", frame, str(slot).encode())
    return rng.standard_normal(dim) / np.sqrt(dim)


def _subwords(text: str) -> list[str]:
    # word tokens plus their character trigrams, so near-identical steps
    # still land on overlapping buckets
    tokens = tokenize(text)
    subs = list(tokens)
    for tok in tokens:
        if len(tok) > 3:
            subs.extend(tok[i : i + 3] for i in range(len(tok) - 2))
    return subs


def _hashed_text_vector(text: str, seed: int, dim: int) -> np.ndarray:
    if not text.strip():
        raise EncoderError("cannot encode an empty step string")
    vec = np.zeros(dim, dtype=np.float64)
    for sub in _subwords(text):
        digest = hashlib.blake2b(
            f"{seed}|sub|{sub}".encode("utf-8"), digest_size=8
        ).digest()
        raw = int.from_bytes(digest, "little")
        bucket = raw % dim
        sign = 1.0 if (raw >> 33) & 1 else -1.0
        vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0:
        vec = vec / norm
    return vec


def visual_encode(source, config: EncoderConfig) -> np.ndarray:
    """Encode a video input into an N x visual_dim feature matrix.

    Accepts three input kinds:

    * an already-computed feature matrix (array) -- validated pass-through,
    * a path to a feature fixture file,
    * a sequence of raw frame byte strings -- encoded by the configured
      provider (``toy`` hashes each frame with its slot index).
    """
    if isinstance(source, (str, Path)):
        return check_feature_matrix(
            load_feature_fixture(source), dim=config.visual_dim, name=str(source)
        )
    if isinstance(source, np.ndarray) or (
        hasattr(source, "ndim") and hasattr(source, "shape")
    ):
        return check_feature_matrix(np.asarray(source), dim=config.visual_dim)
    if isinstance(source, Sequence) and source and isinstance(source[0], (bytes, bytearray)):
        if config.provider != "toy":
            raise_provider_unavailable(config.provider)
        tokens = [
            _frame_token(bytes(frame), slot, config.seed, config.visual_dim)
            for slot, frame in enumerate(source)
        ]
        return check_feature_matrix(np.stack(tokens))
    raise EncoderError(
        "visual_encode expects a feature matrix, a fixture path, or a sequence "
        f"of frame byte strings; got {type(source).__name__}"
    )


def text_encode(entry: ActionLexiconEntry, config: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Encode one lexicon entry into (step rows M x E, global row 1 x E)."""
    if config.provider != "toy":
        raise_provider_unavailable(config.provider)
    step_rows = [
        _hashed_text_vector(step, config.seed, config.text_dim) for step in entry.steps
    ]
    global_row = _hashed_text_vector(
        entry.general_instruction, config.seed, config.text_dim
    )
    steps = check_feature_matrix(np.stack(step_rows), dim=config.text_dim, name="steps")
    global_mat = check_feature_matrix(
        global_row[None, :], dim=config.text_dim, name="general instruction"
    )
    return steps, global_mat


def raise_provider_unavailable(provider: str) -> None:
    raise ProviderUnavailableError(
        f"encoder provider {provider!r} is not available in this installation; "
        "pretrained adapters need their backbone weights configured explicitly, "
        "use provider='toy' for self-contained runs"
    )


def frames_from_media(
    record: SampleRecord, media_path: Path, k: int, jitter_rng=None
) -> list[bytes]:
    """Desk-scale frame extraction: slice the media bytes into frame_count
    chunks and pick the k uniformly sampled ones."""
    if not media_path.exists():
        raise EncoderError(f"media file not found: {media_path}")
    blob = media_path.read_bytes()
    if not blob:
        raise EncoderError(f"media file is empty: {media_path}")
    total = record.frame_count
    chunk = max(1, len(blob) // total)
    indices = sample_frames(record, k, jitter_rng=jitter_rng)
    return [blob[i * chunk : (i + 1) * chunk] or blob[-chunk:] for i in indices]


def encode_record(
    record: SampleRecord, manifest_path: str | Path, config: EncoderConfig
) -> np.ndarray:
    """Encode one manifest record, dispatching on fixture vs raw media.

    With ``frame_jitter`` enabled, raw-media frame picks are jittered inside
    their segments by a per-record rng derived from the config seed, so the
    augmentation itself stays reproducible.
    """
    media = resolve_media_path(manifest_path, record.media_ref)
    if media.suffix == ".txt" and media.name.endswith(".fixture.txt"):
        return visual_encode(media, config)
    jitter_rng = None
    if config.frame_jitter:
        jitter_rng = _hash_to_rng(config.seed, b"jitter", record.sample_id.encode())
    frames = frames_from_media(record, media, config.frames_per_video, jitter_rng=jitter_rng)
    return visual_encode(frames, config)
