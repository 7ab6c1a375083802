"""Dataset schema, manifest I/O, deterministic splits, frame sampling and the
synthetic desk-scale dataset generator.

A manifest is a single versioned JSON document holding every annotated sample
plus the per-category lexicon (five technical steps and one general
instruction).  All reads and writes are UTF-8.  Loaded manifests are
immutable: sharing one across concurrent readers is safe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

MANIFEST_FORMAT_VERSION = 1
STEPS_PER_CATEGORY = 5

TRAIN_FRACTION = 0.70
VAL_FRACTION = 0.15


class DatasetError(ValueError):
    """Base error for manifest / split / sampling problems."""


class ManifestSchemaError(DatasetError):
    """A record or lexicon entry violates the manifest schema."""


class MissingLexiconError(DatasetError):
    """A record references a category with no lexicon entry."""


class WorkoutMode(str, Enum):
    MANUAL = "manual"
    APPARATUS = "apparatus"


class Quality(str, Enum):
    STANDARD = "standard"
    NON_STANDARD = "non_standard"


class Viewpoint(str, Enum):
    FRONT = "front"
    SIDE = "side"
    BACK = "back"


@dataclass(frozen=True)
class SampleRecord:
    """One annotated video sample."""

    sample_id: str
    media_ref: str
    category_id: int
    category_name: str
    workout_mode: WorkoutMode
    workout_type: str
    quality: Quality
    viewpoint: Viewpoint
    duration_s: float
    frame_count: int
    cot_text: str


@dataclass(frozen=True)
class ActionLexiconEntry:
    """Standard technical steps for one action category."""

    category_id: int
    steps: tuple[str, ...]
    general_instruction: str


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]
    lexicon: Mapping[int, ActionLexiconEntry]
    num_categories: int

    def record_by_id(self, sample_id: str) -> SampleRecord:
        for rec in self.records:
            if rec.sample_id == sample_id:
                return rec
        raise KeyError(sample_id)


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint, exhaustive train/val/test sample-id sets."""

    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]
    seed: int

    def subset(self, name: str) -> frozenset[str]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise DatasetError(f"unknown split name: {name!r}") from None


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ManifestSchemaError(message)


def _validate_lexicon_entry(entry: ActionLexiconEntry) -> None:
    where = f"lexicon entry for category {entry.category_id}"
    _require(entry.category_id >= 0, f"{where}: category_id must be >= 0")
    _require(
        len(entry.steps) == STEPS_PER_CATEGORY,
        f"{where}: field 'steps' must contain exactly {STEPS_PER_CATEGORY} steps, "
        f"got {len(entry.steps)}",
    )
    for i, step in enumerate(entry.steps):
        _require(bool(step.strip()), f"{where}: field 'steps[{i}]' is empty")
    _require(
        bool(entry.general_instruction.strip()),
        f"{where}: field 'general_instruction' is empty",
    )


def _validate_record(rec: SampleRecord, num_categories: int) -> None:
    where = f"record {rec.sample_id!r}"
    _require(bool(rec.sample_id), "record with empty sample_id")
    _require(
        0 <= rec.category_id < num_categories,
        f"{where}: field 'category_id' {rec.category_id} outside [0, {num_categories})",
    )
    _require(rec.frame_count >= 1, f"{where}: field 'frame_count' must be >= 1")
    _require(rec.duration_s > 0, f"{where}: field 'duration_s' must be > 0")
    _require(bool(rec.cot_text.strip()), f"{where}: field 'cot_text' is empty")


def validate_manifest(manifest: DatasetManifest) -> None:
    """Check every manifest invariant; raises on the first violation."""
    _require(
        manifest.num_categories == len(manifest.lexicon),
        f"num_categories {manifest.num_categories} does not match "
        f"{len(manifest.lexicon)} lexicon entries",
    )
    for cid, entry in manifest.lexicon.items():
        _require(
            cid == entry.category_id,
            f"lexicon key {cid} does not match entry category_id {entry.category_id}",
        )
        _validate_lexicon_entry(entry)
    seen: set[str] = set()
    for rec in manifest.records:
        if rec.sample_id in seen:
            raise ManifestSchemaError(f"duplicate sample_id {rec.sample_id!r}")
        seen.add(rec.sample_id)
        _validate_record(rec, manifest.num_categories)
        if rec.category_id not in manifest.lexicon:
            raise MissingLexiconError(
                f"record {rec.sample_id!r} references category {rec.category_id} "
                "with no lexicon entry"
            )


def _record_to_dict(rec: SampleRecord) -> dict:
    return {
        "sample_id": rec.sample_id,
        "media_ref": rec.media_ref,
        "category_id": rec.category_id,
        "category_name": rec.category_name,
        "workout_mode": rec.workout_mode.value,
        "workout_type": rec.workout_type,
        "quality": rec.quality.value,
        "viewpoint": rec.viewpoint.value,
        "duration_s": rec.duration_s,
        "frame_count": rec.frame_count,
        "cot_text": rec.cot_text,
    }


def _record_from_dict(obj: dict, index: int) -> SampleRecord:
    where = f"record[{index}] ({obj.get('sample_id', '<no id>')!r})"
    try:
        return SampleRecord(
            sample_id=str(obj["sample_id"]),
            media_ref=str(obj["media_ref"]),
            category_id=int(obj["category_id"]),
            category_name=str(obj["category_name"]),
            workout_mode=WorkoutMode(obj["workout_mode"]),
            workout_type=str(obj["workout_type"]),
            quality=Quality(obj["quality"]),
            viewpoint=Viewpoint(obj["viewpoint"]),
            duration_s=float(obj["duration_s"]),
            frame_count=int(obj["frame_count"]),
            cot_text=str(obj["cot_text"]),
        )
    except KeyError as exc:
        raise ManifestSchemaError(f"{where}: missing field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ManifestSchemaError(f"{where}: {exc}") from None


def _lexicon_entry_from_dict(obj: dict) -> ActionLexiconEntry:
    try:
        return ActionLexiconEntry(
            category_id=int(obj["category_id"]),
            steps=tuple(str(s) for s in obj["steps"]),
            general_instruction=str(obj["general_instruction"]),
        )
    except KeyError as exc:
        raise ManifestSchemaError(
            f"lexicon entry missing field {exc.args[0]!r}"
        ) from None


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "format_version": MANIFEST_FORMAT_VERSION,
        "num_categories": manifest.num_categories,
        "lexicon": [
            {
                "category_id": entry.category_id,
                "steps": list(entry.steps),
                "general_instruction": entry.general_instruction,
            }
            for _, entry in sorted(manifest.lexicon.items())
        ],
        "records": [_record_to_dict(rec) for rec in manifest.records],
    }


def manifest_from_dict(obj: dict) -> DatasetManifest:
    if not isinstance(obj, dict):
        raise ManifestSchemaError("manifest document must be a JSON object")
    version = obj.get("format_version")
    if version != MANIFEST_FORMAT_VERSION:
        raise ManifestSchemaError(
            f"unsupported manifest format_version {version!r} "
            f"(expected {MANIFEST_FORMAT_VERSION})"
        )
    lexicon: dict[int, ActionLexiconEntry] = {}
    for entry_obj in obj.get("lexicon", []):
        entry = _lexicon_entry_from_dict(entry_obj)
        if entry.category_id in lexicon:
            raise ManifestSchemaError(
                f"duplicate lexicon entry for category {entry.category_id}"
            )
        lexicon[entry.category_id] = entry
    records = tuple(
        _record_from_dict(rec_obj, i) for i, rec_obj in enumerate(obj.get("records", []))
    )
    manifest = DatasetManifest(
        records=records,
        lexicon=lexicon,
        num_categories=int(obj.get("num_categories", len(lexicon))),
    )
    validate_manifest(manifest)
    return manifest


def dumps_manifest(manifest: DatasetManifest) -> str:
    validate_manifest(manifest)
    return json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True) + "\n"


def loads_manifest(text: str) -> DatasetManifest:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestSchemaError(f"manifest is not valid JSON: {exc}") from None
    return manifest_from_dict(obj)


def load_manifest(source: str | Path) -> DatasetManifest:
    """Load and fully validate a manifest file."""
    path = Path(source)
    if not path.exists():
        raise DatasetError(f"manifest file not found: {path}")
    return loads_manifest(path.read_text(encoding="utf-8"))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    validate_manifest(manifest)
    Path(path).write_text(dumps_manifest(manifest), encoding="utf-8")


def load_lexicon(source: str | Path) -> dict[int, ActionLexiconEntry]:
    """Load a standalone lexicon file (category -> 5 steps + instruction)."""
    try:
        obj = json.loads(Path(source).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestSchemaError(f"lexicon file is not valid JSON: {exc}") from None
    lexicon = {}
    for entry_obj in obj.get("entries", []):
        entry = _lexicon_entry_from_dict(entry_obj)
        if entry.category_id in lexicon:
            raise ManifestSchemaError(
                f"duplicate lexicon entry for category {entry.category_id}"
            )
        _validate_lexicon_entry(entry)
        lexicon[entry.category_id] = entry
    return lexicon


def save_lexicon(lexicon: Mapping[int, ActionLexiconEntry], path: str | Path) -> None:
    obj = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "entries": [
            {
                "category_id": entry.category_id,
                "steps": list(entry.steps),
                "general_instruction": entry.general_instruction,
            }
            for _, entry in sorted(lexicon.items())
        ],
    }
    Path(path).write_text(
        json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def split_dataset(manifest: DatasetManifest, seed: int) -> SplitAssignment:
    """Deterministically partition the manifest into 70/15/15 splits.

    Sizes are round(0.70 * n) and round(0.15 * n) for train and val (Python
    banker's rounding), with the remainder going to test; this stays within
    one sample of the exact ratios.  The assignment is an unstratified
    uniform shuffle of the sorted sample ids under ``seed``.
    """
    n = len(manifest.records)
    if n < 3:
        raise DatasetError(f"need at least 3 records to split, got {n}")
    ids = sorted(rec.sample_id for rec in manifest.records)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    order = rng.permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = round(TRAIN_FRACTION * n)
    n_val = round(VAL_FRACTION * n)
    train = frozenset(shuffled[:n_train])
    val = frozenset(shuffled[n_train : n_train + n_val])
    test = frozenset(shuffled[n_train + n_val :])
    return SplitAssignment(train=train, val=val, test=test, seed=seed)


def split_to_dict(split: SplitAssignment) -> dict:
    return {
        "seed": split.seed,
        "train": sorted(split.train),
        "val": sorted(split.val),
        "test": sorted(split.test),
    }


def save_split(split: SplitAssignment, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(split_to_dict(split), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_split(source: str | Path) -> SplitAssignment:
    obj = json.loads(Path(source).read_text(encoding="utf-8"))
    return SplitAssignment(
        train=frozenset(obj["train"]),
        val=frozenset(obj["val"]),
        test=frozenset(obj["test"]),
        seed=int(obj.get("seed", 0)),
    )


def sample_frames(record: SampleRecord, k: int, jitter_rng=None) -> list[int]:
    """Pick ``k`` uniformly spaced frame indices from the record.

    Index i is floor(i * frame_count / k); indices are non-decreasing and in
    [0, frame_count).  With ``jitter_rng`` (a numpy Generator) each index is
    drawn uniformly from its segment instead, for training-time augmentation.
    """
    if k <= 0:
        raise DatasetError(f"frame count k must be >= 1, got {k}")
    total = record.frame_count
    if jitter_rng is None:
        return [i * total // k for i in range(k)]
    indices = []
    for i in range(k):
        lo = i * total // k
        hi = max(lo + 1, (i + 1) * total // k)
        indices.append(int(jitter_rng.integers(lo, hi)))
    return indices


# --- synthetic desk-scale dataset ------------------------------------------

_CATEGORY_BANK = [
    ("dumbbell lateral raise", "dumbbell", WorkoutMode.APPARATUS),
    ("barbell deadlift", "barbell", WorkoutMode.APPARATUS),
    ("bodyweight squat", "aerobics", WorkoutMode.MANUAL),
    ("kettlebell swing", "kettlebell", WorkoutMode.APPARATUS),
    ("seated cable row", "cable machine", WorkoutMode.APPARATUS),
    ("walking lunge", "aerobics", WorkoutMode.MANUAL),
    ("overhead shoulder press", "dumbbell", WorkoutMode.APPARATUS),
    ("front plank hold", "core training", WorkoutMode.MANUAL),
    ("barbell bent-over row", "barbell", WorkoutMode.APPARATUS),
    ("standing calf raise", "aerobics", WorkoutMode.MANUAL),
    ("roundhouse kick drill", "martial arts", WorkoutMode.MANUAL),
    ("straight punch combo", "martial arts", WorkoutMode.MANUAL),
]

_FAULT_BANK = [
    "lower back", "knee line", "elbow path", "shoulder girdle", "hip hinge",
    "wrist angle", "neck position", "ankle base", "torso lean", "grip width",
]

_MUSCLE_BANK = [
    "target muscles", "core", "glutes", "lats", "quadriceps",
    "deltoids", "hamstrings", "calves", "forearms", "spinal erectors",
]

_CUE_BANK = [
    "core", "shoulder blades", "hips", "knees", "chest",
    "heels", "chin", "elbows", "lower back", "stance",
]


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the synthetic dataset generator."""

    categories: int
    samples_per_category: int
    vocab_size: int = 48
    seed: int = 0
    frames_per_video: int = 6
    feature_dim: int = 32

    def __post_init__(self):
        for name in ("categories", "samples_per_category", "vocab_size",
                     "frames_per_video", "feature_dim"):
            if getattr(self, name) < 1:
                raise DatasetError(f"synthetic spec field {name!r} must be >= 1")


def _category_profile(index: int) -> tuple[str, str, WorkoutMode]:
    name, wtype, mode = _CATEGORY_BANK[index % len(_CATEGORY_BANK)]
    if index >= len(_CATEGORY_BANK):
        name = f"{name} variant {index // len(_CATEGORY_BANK) + 1}"
    return name, wtype, mode


def _pool(bank: list[str], vocab_size: int) -> list[str]:
    # vocab_size loosely caps filler variety; at least two choices remain.
    width = max(2, min(len(bank), vocab_size // 8))
    return bank[:width]


def synthetic_lexicon_entry(category_id: int, name: str) -> ActionLexiconEntry:
    steps = (
        f"Set the starting stance for the {name} with the feet planted and the grip secured.",
        f"Brace the core and align the spine before the first {name} repetition begins.",
        f"Drive the working limbs through the main {name} movement at a controlled tempo.",
        f"Hold the top position of the {name} briefly without losing joint alignment.",
        f"Return along the same path and finish the {name} with full body control.",
    )
    instruction = (
        f"Perform the {name} through its full range of motion while keeping the "
        "posture stable and the tempo even from start to finish."
    )
    return ActionLexiconEntry(
        category_id=category_id, steps=steps, general_instruction=instruction
    )


def standard_explanation(name: str) -> str:
    base = (
        f"The {name} is performed with a stable base and the joints track the "
        "intended path through every phase of the movement."
    )
    verdict = (
        "Each step follows the ideal sequence, therefore the attempt is rated "
        "as standard form."
    )
    return f"{base} {verdict}"


def error_clause(fault: str, muscle: str, cue: str) -> str:
    return (
        f"However the {fault} drifts out of line because the load shifts away "
        f"from the {muscle}, as a result the attempt is rated as non-standard "
        f"form. Keep the {cue} braced and focus on a slower tempo to correct it."
    )


def non_standard_explanation(name: str, fault: str, muscle: str, cue: str) -> str:
    base = (
        f"The {name} is performed with a stable base and the joints track the "
        "intended path through every phase of the movement."
    )
    return f"{base} {error_clause(fault, muscle, cue)}"


def generate_synthetic_dataset(
    spec: SyntheticSpec,
) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    """Build a deterministic synthetic manifest plus per-sample features.

    Texts, quality labels and categories are consistent by construction:
    every category gets one template explanation, and non-standard samples
    append one category-specific error clause to it.  Features are category
    and quality separable with per-sample noise so a model can overfit them.
    """
    root = np.random.SeedSequence(entropy=spec.seed)
    feat_rng = np.random.default_rng(root.spawn(1)[0])

    faults = _pool(_FAULT_BANK, spec.vocab_size)
    muscles = _pool(_MUSCLE_BANK, spec.vocab_size)
    cues = _pool(_CUE_BANK, spec.vocab_size)

    lexicon: dict[int, ActionLexiconEntry] = {}
    records: list[SampleRecord] = []
    features: dict[str, np.ndarray] = {}
    viewpoints = list(Viewpoint)

    for cid in range(spec.categories):
        name, wtype, mode = _category_profile(cid)
        lexicon[cid] = synthetic_lexicon_entry(cid, name)
        fault = faults[cid % len(faults)]
        muscle = muscles[cid % len(muscles)]
        cue = cues[cid % len(cues)]
        std_text = standard_explanation(name)
        bad_text = non_standard_explanation(name, fault, muscle, cue)

        cat_proto = feat_rng.normal(0.0, 1.0, size=spec.feature_dim)
        quality_dir = feat_rng.normal(0.0, 1.0, size=spec.feature_dim)

        for i in range(spec.samples_per_category):
            standard = i % 2 == 0
            sample_id = f"synth-{cid:03d}-{i:02d}"
            noise = feat_rng.normal(0.0, 0.5, size=(spec.frames_per_video, spec.feature_dim))
            sign = 1.0 if standard else -1.0
            feats = cat_proto[None, :] + sign * 0.75 * quality_dir[None, :] + noise
            features[sample_id] = feats.astype(np.float32)
            records.append(
                SampleRecord(
                    sample_id=sample_id,
                    media_ref=f"{sample_id}.fixture.txt",
                    category_id=cid,
                    category_name=name,
                    workout_mode=mode,
                    workout_type=wtype,
                    quality=Quality.STANDARD if standard else Quality.NON_STANDARD,
                    viewpoint=viewpoints[i % len(viewpoints)],
                    duration_s=round(2.0 + 0.25 * (i % 4), 2),
                    frame_count=spec.frames_per_video * 4,
                    cot_text=std_text if standard else bad_text,
                )
            )

    manifest = DatasetManifest(
        records=tuple(records), lexicon=lexicon, num_categories=spec.categories
    )
    validate_manifest(manifest)
    return manifest, features


def write_synthetic_dataset(spec: SyntheticSpec, out_dir: str | Path) -> DatasetManifest:
    """Generate the synthetic dataset and persist it under ``out_dir``.

    Writes ``manifest.json`` plus one feature fixture per sample in
    ``features/``; record media_refs point at the fixture files (relative to
    the manifest directory).
    """
    from .encoders import save_feature_fixture

    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest, features = generate_synthetic_dataset(spec)
    rebased = []
    for rec in manifest.records:
        rel = f"features/{rec.sample_id}.fixture.txt"
        save_feature_fixture(features[rec.sample_id], out / rel)
        rebased.append(replace(rec, media_ref=rel))
    manifest = DatasetManifest(
        records=tuple(rebased), lexicon=manifest.lexicon,
        num_categories=manifest.num_categories,
    )
    save_manifest(manifest, out / "manifest.json")
    return manifest


def resolve_media_path(manifest_path: str | Path, media_ref: str) -> Path:
    """Media refs are stored relative to the manifest's directory."""
    ref = Path(media_ref)
    if ref.is_absolute():
        return ref
    return Path(manifest_path).parent / ref
