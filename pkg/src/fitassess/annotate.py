"""Explanation-generation workflow against pluggable service clients.

The flow mirrors how the explanation corpus is produced: a prompt template is
filled per category and sent to a text-generation service which returns the
five standard technical steps plus a general instruction; steps, video and
the annotated quality label then go to a video-capable service that writes
the chain-of-thought explanation; an automated consistency check vets each
explanation and failures land in a persisted review queue for manual
approval, editing, or rejection.

All clients are interfaces with deterministic mocks so the pipeline runs and
tests fully offline; a rule-based fallback checker exists for the same
reason.  Every generation is logged with the client id plus prompt/response
hashes, making runs reproducible from the logs alone.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .data import ActionLexiconEntry, DatasetManifest, Quality, STEPS_PER_CATEGORY
from .text import tokenize


class AnnotationError(RuntimeError):
    """Pipeline-level failure (bad template, malformed response, bad decision)."""


class TransportError(AnnotationError):
    """A client could not be reached."""


class MalformedResponseError(AnnotationError):
    """A client response did not parse even after retries."""


_SLOT_PATTERN = re.compile(r"\{([a-z_]+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    """Prompt text with named slots; every declared slot appears exactly once."""

    name: str
    version: int
    text: str
    slots: tuple[str, ...]

    def __post_init__(self):
        found = _SLOT_PATTERN.findall(self.text)
        for slot in self.slots:
            if found.count(slot) != 1:
                raise AnnotationError(
                    f"template {self.name!r} must contain slot {{{slot}}} exactly "
                    f"once, found {found.count(slot)}"
                )
        undeclared = set(found) - set(self.slots)
        if undeclared:
            raise AnnotationError(
                f"template {self.name!r} contains undeclared slots {sorted(undeclared)}"
            )

    def render(self, **values: str) -> str:
        missing = [slot for slot in self.slots if slot not in values]
        if missing:
            raise AnnotationError(
                f"template {self.name!r} is missing a value for slot {missing[0]!r}"
            )
        out = self.text
        for slot in self.slots:
            out = out.replace("{" + slot + "}", str(values[slot]))
        return out


_TEMPLATE_SLOTS = {
    "steps_prompt": ("category", "mode"),
    "explanation_prompt": ("category", "quality", "steps", "analysis_request"),
    "check_prompt": ("quality", "steps", "explanation"),
}


def load_template(name: str, version: int = 1) -> PromptTemplate:
    if name not in _TEMPLATE_SLOTS:
        raise AnnotationError(f"unknown template {name!r}")
    text = resources.files("fitassess.resources.templates").joinpath(f"{name}.txt").read_text("utf-8")
    return PromptTemplate(name=name, version=version, text=text, slots=_TEMPLATE_SLOTS[name])


# --- clients -------------------------------------------------------------------

class TextGenerationClient(Protocol):
    client_id: str

    def generate(self, prompt: str) -> str: ...


class VideoTextClient(Protocol):
    client_id: str

    def generate(self, prompt: str, media_ref: str) -> str: ...


class ConsistencyClient(Protocol):
    client_id: str

    def check(self, prompt: str) -> str: ...


class MockTextClient:
    """Deterministic text client: either a scripted response list (consumed
    in order, last one repeating) or a function of the prompt."""

    def __init__(self, responses: Sequence[str] | Callable[[str], str], client_id: str = "mock-llm"):
        self.client_id = client_id
        self._responses = responses
        self._index = 0
        self.calls: list[str] = []

    def generate(self, prompt: str) -> str:
        self.calls.append(prompt)
        if callable(self._responses):
            return self._responses(prompt)
        response = self._responses[min(self._index, len(self._responses) - 1)]
        self._index += 1
        return response


class MockVideoClient:
    """Deterministic video+text client; records every (prompt, media_ref)."""

    def __init__(
        self,
        responses: Sequence[str] | Callable[[str, str], str],
        client_id: str = "mock-vlm",
    ):
        self.client_id = client_id
        self._responses = responses
        self._index = 0
        self.calls: list[tuple[str, str]] = []

    def generate(self, prompt: str, media_ref: str) -> str:
        self.calls.append((prompt, media_ref))
        if callable(self._responses):
            return self._responses(prompt, media_ref)
        response = self._responses[min(self._index, len(self._responses) - 1)]
        self._index += 1
        return response


class MockConsistencyClient:
    def __init__(self, verdicts: Sequence[str], client_id: str = "mock-checker"):
        self.client_id = client_id
        self._verdicts = verdicts
        self._index = 0

    def check(self, prompt: str) -> str:
        verdict = self._verdicts[min(self._index, len(self._verdicts) - 1)]
        self._index += 1
        return verdict


class FailingClient:
    """Simulates an unreachable endpoint for degradation tests."""

    client_id = "unreachable"

    def generate(self, *args, **kwargs) -> str:
        raise TransportError("endpoint unreachable")

    def check(self, prompt: str) -> str:
        raise TransportError("endpoint unreachable")


@dataclass(frozen=True)
class ClientConfig:
    """Connection settings for a real generation service.

    Credentials come from the named environment variable, never from code;
    an unset variable simply sends no authorization header.
    """

    endpoint: str
    api_key_env: str | None = None
    timeout_s: float = 30.0
    max_attempts: int = 3
    client_id: str = "http"


def _post_json(config: ClientConfig, payload: dict) -> str:
    """POST the payload as JSON and return the response's "text" field.

    Thin stdlib transport shared by the HTTP adapters; any network or
    protocol failure surfaces as TransportError after the retry budget.
    """
    import os
    import urllib.error
    import urllib.request

    body = json.dumps(payload).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    if config.api_key_env and os.environ.get(config.api_key_env):
        headers["Authorization"] = f"Bearer {os.environ[config.api_key_env]}"
    last_error: Exception | None = None
    for _ in range(max(1, config.max_attempts)):
        request = urllib.request.Request(config.endpoint, data=body, headers=headers)
        try:
            with urllib.request.urlopen(request, timeout=config.timeout_s) as response:
                parsed = json.loads(response.read().decode("utf-8"))
                return str(parsed["text"])
        except (urllib.error.URLError, OSError, KeyError, json.JSONDecodeError) as exc:
            last_error = exc
    raise TransportError(
        f"client {config.client_id!r} failed after {config.max_attempts} attempts: "
        f"{last_error}"
    )


class HttpTextClient:
    """JSON-over-HTTP text-generation adapter (excluded from offline tests)."""

    def __init__(self, config: ClientConfig):
        self.config = config
        self.client_id = config.client_id

    def generate(self, prompt: str) -> str:
        return _post_json(self.config, {"prompt": prompt})


class HttpVideoClient:
    """JSON-over-HTTP video+text adapter; sends the media reference along."""

    def __init__(self, config: ClientConfig):
        self.config = config
        self.client_id = config.client_id

    def generate(self, prompt: str, media_ref: str) -> str:
        return _post_json(self.config, {"prompt": prompt, "media_ref": media_ref})


class HttpConsistencyClient:
    """JSON-over-HTTP checker adapter; expects a pass/fail text reply."""

    def __init__(self, config: ClientConfig):
        self.config = config
        self.client_id = config.client_id

    def check(self, prompt: str) -> str:
        return _post_json(self.config, {"prompt": prompt})


def scripted_steps_response(category: str) -> str:
    """A well-formed five-step block, used by the default offline mock."""
    lines = [
        f"1. Take the setup position for the {category} with stable footing.",
        f"2. Brace the core and set the joints before the {category} begins.",
        f"3. Execute the main phase of the {category} at a controlled tempo.",
        f"4. Pause briefly at the peak of the {category} without drifting.",
        f"5. Return under control and reset for the next {category} repetition.",
        f"Instruction: Perform the {category} smoothly through its full range "
        "while holding a stable posture.",
    ]
    return "\n".join(lines)


# --- step generation -------------------------------------------------------------

_STEP_LINE = re.compile(r"^\s*(\d)\s*[.):-]\s*(.+?)\s*$")
_INSTRUCTION_LINE = re.compile(r"^\s*instruction\s*:\s*(.+?)\s*$", re.IGNORECASE)


def build_step_prompt(template: PromptTemplate, category: str, mode: str) -> str:
    return template.render(category=category, mode=mode)


def parse_steps_response(response: str) -> tuple[tuple[str, ...], str]:
    """Extract the five numbered steps and the instruction line.

    Surrounding commentary is ignored; numbered lines must cover 1..5 in
    order, each exactly once.
    """
    steps: dict[int, str] = {}
    instruction = None
    for line in response.splitlines():
        step_match = _STEP_LINE.match(line)
        if step_match:
            number = int(step_match.group(1))
            if 1 <= number <= STEPS_PER_CATEGORY and number not in steps:
                steps[number] = step_match.group(2)
            continue
        instr_match = _INSTRUCTION_LINE.match(line)
        if instr_match and instruction is None:
            instruction = instr_match.group(1)
    if sorted(steps) != list(range(1, STEPS_PER_CATEGORY + 1)):
        raise MalformedResponseError(
            f"expected steps 1..{STEPS_PER_CATEGORY}, found {sorted(steps)}"
        )
    if not instruction:
        raise MalformedResponseError("no 'Instruction:' line found")
    return tuple(steps[n] for n in range(1, STEPS_PER_CATEGORY + 1)), instruction


def generate_steps(
    client: TextGenerationClient,
    prompt: str,
    category_id: int,
    max_attempts: int = 3,
) -> ActionLexiconEntry:
    """Call the client, parse its steps block, re-prompting on malformed output."""
    last_error: MalformedResponseError | None = None
    for _ in range(max_attempts):
        response = client.generate(prompt)
        try:
            steps, instruction = parse_steps_response(response)
        except MalformedResponseError as exc:
            last_error = exc
            continue
        return ActionLexiconEntry(
            category_id=category_id, steps=steps, general_instruction=instruction
        )
    raise MalformedResponseError(
        f"client {client.client_id!r} returned malformed steps after "
        f"{max_attempts} attempts: {last_error}"
    )


# --- explanation generation -------------------------------------------------------

_STANDARD_ANALYSIS = (
    "Confirm how each step is met and finish by stating that the execution "
    "matches the standard form."
)
_ERROR_ANALYSIS = (
    "Error analysis: identify the specific step that breaks down, describe "
    "the observable consequence of that error, and finish with one concrete "
    "corrective suggestion."
)


def build_explanation_prompt(
    template: PromptTemplate,
    category: str,
    steps: Sequence[str],
    quality: Quality,
) -> str:
    steps_block = "\n".join(f"{i}. {step}" for i, step in enumerate(steps, start=1))
    analysis = _ERROR_ANALYSIS if quality is Quality.NON_STANDARD else _STANDARD_ANALYSIS
    return template.render(
        category=category,
        quality=quality.value,
        steps=steps_block,
        analysis_request=analysis,
    )


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class GenerationRecord:
    """One generated explanation plus the provenance needed to replay it."""

    sample_id: str
    text: str
    client_id: str
    prompt_sha256: str
    response_sha256: str

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "text": self.text,
            "client_id": self.client_id,
            "prompt_sha256": self.prompt_sha256,
            "response_sha256": self.response_sha256,
        }


def generate_cot_explanation(
    client: VideoTextClient,
    media_ref: str,
    prompt: str,
    sample_id: str,
) -> GenerationRecord:
    response = client.generate(prompt, media_ref)
    if not response or not response.strip():
        raise AnnotationError(
            f"client {client.client_id!r} returned an empty explanation for "
            f"sample {sample_id!r}"
        )
    return GenerationRecord(
        sample_id=sample_id,
        text=response,
        client_id=client.client_id,
        prompt_sha256=_sha256(prompt),
        response_sha256=_sha256(response),
    )


# --- consistency check --------------------------------------------------------------

def _contains_sequence(tokens: list[str], phrase: tuple[str, ...]) -> bool:
    span = len(phrase)
    return any(tuple(tokens[i : i + span]) == phrase for i in range(len(tokens) - span + 1))


def rule_based_consistency(
    explanation: str, steps: Sequence[str], quality: Quality
) -> tuple[str, str]:
    """Offline fallback checker.

    Rules: (1) the explanation's standard / non-standard claim must agree with
    the quality label; (2) the explanation must mention at least one content
    word (length >= 4) from the technical steps.
    """
    tokens = tokenize(explanation)
    claims_nonstandard = _contains_sequence(tokens, ("non", "standard")) or any(
        word in tokens for word in ("error", "fault", "incorrect", "breaks")
    )
    claims_standard = _contains_sequence(tokens, ("standard", "form")) and not _contains_sequence(
        tokens, ("non", "standard", "form")
    )
    if quality is Quality.NON_STANDARD and claims_standard and not claims_nonstandard:
        return "fail", "explanation claims standard form for a non_standard label"
    if quality is Quality.STANDARD and claims_nonstandard and not claims_standard:
        return "fail", "explanation claims an error for a standard label"

    step_words = {
        tok for step in steps for tok in tokenize(step) if len(tok) >= 4
    }
    if step_words and not step_words.intersection(tokens):
        return "fail", "explanation does not reference any technical step content"
    return "pass", "label agreement and step coverage hold"


def parse_check_response(response: str) -> tuple[str, str]:
    lowered = response.strip().lower()
    if lowered.startswith("pass"):
        return "pass", response.strip()
    if lowered.startswith("fail"):
        rationale = response.split(":", 1)[1].strip() if ":" in response else response.strip()
        return "fail", rationale
    raise MalformedResponseError(f"unparseable checker response: {response[:80]!r}")


def consistency_check(
    client: ConsistencyClient | None,
    explanation: str,
    steps: Sequence[str],
    quality: Quality,
    queue: "ReviewQueue | None" = None,
    sample_id: str = "",
) -> tuple[str, str]:
    """Verdict over a generated explanation; failures enqueue a review item.

    A transport failure degrades to a fail verdict with rationale
    "checker unavailable"; a ``None`` client uses the rule-based fallback.
    """
    template = load_template("check_prompt")
    steps_block = "\n".join(f"{i}. {step}" for i, step in enumerate(steps, start=1))
    if client is None:
        verdict, rationale = rule_based_consistency(explanation, steps, quality)
    else:
        prompt = template.render(
            quality=quality.value, steps=steps_block, explanation=explanation
        )
        try:
            verdict, rationale = parse_check_response(client.check(prompt))
        except TransportError:
            verdict, rationale = "fail", "checker unavailable"
    if verdict == "fail" and queue is not None:
        queue.enqueue(
            sample_id=sample_id, generated_text=explanation,
            verdict=verdict, rationale=rationale,
        )
    return verdict, rationale


# --- review queue ---------------------------------------------------------------

REVIEW_STATUSES = ("pending", "approved", "edited", "rejected")


@dataclass
class ReviewItem:
    item_id: str
    sample_id: str
    generated_text: str
    verdict: str
    rationale: str
    status: str = "pending"
    editor_note: str = ""
    edited_text: str | None = None
    decided_at: str | None = None

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "sample_id": self.sample_id,
            "generated_text": self.generated_text,
            "verdict": self.verdict,
            "rationale": self.rationale,
            "status": self.status,
            "editor_note": self.editor_note,
            "edited_text": self.edited_text,
            "decided_at": self.decided_at,
        }


class ReviewQueue:
    """Review items persisted as an append-only JSONL event log.

    Re-enqueueing the same (sample, text) pair is a no-op, so rerunning
    generation with deterministic mocks never duplicates items.  Statuses
    move pending -> approved | edited | rejected exactly once.
    """

    def __init__(self, log_path: str | Path | None = None):
        self._items: dict[str, ReviewItem] = {}
        self._log_path = Path(log_path) if log_path else None
        if self._log_path and self._log_path.exists():
            self._replay()

    def _replay(self) -> None:
        for line in self._log_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            if event["event"] == "enqueue":
                item = ReviewItem(**event["item"])
                self._items[item.item_id] = item
            elif event["event"] == "decide":
                item = self._items[event["item_id"]]
                item.status = event["status"]
                item.edited_text = event.get("edited_text")
                item.editor_note = event.get("editor_note", "")
                item.decided_at = event.get("decided_at")

    def _append(self, event: dict) -> None:
        if self._log_path is None:
            return
        with self._log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    @staticmethod
    def item_id_for(sample_id: str, generated_text: str) -> str:
        return f"{sample_id}:{_sha256(generated_text)[:12]}"

    def enqueue(
        self, sample_id: str, generated_text: str, verdict: str, rationale: str
    ) -> ReviewItem:
        item_id = self.item_id_for(sample_id, generated_text)
        if item_id in self._items:
            return self._items[item_id]
        item = ReviewItem(
            item_id=item_id,
            sample_id=sample_id,
            generated_text=generated_text,
            verdict=verdict,
            rationale=rationale,
        )
        self._items[item_id] = item
        self._append({"event": "enqueue", "item": item.to_dict()})
        return item

    def get(self, item_id: str) -> ReviewItem:
        if item_id not in self._items:
            raise AnnotationError(f"unknown review item {item_id!r}")
        return self._items[item_id]

    def items(self) -> list[ReviewItem]:
        return sorted(self._items.values(), key=lambda item: item.item_id)

    def pending(self) -> list[ReviewItem]:
        return [item for item in self.items() if item.status == "pending"]

    def decide(
        self,
        item_id: str,
        decision: str,
        edited_text: str | None = None,
        editor_note: str = "",
    ) -> ReviewItem:
        if decision not in ("approved", "edited", "rejected"):
            raise AnnotationError(f"invalid review decision {decision!r}")
        item = self.get(item_id)
        if item.status != "pending":
            raise AnnotationError(
                f"review item {item_id!r} already decided as {item.status!r}"
            )
        if decision == "edited" and not (edited_text and edited_text.strip()):
            raise AnnotationError("an edit decision requires replacement text")
        item.status = decision
        item.edited_text = edited_text if decision == "edited" else None
        item.editor_note = editor_note
        item.decided_at = datetime.now(timezone.utc).isoformat()
        self._append(
            {
                "event": "decide",
                "item_id": item_id,
                "status": item.status,
                "edited_text": item.edited_text,
                "editor_note": item.editor_note,
                "decided_at": item.decided_at,
            }
        )
        return item


def apply_review_decision(
    queue: ReviewQueue,
    item_id: str,
    decision: str,
    edited_text: str | None = None,
    editor_note: str = "",
) -> ReviewItem:
    return queue.decide(item_id, decision, edited_text=edited_text, editor_note=editor_note)


# --- end-to-end driver -------------------------------------------------------------

@dataclass
class AnnotationRun:
    """Everything one pipeline pass produced."""

    lexicon: dict[int, ActionLexiconEntry]
    generations: list[GenerationRecord]
    verdicts: dict[str, tuple[str, str]]
    queue: ReviewQueue


def annotate_manifest(
    manifest: DatasetManifest,
    step_client: TextGenerationClient,
    explanation_client: VideoTextClient,
    checker_client: ConsistencyClient | None = None,
    queue: ReviewQueue | None = None,
    provenance_path: str | Path | None = None,
) -> AnnotationRun:
    """Run step generation, explanation generation and the consistency check
    over a manifest; failures land in the review queue."""
    queue = queue if queue is not None else ReviewQueue()
    step_template = load_template("steps_prompt")
    explanation_template = load_template("explanation_prompt")

    categories: dict[int, tuple[str, str]] = {}
    for rec in manifest.records:
        categories.setdefault(rec.category_id, (rec.category_name, rec.workout_mode.value))

    lexicon: dict[int, ActionLexiconEntry] = {}
    for cid, (name, mode) in sorted(categories.items()):
        prompt = build_step_prompt(step_template, name, mode)
        lexicon[cid] = generate_steps(step_client, prompt, category_id=cid)

    generations: list[GenerationRecord] = []
    verdicts: dict[str, tuple[str, str]] = {}
    provenance_file = (
        Path(provenance_path).open("a", encoding="utf-8") if provenance_path else None
    )
    try:
        for rec in manifest.records:
            entry = lexicon[rec.category_id]
            prompt = build_explanation_prompt(
                explanation_template, rec.category_name, entry.steps, rec.quality
            )
            record = generate_cot_explanation(
                explanation_client, rec.media_ref, prompt, rec.sample_id
            )
            generations.append(record)
            if provenance_file:
                provenance_file.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            verdicts[rec.sample_id] = consistency_check(
                checker_client,
                record.text,
                entry.steps,
                rec.quality,
                queue=queue,
                sample_id=rec.sample_id,
            )
    finally:
        if provenance_file:
            provenance_file.close()
    return AnnotationRun(
        lexicon=lexicon, generations=generations, verdicts=verdicts, queue=queue
    )


def export_annotations(run: AnnotationRun) -> tuple[dict[str, str], list[str]]:
    """Final (sample_id -> explanation) map plus the excluded sample ids.

    A sample exports when its check passed or a reviewer approved/edited it;
    rejected samples are excluded, and pending ones stay back until decided.
    """
    decisions = {item.sample_id: item for item in run.queue.items()}
    exported: dict[str, str] = {}
    excluded: list[str] = []
    for record in run.generations:
        verdict, _ = run.verdicts[record.sample_id]
        if verdict == "pass":
            exported[record.sample_id] = record.text
            continue
        item = decisions.get(record.sample_id)
        if item is None or item.status == "pending":
            excluded.append(record.sample_id)
        elif item.status == "approved":
            exported[record.sample_id] = record.text
        elif item.status == "edited":
            exported[record.sample_id] = item.edited_text or record.text
        else:
            excluded.append(record.sample_id)
    return exported, excluded
