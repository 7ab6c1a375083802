"""Prompt assembly, client mocking, consistency checking and the review queue."""

import json
import pathlib

import pytest

from fitassess.annotate import (
    AnnotationError,
    FailingClient,
    MalformedResponseError,
    MockConsistencyClient,
    MockTextClient,
    MockVideoClient,
    PromptTemplate,
    ReviewQueue,
    annotate_manifest,
    apply_review_decision,
    build_explanation_prompt,
    build_step_prompt,
    consistency_check,
    export_annotations,
    generate_cot_explanation,
    generate_steps,
    load_template,
    parse_steps_response,
    rule_based_consistency,
    scripted_steps_response,
)
from fitassess.data import Quality, SyntheticSpec, generate_synthetic_dataset

SNAPSHOTS = pathlib.Path(__file__).parent / "fixtures" / "snapshots"

DEADLIFT_STEPS = [
    "Stand with feet hip-width apart and grip the bar just outside the knees.",
    "Brace the core and set the back flat before pulling.",
    "Drive through the heels and extend the hips and knees together.",
    "Lock out at the top with shoulders back and spine neutral.",
    "Lower the bar along the legs with a controlled hinge.",
]


class TestPromptTemplates:
    def test_simple_substitution(self):
        template = PromptTemplate(
            name="demo", version=1, text="Steps for {category}", slots=("category",)
        )
        assert template.render(category="Barbell Deadlift") == "Steps for Barbell Deadlift"

    def test_missing_slot_value_names_the_slot(self):
        template = PromptTemplate(
            name="demo", version=1, text="Steps for {category}", slots=("category",)
        )
        with pytest.raises(AnnotationError, match="'category'"):
            template.render()

    def test_slot_must_appear_exactly_once(self):
        with pytest.raises(AnnotationError, match="exactly"):
            PromptTemplate(
                name="demo", version=1,
                text="{category} and {category}", slots=("category",),
            )

    def test_undeclared_slots_rejected(self):
        with pytest.raises(AnnotationError, match="undeclared"):
            PromptTemplate(
                name="demo", version=1, text="{category} {mode}", slots=("category",)
            )

    def test_step_prompt_matches_snapshot(self):
        template = load_template("steps_prompt")
        prompt = build_step_prompt(template, "Barbell Deadlift", "apparatus")
        expected = (SNAPSHOTS / "step_prompt_barbell_deadlift.txt").read_text("utf-8")
        assert prompt == expected

    def test_explanation_prompts_match_snapshots(self):
        template = load_template("explanation_prompt")
        for quality, name in (
            (Quality.NON_STANDARD, "explanation_prompt_non_standard.txt"),
            (Quality.STANDARD, "explanation_prompt_standard.txt"),
        ):
            prompt = build_explanation_prompt(
                template, "Barbell Deadlift", DEADLIFT_STEPS, quality
            )
            assert prompt == (SNAPSHOTS / name).read_text("utf-8")

    def test_non_standard_prompt_contains_error_analysis_section(self):
        template = load_template("explanation_prompt")
        bad = build_explanation_prompt(
            template, "Barbell Deadlift", DEADLIFT_STEPS, Quality.NON_STANDARD
        )
        good = build_explanation_prompt(
            template, "Barbell Deadlift", DEADLIFT_STEPS, Quality.STANDARD
        )
        assert "Error analysis:" in bad
        assert "Error analysis:" not in good


class TestStepGeneration:
    def test_well_formed_block_parses(self):
        entry = generate_steps(
            MockTextClient([scripted_steps_response("deadlift")]),
            prompt="p", category_id=3,
        )
        assert entry.category_id == 3
        assert len(entry.steps) == 5
        assert entry.general_instruction.startswith("Perform the deadlift")

    def test_four_step_block_retries_then_fails(self):
        four_steps = "\n".join(
            [f"{i}. Step {i}" for i in range(1, 5)] + ["Instruction: do it well"]
        )
        client = MockTextClient([four_steps])
        with pytest.raises(MalformedResponseError, match="after 3 attempts"):
            generate_steps(client, prompt="p", category_id=0, max_attempts=3)
        assert len(client.calls) == 3

    def test_retry_recovers_on_second_attempt(self):
        good = scripted_steps_response("squat")
        client = MockTextClient(["no steps here", good])
        entry = generate_steps(client, prompt="p", category_id=0)
        assert len(entry.steps) == 5
        assert len(client.calls) == 2

    def test_commentary_around_block_is_stripped(self):
        noisy = (
            "Sure! Here is the protocol you asked for:\n\n"
            + scripted_steps_response("lunge")
            + "\n\nLet me know if you need anything else."
        )
        steps, instruction = parse_steps_response(noisy)
        assert len(steps) == 5
        assert "lunge" in instruction

    def test_duplicate_or_out_of_range_numbers_rejected(self):
        bad = "\n".join(
            ["1. a", "1. b", "3. c", "4. d", "5. e", "Instruction: x"]
        )
        with pytest.raises(MalformedResponseError, match="expected steps"):
            parse_steps_response(bad)

    def test_transport_failure_propagates(self):
        with pytest.raises(Exception, match="unreachable"):
            generate_steps(FailingClient(), prompt="p", category_id=0)

    def test_http_adapter_surfaces_transport_errors(self):
        from fitassess.annotate import ClientConfig, HttpTextClient, TransportError

        client = HttpTextClient(
            ClientConfig(
                endpoint="http://127.0.0.1:9/unreachable",
                timeout_s=0.2, max_attempts=2, client_id="doomed",
            )
        )
        with pytest.raises(TransportError, match="doomed"):
            client.generate("prompt")


class TestExplanationGeneration:
    def test_echo_client_payload_verbatim(self):
        payload = "The lift looks controlled and the spine stays neutral."
        client = MockVideoClient([payload])
        record = generate_cot_explanation(client, "video.mp4", "prompt text", "s0")
        assert record.text == payload
        assert record.client_id == "mock-vlm"
        assert len(record.prompt_sha256) == 64
        assert len(record.response_sha256) == 64

    def test_prompt_reaches_client_unmodified(self):
        template = load_template("explanation_prompt")
        prompt = build_explanation_prompt(
            template, "Barbell Deadlift", DEADLIFT_STEPS, Quality.NON_STANDARD
        )
        client = MockVideoClient(["some explanation"])
        generate_cot_explanation(client, "clip.mp4", prompt, "s1")
        sent_prompt, sent_media = client.calls[0]
        assert sent_prompt == prompt
        assert sent_media == "clip.mp4"

    def test_empty_response_rejected(self):
        client = MockVideoClient(["   "])
        with pytest.raises(AnnotationError, match="empty explanation"):
            generate_cot_explanation(client, "clip.mp4", "p", "s2")


class TestConsistencyCheck:
    def test_mock_pass_creates_no_item(self):
        queue = ReviewQueue()
        verdict, _ = consistency_check(
            MockConsistencyClient(["pass"]), "text", DEADLIFT_STEPS,
            Quality.STANDARD, queue=queue, sample_id="s0",
        )
        assert verdict == "pass"
        assert queue.items() == []

    def test_mock_fail_enqueues_pending_item(self):
        queue = ReviewQueue()
        verdict, rationale = consistency_check(
            MockConsistencyClient(["fail: contradicts the video"]),
            "text", DEADLIFT_STEPS, Quality.STANDARD, queue=queue, sample_id="s1",
        )
        assert verdict == "fail"
        assert rationale == "contradicts the video"
        items = queue.items()
        assert len(items) == 1 and items[0].status == "pending"

    def test_transport_failure_degrades_to_fail(self):
        queue = ReviewQueue()
        verdict, rationale = consistency_check(
            FailingClient(), "text", DEADLIFT_STEPS, Quality.STANDARD,
            queue=queue, sample_id="s2",
        )
        assert verdict == "fail"
        assert rationale == "checker unavailable"

    def test_rule_based_label_claim_disagreement(self):
        explanation = (
            "The bar stays close and every step is met, so the attempt is "
            "rated as standard form with a clean hinge."
        )
        verdict, rationale = rule_based_consistency(
            explanation, DEADLIFT_STEPS, Quality.NON_STANDARD
        )
        assert verdict == "fail"
        assert "claims standard form" in rationale

    def test_rule_based_step_coverage(self):
        verdict, rationale = rule_based_consistency(
            "Nice try overall.", DEADLIFT_STEPS, Quality.STANDARD
        )
        assert verdict == "fail"
        assert "step content" in rationale

    def test_rule_based_pass(self):
        explanation = (
            "The hinge stays controlled, the core is braced and the heels "
            "drive the pull, matching the standard form."
        )
        verdict, _ = rule_based_consistency(explanation, DEADLIFT_STEPS, Quality.STANDARD)
        assert verdict == "pass"


class TestReviewQueue:
    def _queued(self, tmp_path):
        queue = ReviewQueue(tmp_path / "queue.jsonl")
        item = queue.enqueue("s0", "generated text", "fail", "bad step mention")
        return queue, item

    def test_approve_transition(self, tmp_path):
        queue, item = self._queued(tmp_path)
        decided = apply_review_decision(queue, item.item_id, "approved")
        assert decided.status == "approved"
        assert decided.decided_at is not None

    def test_edit_replaces_text_on_export(self, tmp_path):
        queue, item = self._queued(tmp_path)
        apply_review_decision(queue, item.item_id, "edited", edited_text="fixed text")
        assert queue.get(item.item_id).edited_text == "fixed text"

    def test_double_decision_rejected(self, tmp_path):
        queue, item = self._queued(tmp_path)
        apply_review_decision(queue, item.item_id, "approved")
        with pytest.raises(AnnotationError, match="already decided"):
            apply_review_decision(queue, item.item_id, "rejected")

    def test_unknown_item_rejected(self, tmp_path):
        queue, _ = self._queued(tmp_path)
        with pytest.raises(AnnotationError, match="unknown review item"):
            apply_review_decision(queue, "nope", "approved")

    def test_invalid_decision_rejected(self, tmp_path):
        queue, item = self._queued(tmp_path)
        with pytest.raises(AnnotationError, match="invalid review decision"):
            apply_review_decision(queue, item.item_id, "maybe")

    def test_edit_requires_text(self, tmp_path):
        queue, item = self._queued(tmp_path)
        with pytest.raises(AnnotationError, match="replacement text"):
            apply_review_decision(queue, item.item_id, "edited")

    def test_duplicate_enqueue_is_noop(self, tmp_path):
        queue, item = self._queued(tmp_path)
        again = queue.enqueue("s0", "generated text", "fail", "bad step mention")
        assert again.item_id == item.item_id
        assert len(queue.items()) == 1

    def test_log_replay_restores_state(self, tmp_path):
        queue, item = self._queued(tmp_path)
        apply_review_decision(queue, item.item_id, "edited", edited_text="fixed")
        replayed = ReviewQueue(tmp_path / "queue.jsonl")
        restored = replayed.get(item.item_id)
        assert restored.status == "edited"
        assert restored.edited_text == "fixed"


def _pipeline_clients(fail_for: set[str] = frozenset()):
    def explain(prompt: str, media_ref: str) -> str:
        sample = media_ref.split("/")[-1]
        if any(key in sample for key in fail_for):
            return "This clip is rated as standard form overall."  # claim mismatch
        if "form quality: non_standard" in prompt:
            return (
                "The stance is set but the main movement rushes, so the core "
                "drifts, as a result the attempt is rated as non-standard form."
            )
        return (
            "The stance is set, the core stays braced and the movement runs at "
            "a controlled tempo, matching the standard form."
        )

    step_client = MockTextClient(
        lambda prompt: scripted_steps_response(
            prompt.split("Action category: ", 1)[1].splitlines()[0]
        ),
        client_id="scripted-steps",
    )
    return step_client, MockVideoClient(explain, client_id="scripted-explainer")


class TestPipelineEndToEnd:
    def _manifest(self):
        manifest, _ = generate_synthetic_dataset(SyntheticSpec(2, 2, seed=5))
        return manifest

    def test_idempotent_under_deterministic_mocks(self, tmp_path):
        manifest = self._manifest()
        queue = ReviewQueue(tmp_path / "queue.jsonl")
        runs = []
        for _ in range(2):
            step_client, explain_client = _pipeline_clients(fail_for={"synth-001-00"})
            runs.append(
                annotate_manifest(
                    manifest, step_client, explain_client,
                    checker_client=None, queue=queue,
                )
            )
        first, second = runs
        assert [g.to_dict() for g in first.generations] == [
            g.to_dict() for g in second.generations
        ]
        assert first.verdicts == second.verdicts
        # the failing sample was enqueued once, not twice
        assert len(queue.items()) == 1

    def test_provenance_log_is_replayable(self, tmp_path):
        manifest = self._manifest()
        step_client, explain_client = _pipeline_clients()
        run = annotate_manifest(
            manifest, step_client, explain_client,
            provenance_path=tmp_path / "prov.jsonl",
        )
        lines = (tmp_path / "prov.jsonl").read_text("utf-8").splitlines()
        assert len(lines) == len(manifest.records)
        logged = [json.loads(line) for line in lines]
        assert [row["response_sha256"] for row in logged] == [
            g.response_sha256 for g in run.generations
        ]
        assert all(row["client_id"] == "scripted-explainer" for row in logged)

    def test_export_requires_pass_or_approval(self, tmp_path):
        manifest = self._manifest()
        bad_sample = "synth-001-00"
        step_client, explain_client = _pipeline_clients(fail_for={bad_sample})
        run = annotate_manifest(manifest, step_client, explain_client)
        exported, excluded = export_annotations(run)
        assert bad_sample in excluded  # pending review, held back
        assert len(exported) == len(manifest.records) - 1

        item = run.queue.items()[0]
        apply_review_decision(run.queue, item.item_id, "edited", edited_text="manually fixed")
        exported, excluded = export_annotations(run)
        assert exported[bad_sample] == "manually fixed"
        assert excluded == []

    def test_rejected_samples_stay_excluded(self, tmp_path):
        manifest = self._manifest()
        bad_sample = "synth-001-00"
        step_client, explain_client = _pipeline_clients(fail_for={bad_sample})
        run = annotate_manifest(manifest, step_client, explain_client)
        item = run.queue.items()[0]
        apply_review_decision(run.queue, item.item_id, "rejected")
        exported, excluded = export_annotations(run)
        assert bad_sample not in exported
        assert excluded == [bad_sample]

    def test_generated_lexicon_has_five_steps_per_category(self):
        manifest = self._manifest()
        step_client, explain_client = _pipeline_clients()
        run = annotate_manifest(manifest, step_client, explain_client)
        assert set(run.lexicon) == {0, 1}
        for entry in run.lexicon.values():
            assert len(entry.steps) == 5
