"""Loss arithmetic, schedule, training-loop contracts and checkpoints."""

import math

import numpy as np
import pytest
import torch

from fitassess.data import SplitAssignment, SyntheticSpec, write_synthetic_dataset
from fitassess.encoders import EncoderConfig
from fitassess.model import ModelConfig
from fitassess.training import (
    AblationConfig,
    CheckpointError,
    LossWeights,
    TrainConfig,
    TrainingError,
    batch_forward,
    build_batches,
    build_pipeline,
    load_checkpoint,
    loss_total,
    lr_at,
    save_checkpoint,
    train_pipeline,
)


def small_setup(tmp_path, categories=3, samples=4, seed=0, **train_overrides):
    spec = SyntheticSpec(categories=categories, samples_per_category=samples, seed=seed)
    manifest = write_synthetic_dataset(spec, tmp_path)
    manifest_path = tmp_path / "manifest.json"
    split = SplitAssignment(
        train=frozenset(rec.sample_id for rec in manifest.records),
        val=frozenset(),
        test=frozenset(),
        seed=seed,
    )
    train_config = TrainConfig(
        epochs=1, max_steps=train_overrides.pop("max_steps", 4),
        batch_size=train_overrides.pop("batch_size", 6),
        base_lr=train_overrides.pop("base_lr", 1e-3),
        seed=seed, **train_overrides,
    )
    encoder_config = EncoderConfig(visual_dim=32, text_dim=32, seed=seed)
    model_config = ModelConfig(
        num_categories=categories, visual_dim=32, text_dim=32, model_dim=16,
        num_heads=2, decoder_layers=1, max_explanation_len=96,
    )
    pipeline = build_pipeline(manifest, model_config, encoder_config, train_config)
    return pipeline, manifest, manifest_path, split, train_config


def ce_oracle(logits, label):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    probs = np.exp(shifted) / np.exp(shifted).sum()
    return -math.log(probs[label])


def smoothed_ce_oracle(logits, label, eps):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    logprobs = shifted - math.log(np.exp(shifted).sum())
    n = len(logits)
    return -(1 - eps) * logprobs[label] - (eps / n) * logprobs.sum()


class TestLossTotal:
    def _perfect_inputs(self):
        category_logits = torch.tensor([[30.0, -30.0, -30.0]])
        quality_prob = torch.tensor([1.0 - 1e-9])
        caption_logits = torch.full((1, 3, 5), -30.0)
        targets = torch.tensor([[2, 4, 2]])
        for t, tok in enumerate(targets[0]):
            caption_logits[0, t, tok] = 30.0
        labels = torch.tensor([0])
        quality_labels = torch.tensor([1.0])
        return category_logits, quality_prob, caption_logits, labels, quality_labels, targets

    def test_perfect_predictions_vanish(self):
        cat, qual, cap, labels, qlabels, targets = self._perfect_inputs()
        breakdown = loss_total(
            cat, qual, cap, labels, qlabels, targets,
            LossWeights(3.0), label_smoothing=0.0,
        )
        assert float(breakdown.total) < 1e-6

    def test_lambda_zero_drops_category_term(self):
        torch.manual_seed(0)
        cat = torch.randn(4, 3)
        qual = torch.sigmoid(torch.randn(4))
        cap = torch.randn(4, 5, 7)
        labels = torch.tensor([0, 1, 2, 1])
        qlabels = torch.tensor([1.0, 0.0, 1.0, 0.0])
        targets = torch.randint(0, 7, (4, 5))
        zero = loss_total(cat, qual, cap, labels, qlabels, targets, LossWeights(0.0))
        assert float(zero.total) == pytest.approx(
            float(zero.quality) + float(zero.caption), rel=1e-12
        )

    def test_random_case_matches_hand_brute_force(self):
        rng = np.random.default_rng(9)
        cat = rng.normal(size=(2, 4))
        qual = np.array([0.3, 0.8])
        cap = rng.normal(size=(2, 3, 6))
        labels = [1, 3]
        qlabels = [1.0, 0.0]
        targets = np.array([[2, 4, 5], [1, 0, 3]])  # 0 is the pad id
        eps = 0.1

        l_c = np.mean([ce_oracle(cat[i], labels[i]) for i in range(2)])
        l_q = np.mean(
            [
                -(q * math.log(p) + (1 - q) * math.log(1 - p))
                for p, q in zip(qual, qlabels)
            ]
        )
        rows = [(i, t) for i in range(2) for t in range(3) if targets[i, t] != 0]
        l_t = np.mean([smoothed_ce_oracle(cap[i, t], targets[i, t], eps) for i, t in rows])
        expected = 3.0 * l_c + l_q + l_t

        breakdown = loss_total(
            torch.tensor(cat), torch.tensor(qual), torch.tensor(cap),
            torch.tensor(labels), torch.tensor(qlabels), torch.tensor(targets),
            LossWeights(3.0), label_smoothing=eps,
        )
        assert float(breakdown.total) == pytest.approx(expected, rel=1e-6)

    def test_linearity_in_lambda(self):
        torch.manual_seed(1)
        cat = torch.randn(3, 4, dtype=torch.float64)
        qual = torch.sigmoid(torch.randn(3, dtype=torch.float64))
        cap = torch.randn(3, 4, 6, dtype=torch.float64)
        labels = torch.tensor([0, 2, 3])
        qlabels = torch.tensor([0.0, 1.0, 1.0], dtype=torch.float64)
        targets = torch.randint(1, 6, (3, 4))
        for lam in (0.5, 1.0, 3.0, 10.0):
            with_lam = loss_total(cat, qual, cap, labels, qlabels, targets, LossWeights(lam))
            without = loss_total(cat, qual, cap, labels, qlabels, targets, LossWeights(0.0))
            assert float(with_lam.total - without.total) == pytest.approx(
                lam * float(with_lam.category), rel=1e-9
            )

    def test_nonnegative(self):
        torch.manual_seed(2)
        for _ in range(10):
            breakdown = loss_total(
                torch.randn(3, 4), torch.sigmoid(torch.randn(3)), torch.randn(3, 4, 6),
                torch.randint(0, 4, (3,)), torch.randint(0, 2, (3,)).float(),
                torch.randint(1, 6, (3, 4)), LossWeights(3.0), label_smoothing=0.1,
            )
            assert float(breakdown.total) >= 0.0

    def test_nonfinite_logits_rejected(self):
        cat = torch.tensor([[float("nan"), 0.0]])
        with pytest.raises(TrainingError, match="non-finite"):
            loss_total(
                cat, torch.tensor([0.5]), torch.zeros(1, 2, 4),
                torch.tensor([0]), torch.tensor([1.0]), torch.tensor([[1, 2]]),
                LossWeights(3.0),
            )

    def test_invalid_weight_rejected(self):
        with pytest.raises(TrainingError, match="lambda"):
            LossWeights(-1.0)


class TestLrSchedule:
    CONFIG = TrainConfig(epochs=1, warmup_fraction=0.1, base_lr=2e-4)

    def test_starts_at_zero(self):
        assert lr_at(0, 100, self.CONFIG) == 0.0

    def test_peak_at_warmup_boundary(self):
        assert lr_at(10, 100, self.CONFIG) == pytest.approx(2e-4)

    def test_midpoint_of_decay_is_half(self):
        assert lr_at(55, 100, self.CONFIG) == pytest.approx(1e-4)

    def test_ends_at_zero(self):
        assert lr_at(100, 100, self.CONFIG) == 0.0

    def test_continuous_at_junction(self):
        before = lr_at(9, 100, self.CONFIG)
        peak = lr_at(10, 100, self.CONFIG)
        after = lr_at(11, 100, self.CONFIG)
        assert before < peak
        assert after < peak
        assert peak - after == pytest.approx(2e-4 / 90)

    def test_no_warmup_starts_at_base(self):
        config = TrainConfig(epochs=1, warmup_fraction=0.0, base_lr=1e-3)
        assert lr_at(0, 50, config) == pytest.approx(1e-3)

    def test_validation(self):
        with pytest.raises(TrainingError, match="total_steps"):
            lr_at(0, 0, self.CONFIG)
        with pytest.raises(TrainingError, match="outside"):
            lr_at(101, 100, self.CONFIG)


class TestTrainingLoop:
    def test_zero_lr_step_keeps_parameters_bitwise(self, tmp_path):
        pipeline, manifest, manifest_path, split, _ = small_setup(tmp_path)
        config = TrainConfig(
            epochs=1, max_steps=1, batch_size=12, base_lr=0.0,
            warmup_fraction=0.0, seed=0,
        )
        before = {
            name: param.detach().clone()
            for name, param in pipeline.model.named_parameters()
        }
        train_pipeline(pipeline, manifest, split, config, manifest_path)
        for name, param in pipeline.model.named_parameters():
            assert torch.equal(param, before[name]), name

    def test_fixed_seed_reproduces_loss_curve(self, tmp_path):
        histories = []
        for _ in range(2):
            pipeline, manifest, manifest_path, split, config = small_setup(
                tmp_path, max_steps=6
            )
            history = train_pipeline(pipeline, manifest, split, config, manifest_path)
            histories.append(history)
        assert histories[0] == histories[1]

    def test_one_step_updates_every_component_group(self, tmp_path):
        pipeline, manifest, manifest_path, split, _ = small_setup(tmp_path)
        config = TrainConfig(
            epochs=1, max_steps=1, batch_size=12, base_lr=1e-3,
            warmup_fraction=0.0, seed=0,
        )
        before = {
            name: param.detach().clone()
            for name, param in pipeline.model.named_parameters()
        }
        train_pipeline(pipeline, manifest, split, config, manifest_path)
        groups = {}
        for name, param in pipeline.model.named_parameters():
            group = ".".join(name.split(".")[:2])
            groups.setdefault(group, False)
            if not torch.equal(param, before[name]):
                groups[group] = True
        unchanged = [group for group, changed in groups.items() if not changed]
        assert not unchanged, f"groups with no updated parameter: {unchanged}"

    def test_gradients_reach_all_residual_scales(self, tmp_path):
        pipeline, manifest, manifest_path, split, config = small_setup(tmp_path)
        rng = np.random.default_rng(0)
        batches = build_batches(pipeline, list(manifest.records), manifest_path, 12, rng)
        breakdown, _ = batch_forward(pipeline, batches[0], config)
        breakdown.total.backward()
        fusion = pipeline.model.fusion
        for name, param in (
            ("sigma_1", fusion.global_fusion.sigma_1),
            ("sigma_2", fusion.global_fusion.sigma_2),
            ("sigma_3", fusion.step_fusion.sigma_3),
            ("sigma_4", fusion.step_fusion.sigma_4),
        ):
            assert param.grad is not None and float(param.grad.abs().max()) > 0, name

    def test_empty_training_split_rejected(self, tmp_path):
        pipeline, manifest, manifest_path, _, config = small_setup(tmp_path)
        empty = SplitAssignment(
            train=frozenset(), val=frozenset(), test=frozenset(), seed=0
        )
        with pytest.raises(TrainingError, match="empty"):
            train_pipeline(pipeline, manifest, empty, config, manifest_path)

    def test_divergence_guard_message(self):
        with pytest.raises(TrainingError, match="non-finite"):
            loss_total(
                torch.tensor([[float("inf"), 0.0]]), torch.tensor([0.5]),
                torch.zeros(1, 1, 4), torch.tensor([0]), torch.tensor([1.0]),
                torch.tensor([[1]]), LossWeights(1.0),
            )


class TestAblationGraph:
    def test_zero_text_matches_manual_zeroing(self, tmp_path):
        pipeline, manifest, manifest_path, split, _ = small_setup(tmp_path)
        config = TrainConfig(
            epochs=1, batch_size=12, seed=0,
            ablation=AblationConfig(zero_text=True),
        )
        rng = np.random.default_rng(1)
        batch = build_batches(pipeline, list(manifest.records), manifest_path, 12, rng)[0]
        with torch.no_grad():
            breakdown, extras = batch_forward(pipeline, batch, config)
            zero_steps, zero_global = pipeline.batch_text(batch.category.tolist(), zero_text=True)
            manual = pipeline.model.fusion(batch.video, zero_steps, zero_global)
        assert torch.equal(extras["fused"], manual)

    def test_shuffled_text_permutes_step_rows(self, tmp_path):
        pipeline, manifest, manifest_path, split, _ = small_setup(tmp_path)
        rng_a = np.random.default_rng(42)
        rng_b = np.random.default_rng(42)
        cats = [0, 1]
        steps_plain, _ = pipeline.batch_text(cats)
        steps_shuf, _ = pipeline.batch_text(cats, shuffle_rng=rng_a)
        for i, cid in enumerate(cats):
            order = rng_b.permutation(5)
            assert torch.equal(steps_shuf[i], steps_plain[i][torch.from_numpy(order)])

    def test_ablation_flags_reach_fusion_config(self, tmp_path):
        spec = SyntheticSpec(categories=2, samples_per_category=3, seed=0)
        manifest = write_synthetic_dataset(spec, tmp_path)
        config = TrainConfig(
            epochs=1, seed=0,
            ablation=AblationConfig(
                disable_global_fusion=True,
                attention_direction="video_query_only",
                merge_mode="add",
            ),
        )
        encoder_config = EncoderConfig(visual_dim=32, text_dim=32)
        pipeline = build_pipeline(manifest, None, encoder_config, config)
        fusion_config = pipeline.model.fusion.config
        assert not fusion_config.enable_global
        assert fusion_config.direction == "video_query_only"
        assert fusion_config.merge == "add"


class TestCheckpoints:
    def test_round_trip_reproduces_logits_bitwise(self, tmp_path):
        pipeline, manifest, manifest_path, split, config = small_setup(tmp_path, max_steps=2)
        train_pipeline(pipeline, manifest, split, config, manifest_path)
        probe = pipeline.record_features(manifest.records[0], manifest_path)
        result_before = pipeline.assess(probe)

        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, pipeline, config, step=2, total_steps=4)
        restored, config2, step, total, opt_state = load_checkpoint(path)
        assert step == 2 and total == 4
        assert config2 == config
        result_after = restored.assess(probe)
        assert torch.equal(result_before.category_logits, result_after.category_logits)
        assert result_before.quality_prob == result_after.quality_prob
        assert result_before.explanation_ids == result_after.explanation_ids

    def test_shape_mismatch_reported(self, tmp_path):
        pipeline, manifest, manifest_path, split, config = small_setup(tmp_path)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, pipeline, config, step=0, total_steps=4)
        payload = torch.load(path, weights_only=False)
        payload["model_config"]["model_dim"] = 32  # stored weights are 16-wide
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="shapes"):
            load_checkpoint(path)

    def test_version_mismatch_reported(self, tmp_path):
        pipeline, manifest, manifest_path, split, config = small_setup(tmp_path)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, pipeline, config, step=0, total_steps=4)
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="format_version"):
            load_checkpoint(path)

    def test_missing_file_reported(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "missing.pt")

    def test_checkpoint_entries_carry_inspectable_names(self, tmp_path):
        pipeline, *_ = small_setup(tmp_path)
        keys = set(pipeline.model.state_dict())
        for symbol in (
            "sigma_1", "sigma_2", "sigma_3", "sigma_4", "W_g", "b_g",
            "W_Q", "W_K", "W_V",
        ):
            assert any(key.endswith(symbol) for key in keys), symbol

    def test_resume_continues_lr_schedule_exactly(self, tmp_path):
        # batch_size >= n gives one optimizer step per epoch, so the history
        # lr column is the per-step lr trace
        total = 8
        pipeline, manifest, manifest_path, split, _ = small_setup(
            tmp_path, max_steps=total, batch_size=24, base_lr=1e-3,
        )
        config = TrainConfig(
            epochs=1, max_steps=total, batch_size=24, base_lr=1e-3, seed=0
        )
        full_history = train_pipeline(pipeline, manifest, split, config, manifest_path)
        full_trace = [entry["lr"] for entry in full_history]

        pipeline2, *_ = small_setup(tmp_path, max_steps=total, batch_size=24, base_lr=1e-3)
        first = train_pipeline(
            pipeline2, manifest, split, config, manifest_path, stop_after_steps=4
        )
        ckpt = tmp_path / "resume.pt"
        save_checkpoint(ckpt, pipeline2, config, step=4, total_steps=total)
        restored, restored_config, step, _, opt_state = load_checkpoint(ckpt)
        second = train_pipeline(
            restored, manifest, split, restored_config, manifest_path,
            start_step=step, optimizer_state=opt_state,
        )
        resumed_trace = [entry["lr"] for entry in first] + [entry["lr"] for entry in second]
        assert resumed_trace == full_trace
