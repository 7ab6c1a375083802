import pathlib
import sys
import time

import pytest
import torch

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from fitassess.data import SplitAssignment, SyntheticSpec, write_synthetic_dataset
from fitassess.encoders import EncoderConfig
from fitassess.model import ModelConfig
from fitassess.training import TrainConfig, build_pipeline, train_pipeline

OVERFIT_MAX_STEPS = 900  # acceptance budget is 2000; 900 converges with margin


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """Synthetic 24-sample / 4-category dataset written to disk once."""
    out = tmp_path_factory.mktemp("synth")
    spec = SyntheticSpec(categories=4, samples_per_category=6, seed=7)
    manifest = write_synthetic_dataset(spec, out)
    return manifest, out / "manifest.json"


@pytest.fixture(scope="session")
def overfit_bundle(synth_dataset):
    """One overfit training run shared by every test that needs it."""
    manifest, manifest_path = synth_dataset
    split = SplitAssignment(
        train=frozenset(rec.sample_id for rec in manifest.records),
        val=frozenset(),
        test=frozenset(),
        seed=0,
    )
    encoder_config = EncoderConfig(visual_dim=32, text_dim=32, seed=7)
    model_config = ModelConfig(
        num_categories=4,
        visual_dim=32,
        text_dim=32,
        model_dim=48,
        num_heads=4,
        decoder_layers=2,
        max_explanation_len=96,
    )
    train_config = TrainConfig(
        epochs=1,
        max_steps=OVERFIT_MAX_STEPS,
        batch_size=12,
        base_lr=3e-3,
        seed=0,
    )
    pipeline = build_pipeline(manifest, model_config, encoder_config, train_config)
    started = time.monotonic()
    history = train_pipeline(
        pipeline, manifest, split, train_config, manifest_path
    )
    train_seconds = time.monotonic() - started
    return {
        "pipeline": pipeline,
        "manifest": manifest,
        "manifest_path": manifest_path,
        "split": split,
        "history": history,
        "train_config": train_config,
        "train_seconds": train_seconds,
        "steps": history[-1]["step"] if history else 0,
    }


@pytest.fixture()
def tiny_model_config():
    return ModelConfig(
        num_categories=3,
        visual_dim=8,
        text_dim=8,
        model_dim=8,
        num_heads=2,
        decoder_layers=1,
        decoder_ffn_dim=16,
        max_explanation_len=24,
    )


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(1234)
