"""Command-line entry point.

Subcommands: synth, split, train, eval, assess, stats, annotate.  Every run
writes the fully-resolved configuration beside its outputs so it can be
reproduced exactly.  Configuration errors exit with status 2, runtime
failures with 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import data as data_mod
from .annotate import (
    MockTextClient,
    MockVideoClient,
    ReviewQueue,
    annotate_manifest,
    export_annotations,
    scripted_steps_response,
)
from .data import (
    DatasetManifest,
    SyntheticSpec,
    load_manifest,
    load_split,
    save_lexicon,
    save_split,
    split_dataset,
    write_synthetic_dataset,
)
from .encoders import EncoderConfig, load_feature_fixture
from .metrics import corpus_statistics, evaluate_model, format_report_table, save_report
from .model import ModelConfig
from .training import (
    AblationConfig,
    TrainConfig,
    build_pipeline,
    load_checkpoint,
    train_pipeline,
)


class ConfigError(ValueError):
    """Bad flags, bad config file, or missing required inputs."""


def _parse_override_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects dotted.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = config
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {dotted!r} crosses a non-object value")
        node[keys[-1]] = _parse_override_value(raw)
    return config


def _section(config: dict, name: str, cls, **extra):
    allowed = {f.name for f in fields(cls)}
    payload = dict(config.get(name, {}))
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(
            f"unknown keys in config section {name!r}: {sorted(unknown)}"
        )
    payload.update(extra)
    if name == "train" and isinstance(payload.get("ablation"), dict):
        ab_allowed = {f.name for f in fields(AblationConfig)}
        ab_unknown = set(payload["ablation"]) - ab_allowed
        if ab_unknown:
            raise ConfigError(
                f"unknown keys in config section 'train.ablation': {sorted(ab_unknown)}"
            )
        payload["ablation"] = AblationConfig(**payload["ablation"])
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section {name!r}: {exc}") from None


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    file = Path(path)
    if not file.exists():
        raise ConfigError(f"--config file not found: {file}")
    try:
        config = json.loads(file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config file is not valid JSON: {exc}") from None
    unknown = set(config) - {"train", "model", "encoder"}
    if unknown:
        raise ConfigError(f"unknown top-level config sections: {sorted(unknown)}")
    return config


def _resolve_configs(args, manifest: DatasetManifest):
    config = _load_config_file(getattr(args, "config", None))
    _apply_overrides(config, getattr(args, "set", None) or [])
    if args.seed is not None:
        config.setdefault("train", {}).setdefault("seed", args.seed)
        config.setdefault("encoder", {}).setdefault("seed", args.seed)
    derived = {"num_categories", "visual_dim", "text_dim"} & set(config.get("model", {}))
    if derived:
        raise ConfigError(
            f"config keys model.{sorted(derived)} are derived from the manifest "
            "and the encoder section; set encoder.visual_dim / encoder.text_dim instead"
        )
    train_cfg = _section(config, "train", TrainConfig)
    encoder_cfg = _section(config, "encoder", EncoderConfig)
    model_cfg = _section(
        config, "model", ModelConfig,
        num_categories=manifest.num_categories,
        visual_dim=encoder_cfg.visual_dim,
        text_dim=encoder_cfg.text_dim,
    )
    return train_cfg, model_cfg, encoder_cfg


def _write_snapshot(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n",
        encoding="utf-8",
    )


def _require_file(path_str: str | None, flag: str) -> Path:
    if not path_str:
        raise ConfigError(f"{flag} is required")
    path = Path(path_str)
    if not path.exists():
        raise ConfigError(f"{flag} does not exist: {path}")
    return path


# --- subcommands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        categories=args.categories,
        samples_per_category=args.samples_per_category,
        vocab_size=args.vocab_size,
        seed=args.seed if args.seed is not None else 0,
        frames_per_video=args.frames,
        feature_dim=args.feature_dim,
    )
    out = Path(args.out)
    manifest = write_synthetic_dataset(spec, out)
    _write_snapshot(out, {"synth": asdict(spec)})
    print(
        f"wrote {len(manifest.records)} records across {manifest.num_categories} "
        f"categories to {out / 'manifest.json'}"
    )
    return 0


def cmd_split(args) -> int:
    manifest_path = _require_file(args.manifest, "--manifest")
    manifest = load_manifest(manifest_path)
    split = split_dataset(manifest, seed=args.seed if args.seed is not None else 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_split(split, out)
    (out.parent / (out.name + ".config.json")).write_text(
        json.dumps(
            {"split": {"manifest": str(manifest_path), "seed": split.seed}},
            indent=2, sort_keys=True,
        ) + "\n",
        encoding="utf-8",
    )
    print(
        f"split sizes: train={len(split.train)} val={len(split.val)} "
        f"test={len(split.test)} (seed {split.seed}) -> {out}"
    )
    return 0


def cmd_train(args) -> int:
    manifest_path = _require_file(args.manifest, "--manifest")
    manifest = load_manifest(manifest_path)
    train_cfg, model_cfg, encoder_cfg = _resolve_configs(args, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.split:
        split = load_split(_require_file(args.split, "--split"))
    else:
        split = split_dataset(manifest, seed=train_cfg.seed)
    save_split(split, out / "split.json")
    _write_snapshot(out, {
        "train": asdict(train_cfg),
        "model": asdict(model_cfg),
        "encoder": asdict(encoder_cfg),
    })
    pipeline = build_pipeline(manifest, model_cfg, encoder_cfg, train_cfg)
    history = train_pipeline(
        pipeline,
        manifest,
        split,
        train_cfg,
        manifest_path,
        history_path=out / "history.jsonl",
        checkpoint_path=out / "checkpoint.pt",
    )
    last = history[-1] if history else {}
    print(
        f"trained {last.get('step', 0)} steps; final losses "
        f"category={last.get('loss_category', float('nan')):.4f} "
        f"quality={last.get('loss_quality', float('nan')):.4f} "
        f"caption={last.get('loss_caption', float('nan')):.4f}"
    )
    print(f"checkpoint: {out / 'checkpoint.pt'}")
    return 0


def cmd_eval(args) -> int:
    manifest_path = _require_file(args.manifest, "--manifest")
    manifest = load_manifest(manifest_path)
    checkpoint = _require_file(args.checkpoint, "--checkpoint")
    pipeline, train_cfg, _, _, _ = load_checkpoint(checkpoint)
    if args.subset == "all":
        sample_ids = None
    else:
        if args.split:
            split = load_split(_require_file(args.split, "--split"))
        else:
            split = split_dataset(manifest, seed=train_cfg.seed)
        sample_ids = sorted(split.subset(args.subset))
    out = Path(args.out)
    report, outputs = evaluate_model(
        pipeline,
        manifest,
        manifest_path,
        sample_ids=sample_ids,
        decode_mode="beam" if args.beam > 1 else "greedy",
        beam_width=args.beam,
        return_outputs=True,
    )
    save_report(report, out)
    with (out / "generations.jsonl").open("w", encoding="utf-8") as fh:
        for row in outputs:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    _write_snapshot(out, {
        "eval": {"subset": args.subset, "beam": args.beam,
                 "checkpoint": str(checkpoint), "manifest": str(manifest_path)},
    })
    print(format_report_table(report))
    return 0


def cmd_assess(args) -> int:
    checkpoint = _require_file(args.checkpoint, "--checkpoint")
    features_path = _require_file(args.features, "--features")
    pipeline, _, _, _, _ = load_checkpoint(checkpoint)
    features = load_feature_fixture(features_path)
    result = pipeline.assess(
        features,
        decode_mode="beam" if args.beam > 1 else "greedy",
        beam_width=args.beam,
    )
    name = pipeline.category_names.get(result.category_id, f"category {result.category_id}")
    print(f"category: {name} (id {result.category_id})")
    print(f"quality: {result.quality_label} (p_standard={result.quality_prob:.4f})")
    print(f"explanation: {result.explanation_text}")
    return 0


def _load_keyword_file(path_str: str | None, flag: str):
    if path_str is None:
        return None
    path = _require_file(path_str, flag)
    from .text import tokenize

    phrases = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            phrases.append(tuple(tokenize(line)))
    return phrases


def cmd_stats(args) -> int:
    manifest_path = _require_file(args.manifest, "--manifest")
    manifest = load_manifest(manifest_path)
    stats = corpus_statistics(
        [rec.cot_text for rec in manifest.records],
        causal_keywords=_load_keyword_file(args.causal_keywords, "--causal-keywords"),
        corrective_keywords=_load_keyword_file(
            args.corrective_keywords, "--corrective-keywords"
        ),
    )
    lines = [
        f"samples              {len(manifest.records)}",
        f"avg words            {stats.avg_words:.2f}",
        f"avg sentences        {stats.avg_sentences:.2f}",
        f"vocab size           {stats.vocab_size}",
        f"avg reasoning steps  {stats.avg_reasoning_steps:.2f}",
        f"avg suggestions      {stats.avg_suggestions:.2f}",
    ]
    text = "\n".join(lines)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "corpus_stats.json").write_text(
            json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        (out / "corpus_stats.txt").write_text(text + "\n", encoding="utf-8")
        _write_snapshot(out, {
            "stats": {
                "manifest": str(manifest_path),
                "causal_keywords": args.causal_keywords,
                "corrective_keywords": args.corrective_keywords,
            },
        })
    return 0


def _default_mock_explanation(prompt: str, media_ref: str) -> str:
    # Deterministic offline stand-in for a video-capable service: reads the
    # quality label out of the prompt and answers consistently with it.
    non_standard = "form quality: non_standard" in prompt
    if non_standard:
        return (
            f"In {media_ref} the setup position looks stable, but during the main "
            "phase the tempo rushes and the joints drift out of line, which causes "
            "the load to shift off target, as a result the attempt is rated as "
            "non-standard form. Keep the core braced and return under control."
        )
    return (
        f"In {media_ref} the setup position is stable, the core stays braced and "
        "the main phase runs at a controlled tempo, therefore the attempt matches "
        "the standard form for this action."
    )


def cmd_annotate(args) -> int:
    manifest_path = _require_file(args.manifest, "--manifest")
    manifest = load_manifest(manifest_path)
    if args.client != "mock":
        raise ConfigError(
            f"unknown annotation client {args.client!r}; only the deterministic "
            "'mock' client ships with this package, external services plug in "
            "through the library API"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    step_client = MockTextClient(
        lambda prompt: scripted_steps_response(
            prompt.split("Action category: ", 1)[1].splitlines()[0]
        ),
        client_id="mock-step-generator",
    )
    explanation_client = MockVideoClient(
        _default_mock_explanation, client_id="mock-explainer"
    )
    queue = ReviewQueue(out / "review_queue.jsonl")
    run = annotate_manifest(
        manifest,
        step_client,
        explanation_client,
        checker_client=None,  # rule-based fallback checker
        queue=queue,
        provenance_path=out / "provenance.jsonl",
    )
    save_lexicon(run.lexicon, out / "lexicon.json")
    exported, excluded = export_annotations(run)
    (out / "explanations.json").write_text(
        json.dumps(exported, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    # manifest augmentation: generated lexicon plus regenerated explanations,
    # restricted to the samples that passed the check or a review decision
    from dataclasses import replace as dc_replace

    kept = tuple(
        dc_replace(rec, cot_text=exported[rec.sample_id])
        for rec in manifest.records
        if rec.sample_id in exported
    )
    if kept:
        # categories without records keep their original lexicon entry
        merged_lexicon = {**manifest.lexicon, **run.lexicon}
        augmented = data_mod.DatasetManifest(
            records=kept, lexicon=merged_lexicon,
            num_categories=manifest.num_categories,
        )
        data_mod.save_manifest(augmented, out / "manifest.annotated.json")
    if excluded:
        (out / "excluded.json").write_text(
            json.dumps(sorted(excluded), indent=2) + "\n", encoding="utf-8"
        )
    _write_snapshot(out, {"annotate": {"client": args.client, "manifest": str(manifest_path)}})
    fails = sum(1 for verdict, _ in run.verdicts.values() if verdict == "fail")
    print(
        f"annotated {len(run.generations)} samples; {fails} queued for review; "
        f"{len(exported)} exported, {len(excluded)} held back"
    )
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fitassess",
        description="Workout form assessment: dataset tooling, training, "
        "evaluation, single-video assessment, statistics and annotation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic desk-scale dataset")
    p.add_argument("--categories", type=int, required=True)
    p.add_argument("--samples-per-category", type=int, required=True)
    p.add_argument("--vocab-size", type=int, default=48)
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="compute a deterministic 70/15/15 split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the assessor end to end")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config with train/model/encoder sections")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted config override, e.g. train.max_steps=200")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split", default=None, help="existing split.json to reuse")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write the metric report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subset", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--split", default=None)
    p.add_argument("--beam", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("assess", help="assess one video's features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="feature fixture file")
    p.add_argument("--beam", type=int, default=1)
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("stats", help="corpus statistics of the explanation texts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--causal-keywords", default=None,
                   help="override the shipped causal keyword list (one phrase per line)")
    p.add_argument("--corrective-keywords", default=None,
                   help="override the shipped corrective keyword list")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("annotate", help="run the explanation-generation pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--client", default="mock")
    p.set_defaults(func=cmd_annotate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
