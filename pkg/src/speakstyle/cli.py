"""Command-line entry points for the corpus, training, synthesis, and
evaluation workflows.

Exit codes: 0 success, 2 bad flags or config, 3 IO failure, 4 missing or
malformed data files, 5 non-finite training loss, 6 checkpoint or
dimension mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import datamodel, evaluation, synthdata
from .errors import (ConfigError, DataError, DimensionMismatch,
                     DurationMismatch, LengthMismatch, MalformedRow,
                     MissingCheckpoint, MissingFile, MissingScorer,
                     NonFiniteLoss, ShapeMismatch, SpeakStyleError,
                     UnknownId, UnknownIdentity, UnknownPhoneme,
                     WeightOutOfRange, WindowTooShort)
from .model import load_model, synthesize_sequence
from .training import TrainConfig, Trainer

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_NONFINITE = 5
EXIT_MISMATCH = 6


def _parse_style_sources(pairs: list[str] | None, kind: str) -> dict[str, str]:
    """Turn repeated "label=path" (or bare path) flags into a mapping."""
    sources: dict[str, str] = {}
    for item in pairs or []:
        if "=" in item:
            label, path = item.split("=", 1)
            label = label.strip()
            if not label:
                raise ConfigError(f"empty label in {kind} {item!r}")
        else:
            label, path = "default", item
        if label in sources:
            raise ConfigError(f"duplicate {kind} label {label!r}")
        sources[label] = path
    return sources


def _parse_schedule(text: str | None,
                    default_label: str) -> list[tuple[int, str]]:
    if not text:
        return [(0, default_label)]
    schedule = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        fields = part.split(":")
        if len(fields) != 2:
            raise ConfigError(
                f"schedule entry {part!r} is not frame:label")
        try:
            frame = int(fields[0])
        except ValueError as exc:
            raise ConfigError(
                f"schedule frame {fields[0]!r} is not an integer") from exc
        if frame < 0:
            raise ConfigError(f"schedule frame {frame} is negative")
        schedule.append((frame, fields[1].strip()))
    if not schedule:
        raise ConfigError(f"empty emotion schedule {text!r}")
    return schedule


def cmd_generate_data(args) -> int:
    if args.identities < 2:
        raise ConfigError(
            f"need at least 2 identities, got {args.identities}")
    if args.samples < 1:
        raise ConfigError(f"need at least 1 sample per cell, got "
                          f"{args.samples}")
    if args.frames < datamodel.WINDOW_FRAMES:
        raise ConfigError(
            f"samples must span at least {datamodel.WINDOW_FRAMES} frames, "
            f"got {args.frames}")
    records = synthdata.generate_corpus(
        seed=args.seed, num_identities=args.identities,
        samples_per_cell=args.samples, frames_per_sample=args.frames,
        feature_dim=args.feature_dim, noise_std=args.noise_std)
    manifest = synthdata.write_corpus(records, args.out)
    print(f"wrote {len(records)} samples to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = TrainConfig.from_json(args.config)
    records = datamodel.load_manifest(args.data)
    trainer = Trainer(records, config, args.out, quiet=args.quiet)
    metrics = trainer.train()
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_synthesize(args) -> int:
    model, _ = load_model(args.checkpoint)
    speech_seq = datamodel.load_speech_features(args.speech)
    if speech_seq.feature_dim != model.config.feature_dim:
        raise DimensionMismatch(
            f"speech features have dim {speech_seq.feature_dim}, "
            f"checkpoint expects {model.config.feature_dim}")

    ref_sources = _parse_style_sources(args.style_ref, "--style-ref")
    file_sources = _parse_style_sources(args.style_file, "--style-file")
    overlap = set(ref_sources) & set(file_sources)
    if overlap:
        raise ConfigError(
            f"labels given via both --style-ref and --style-file: "
            f"{sorted(overlap)}")
    if not ref_sources and not file_sources:
        raise ConfigError("need at least one --style-ref or --style-file")

    styles: dict[str, torch.Tensor] = {}
    for label, path in ref_sources.items():
        clip = datamodel.load_blendweights(path)
        with torch.no_grad():
            styles[label] = model.extract_style(
                torch.from_numpy(clip.frames.copy()))
    for label, path in file_sources.items():
        vector = datamodel.load_style_vector(path)
        if vector.shape[0] != model.config.style_dim:
            raise DimensionMismatch(
                f"{path}: style vector has {vector.shape[0]} dims, "
                f"checkpoint expects {model.config.style_dim}")
        styles[label] = torch.from_numpy(vector)

    default_label = next(iter(styles))
    schedule = _parse_schedule(args.emotions, default_label)
    speech = torch.from_numpy(speech_seq.frames.copy())
    weights, sidecar = synthesize_sequence(model, speech, styles, schedule)

    out = Path(args.out)
    datamodel.save_blendweights(
        datamodel.BlendweightSequence(weights), out)
    sidecar_path = out.with_suffix(out.suffix + ".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True)
                            + "\n")
    print(f"wrote {weights.shape[0]} frames to {out} (sidecar "
          f"{sidecar_path})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    records = datamodel.load_manifest(args.data)
    basis = evaluation.synthetic_basis()
    if args.self_test:
        seqs = [r.expression.frames for r in records]
        windows = [w for s in seqs for w in evaluation.sequence_windows(s)]
        metrics = {
            "lve": evaluation.lve(seqs, seqs, basis),
            "fid": evaluation.fid(evaluation.window_features(windows),
                                  evaluation.window_features(windows)),
        }
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint required unless --self-test")
        metrics = evaluation.evaluate_checkpoint(
            args.checkpoint, records, basis=basis, scorer_path=args.scorer)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_extract_style(args) -> int:
    model, _ = load_model(args.checkpoint)
    clip = datamodel.load_blendweights(args.ref)
    with torch.no_grad():
        vector = model.extract_style(torch.from_numpy(clip.frames.copy()))
    datamodel.save_style_vector(vector.numpy().astype(np.float32), args.out)
    print(f"wrote {vector.shape[0]}-float style vector to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speakstyle",
        description="Personalized speech-driven facial expression synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data",
                       help="generate the synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=4)
    p.add_argument("--samples", type=int, default=2,
                   help="samples per identity/emotion cell")
    p.add_argument("--frames", type=int, default=96,
                   help="expression frames per sample")
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--noise-std", type=float, default=0.02)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train from a config and manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize",
                       help="synthesize blendweights from speech features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--speech", required=True)
    p.add_argument("--style-ref", action="append", metavar="[LABEL=]PATH",
                   help="expression CSV used as a style reference")
    p.add_argument("--style-file", action="append", metavar="[LABEL=]PATH",
                   help="saved style vector file")
    p.add_argument("--emotions", metavar="F0:L0,F1:L1,...",
                   help="expression-frame schedule of style labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--scorer", help="sync scorer archive")
    p.add_argument("--self-test", action="store_true",
                   help="score the corpus against itself instead")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract-style",
                       help="extract a style vector from an expression clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ref", required=True, help="expression CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_style)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ConfigError, UnknownId, UnknownIdentity) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingFile, MissingCheckpoint, MissingScorer, MalformedRow,
            WeightOutOfRange, DurationMismatch, UnknownPhoneme, DataError,
            WindowTooShort) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ShapeMismatch, DimensionMismatch, LengthMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except SpeakStyleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
