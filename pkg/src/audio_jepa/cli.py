"""Command line entry point: ``audio-jepa {synth-data,pretrain,embed,probe,inspect}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, pipeline
from .config import ConfigError, RunConfig, dump_config, flatten, from_flat, parse_config, parse_override
from .jepa import parameter_counts
from .manifest import read_manifest
from .probes import load_embeddings, save_embeddings
from .synth import CLASSES, synth_dataset

log = logging.getLogger("audio_jepa")


def _config(args, base: RunConfig | None = None) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if base is not None:
        values = flatten(base)
        for item in overrides:
            key, value = parse_override(item)
            values[key] = value
        return from_flat(values)
    return parse_config(args.config, overrides)


def _write_json(path: str | Path, payload: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def cmd_synth_data(args) -> int:
    config = _config(args)
    classes = args.classes.split(",") if args.classes else list(CLASSES)
    manifest = synth_dataset(
        args.out,
        classes,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        seed=config.train.seed,
        seconds=config.mel.duration,
        sample_rate=config.mel.sample_rate,
    )
    print(f"wrote {len(manifest)} clips and {Path(args.out) / 'manifest.csv'}")
    return 0


def cmd_pretrain(args) -> int:
    config = _config(args)
    manifest_path = args.manifest or config.paths.manifest
    if not manifest_path:
        raise ConfigError("no manifest given (use --manifest or paths.manifest)")
    out = Path(args.out or config.paths.checkpoint_dir)
    log.info("resolved config:\n%s", dump_config(config))
    manifest = read_manifest(manifest_path)
    rows = manifest.pretrain_rows()
    patches = pipeline.load_patches(manifest, rows, config)
    log.info("loaded %d clips as %s patch tensors", len(rows), tuple(patches.shape))
    state = pipeline.pretrain(config, patches, out, resume=args.resume)
    print(f"finished at step {state.step}; checkpoints in {out}")
    return 0


def cmd_embed(args) -> int:
    state = checkpoint.load_checkpoint(args.checkpoint)
    config = pipeline.run_config_of(state)
    manifest = read_manifest(args.manifest)
    embeddings, failures = pipeline.embed_manifest(state, manifest, config)
    save_embeddings(args.out, embeddings)
    print(f"wrote {len(embeddings)} embeddings of width {state.model.encoder.embed_dim} to {args.out}")
    for path, reason in failures:
        print(f"skipped {path}: {reason}", file=sys.stderr)
    if failures:
        print(f"{len(failures)} of {len(manifest)} clips could not be embedded", file=sys.stderr)
        return 2
    return 0


def cmd_probe(args) -> int:
    manifest = read_manifest(args.manifest)
    manifest.require_labels()
    if args.embeddings:
        config = _config(args)
        embeddings = load_embeddings(args.embeddings)
        source = {"embeddings": str(args.embeddings)}
    else:
        state = checkpoint.load_checkpoint(args.checkpoint)
        config = _config(args, base=pipeline.run_config_of(state))
        embeddings, failures = pipeline.embed_manifest(state, manifest, config)
        if failures:
            raise ValueError(f"{len(failures)} clips could not be embedded, e.g. {failures[0][0]}")
        source = {"checkpoint": str(args.checkpoint), "checkpoint_step": state.step}
    train, test = pipeline.split_embeddings(embeddings, manifest)
    report = pipeline.run_probe(train, test, args.mode, config.probe)
    report["source"] = source
    if args.out:
        _write_json(args.out, report)
    print(json.dumps({"mode": args.mode, "accuracy": report["accuracy"]}))
    return 0


def inspect_summary(state) -> str:
    counts = parameter_counts(state.model)
    lines = [
        f"step: {state.step}",
        f"seed: {state.seed}",
        f"grid: {state.model.grid[0]} x {state.model.grid[1]} patches",
        f"encoder: {dataclasses.asdict(state.model.encoder)}",
        f"predictor: {dataclasses.asdict(state.model.predictor)}",
        f"optimizer: {dataclasses.asdict(state.optim)}",
        f"mask ratio bounds: {list(state.mask_bounds)}",
        "parameters:",
        f"  context encoder: {counts['context_encoder']:,}",
        f"  target encoder: {counts['target_encoder']:,}",
        f"  predictor: {counts['predictor']:,}",
        f"  mask token: {counts['mask_token']:,}",
        f"  trainable total: {counts['trainable']:,}",
        f"  inference (encoder only): {counts['inference']:,}",
    ]
    if state.metrics:
        lines.append(f"last metrics: {json.dumps(state.metrics, sort_keys=True)}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    print(inspect_summary(checkpoint.load_checkpoint(args.checkpoint)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="audio-jepa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--config", help="YAML file of dotted keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")
        p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")

    p = sub.add_parser("synth-data", help="write a labeled synthetic WAV corpus and manifest")
    config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", help=f"comma-separated subset of {','.join(CLASSES)}")
    p.add_argument("--train-per-class", type=int, default=40)
    p.add_argument("--test-per-class", type=int, default=20)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    config_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--out", help="checkpoint directory (default paths.checkpoint_dir)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", help="embed every manifest clip with the frozen target encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("probe", help="kNN or linear probe on frozen embeddings")
    config_flags(p)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--embeddings")
    source.add_argument("--checkpoint")
    p.add_argument("--manifest", required=True, help="supplies labels and train/test splits")
    p.add_argument("--mode", choices=("knn", "linear"), default="knn")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigError, checkpoint.CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
