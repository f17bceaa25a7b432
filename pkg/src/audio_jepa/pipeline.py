"""Workflows shared by the CLI: pretraining runs, manifest embedding, probing."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .config import RunConfig, flatten
from .dsp import preprocess, read_wav
from .jepa import DATA_STREAM, TrainState, init_train_state, step_rng, train_step
from .manifest import Manifest, ManifestRow
from .probes import (
    EmbeddingSet,
    ProbeConfig,
    embed_patches,
    knn_evaluate,
    linear_probe_evaluate,
    linear_probe_train,
)

log = logging.getLogger(__name__)

LAST = "last.ckpt"
FINAL = "final.ckpt"
METRICS = "metrics.jsonl"


def load_patches(manifest: Manifest, rows: list[ManifestRow], config: RunConfig) -> torch.Tensor:
    """[len(rows), num_patches, patch_side**2] float32 patches for every row."""
    grids = [preprocess(read_wav(manifest.resolve(r)), config.mel, config.patch_side) for r in rows]
    return torch.from_numpy(np.stack([g.patches for g in grids]).astype(np.float32))


def batch_indices(seed: int, step: int, num_examples: int, batch_size: int) -> np.ndarray:
    """Example indices for ``step``: epochs are seeded permutations, the tail of each is dropped."""
    if batch_size > num_examples:
        raise ValueError(f"batch size {batch_size} exceeds the {num_examples} available clips")
    per_epoch = num_examples // batch_size
    epoch, slot = divmod(step, per_epoch)
    order = step_rng(seed, DATA_STREAM, epoch).permutation(num_examples)
    return order[slot * batch_size : (slot + 1) * batch_size]


def new_state(config: RunConfig) -> TrainState:
    return init_train_state(
        config.encoder_config(),
        config.predictor_config(),
        config.grid,
        config.optimizer_config(),
        config.train.seed,
        (config.mask.lo, config.mask.hi),
        extra={"config": flatten(config)},
    )


def _truncate_log(path: Path, step: int) -> None:
    """Keep only metric records of steps already covered by the checkpoint being resumed."""
    if not path.exists():
        return
    kept = [
        line
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip() and json.loads(line)["step"] < step
    ]
    path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")


def pretrain(
    config: RunConfig,
    patches: torch.Tensor,
    out_dir: str | Path,
    resume: bool = False,
    stop_at: int | None = None,
) -> TrainState:
    """Train for ``config.train.total_steps`` steps (or until ``stop_at``), checkpointing into ``out_dir``.

    ``last.ckpt`` is refreshed every ``train.checkpoint_every`` steps and
    ``final.ckpt`` is written when the schedule completes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_dir = Path(config.paths.log_dir) if config.paths.log_dir else out
    log_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = log_dir / METRICS

    if resume and (out / LAST).exists():
        state = checkpoint.load_checkpoint(out / LAST)
        if state.extra.get("config") != flatten(config):
            raise ValueError(f"{out / LAST} was written with a different configuration")
        log.info("resuming from step %d", state.step)
        _truncate_log(metrics_path, state.step)
    else:
        state = new_state(config)
        metrics_path.write_text("", encoding="utf-8")

    total = config.train.total_steps
    end = total if stop_at is None else min(stop_at, total)
    with open(metrics_path, "a", encoding="utf-8") as metrics_log:
        while state.step < end:
            idx = batch_indices(config.train.seed, state.step, len(patches), config.train.batch_size)
            state, metrics = train_step(state, patches[torch.from_numpy(idx)])
            metrics_log.write(json.dumps(metrics, sort_keys=True) + "\n")
            if state.step % 50 == 0 or state.step == end:
                metrics_log.flush()
                log.info(
                    "step %d loss %.4f lr %.2e tau %.5f var %.4g",
                    metrics["step"], metrics["loss"], metrics["lr"], metrics["tau"],
                    metrics["target_variance_min"],
                )
            if state.step % config.train.checkpoint_every == 0 or state.step == end:
                checkpoint.save_checkpoint(state, out / LAST)
    if state.step >= total:
        checkpoint.save_checkpoint(state, out / FINAL)
    return state


def run_config_of(state: TrainState) -> RunConfig:
    from .config import from_flat

    return from_flat(state.extra["config"])


def embed_manifest(
    state: TrainState, manifest: Manifest, config: RunConfig, rows: list[ManifestRow] | None = None
) -> tuple[EmbeddingSet, list[tuple[str, str]]]:
    """Embed every row with the frozen target encoder; unreadable clips are skipped and reported."""
    rows = manifest.rows if rows is None else rows
    vectors, labels, ids, failures = [], [], [], []
    for row in rows:
        try:
            grid = preprocess(read_wav(manifest.resolve(row)), config.mel, config.patch_side)
        except (OSError, ValueError) as exc:
            failures.append((row.path, str(exc)))
            continue
        vectors.append(embed_patches(state.model, grid.patches))
        labels.append(-1 if row.label is None else row.label)
        ids.append(row.path)
    width = state.model.encoder.embed_dim
    vectors = np.array(vectors).reshape(len(ids), width)
    return EmbeddingSet(vectors, np.array(labels, dtype=np.int64), ids), failures


def split_embeddings(embeddings: EmbeddingSet, manifest: Manifest) -> tuple[EmbeddingSet, EmbeddingSet]:
    split_of = {r.path: r.split for r in manifest.rows}
    parts = {}
    for name in ("train", "test"):
        sel = [i for i, clip_id in enumerate(embeddings.ids) if split_of.get(clip_id) == name]
        if not sel:
            raise ValueError(f"no embeddings belong to the '{name}' split")
        if np.any(embeddings.labels[sel] < 0):
            raise ValueError(f"'{name}' split contains unlabeled clips")
        parts[name] = EmbeddingSet(
            embeddings.vectors[sel], embeddings.labels[sel], [embeddings.ids[i] for i in sel]
        )
    return parts["train"], parts["test"]


def run_probe(train: EmbeddingSet, test: EmbeddingSet, mode: str, probe: ProbeConfig) -> dict:
    """Run one probe and return a JSON-ready report."""
    if mode == "knn":
        result = knn_evaluate(train, test, probe)
        settings = {"k": probe.k, "metric": probe.metric}
    elif mode == "linear":
        model = linear_probe_train(train, probe)
        result = linear_probe_evaluate(model, test)
        settings = {
            k: v for k, v in dataclasses.asdict(probe).items() if k not in ("k", "metric")
        }
        settings["loss"] = "softmax cross-entropy"
        settings["optimizer"] = "adam"
    else:
        raise ValueError(f"unknown probe mode {mode!r}")
    return {
        "mode": mode,
        "probe": settings,
        "accuracy": result.accuracy,
        "per_class_accuracy": {str(k): v for k, v in result.per_class.items()},
        "per_class_count": {str(k): v for k, v in result.counts.items()},
        "num_train": len(train),
        "num_test": len(test),
    }
