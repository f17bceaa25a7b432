"""Labeled synthetic audio corpus for desk-scale pretraining and probing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dsp import AudioClip, write_wav
from .manifest import Manifest, ManifestRow, write_manifest

CLASSES = ("tone-low", "tone-high", "chirp-up", "chirp-down", "noise")

TONE_LOW_BAND = (200.0, 400.0)
TONE_HIGH_BAND = (2000.0, 4000.0)
CHIRP_LOW_BAND = (300.0, 600.0)
CHIRP_HIGH_BAND = (3000.0, 6000.0)


def _chirp(rng, t, seconds, start_band, end_band):
    f0 = rng.uniform(*start_band)
    f1 = rng.uniform(*end_band)
    # exponential sweep: instantaneous frequency f0 * (f1/f0)^(t/T)
    k = np.log(f1 / f0) / seconds
    return np.sin(2 * np.pi * f0 * (np.exp(k * t) - 1.0) / k + rng.uniform(0, 2 * np.pi))


def synth_clip(name: str, rng: np.random.Generator, seconds: float, sample_rate: int) -> AudioClip:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    phase = rng.uniform(0, 2 * np.pi)
    if name == "tone-low":
        wave = np.sin(2 * np.pi * rng.uniform(*TONE_LOW_BAND) * t + phase)
    elif name == "tone-high":
        wave = np.sin(2 * np.pi * rng.uniform(*TONE_HIGH_BAND) * t + phase)
    elif name == "chirp-up":
        wave = _chirp(rng, t, seconds, CHIRP_LOW_BAND, CHIRP_HIGH_BAND)
    elif name == "chirp-down":
        wave = _chirp(rng, t, seconds, CHIRP_HIGH_BAND, CHIRP_LOW_BAND)
    elif name == "noise":
        wave = rng.uniform(-1.0, 1.0, t.size)
    else:
        raise ValueError(f"unknown synthetic class {name!r}; choose from {CLASSES}")
    amplitude = rng.uniform(0.2, 0.8)
    return AudioClip(amplitude * wave, sample_rate)


def synth_dataset(
    out_dir: str | Path,
    classes: tuple[str, ...] | list[str] = CLASSES,
    train_per_class: int = 40,
    test_per_class: int = 20,
    seed: int = 0,
    seconds: float = 10.0,
    sample_rate: int = 32000,
) -> Manifest:
    """Write ``<out_dir>/<split>/<class>_<i>.wav`` files and ``<out_dir>/manifest.csv``."""
    if len(classes) < 2:
        raise ValueError("synthetic dataset needs at least two classes")
    out = Path(out_dir)
    rows = []
    for split_id, (split, count) in enumerate((("train", train_per_class), ("test", test_per_class))):
        (out / split).mkdir(parents=True, exist_ok=True)
        for label, name in enumerate(classes):
            for i in range(count):
                rng = np.random.default_rng((seed, split_id, label, i))
                rel = f"{split}/{name}_{i:04d}.wav"
                write_wav(out / rel, synth_clip(name, rng, seconds, sample_rate))
                rows.append(ManifestRow(rel, label, split))
    manifest = Manifest(rows, out)
    write_manifest(out / "manifest.csv", manifest)
    (out / "classes.txt").write_text("\n".join(classes) + "\n", encoding="utf-8")
    return manifest
