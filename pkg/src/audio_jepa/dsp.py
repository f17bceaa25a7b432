"""Waveform to log-mel spectrogram to patch grid.

Frames are laid out so a clip of ``hop * n_time_bins`` samples yields exactly
``n_time_bins`` frames: the signal is zero-padded by ``(win - hop) // 2`` on the
left and the remainder on the right, then framed with stride ``hop``.

Patches are ordered frequency-major: patch ``k`` sits at grid row
``k // grid_w`` (mel rows ``[side*row, side*row + side)``) and grid column
``k % grid_w`` (frames ``[side*col, side*col + side)``). Inside a patch the
values are flattened row-major (mel row first, then frame).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {samples.shape}")
        if samples.size == 0:
            raise ValueError("audio clip is empty")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio clip contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    """Front-end settings.

    ``win`` and ``duration`` are derived from ``hop`` so that the window is
    always 2.5 hops long and a clip always covers ``n_time_bins`` hops.
    """

    sample_rate: int = 32000
    n_mels: int = 128
    n_time_bins: int = 256
    hop: int = 1250
    fft_size: int = 4096
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-8

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("mel.sample_rate must be positive")
        if self.n_mels < 1 or self.n_time_bins < 1:
            raise ValueError("mel.n_mels and mel.n_time_bins must be >= 1")
        if self.hop < 1:
            raise ValueError("mel.hop must be >= 1")
        if self.fft_size < self.win:
            raise ValueError(f"mel.fft_size ({self.fft_size}) must be >= win ({self.win})")
        if not 0 <= self.fmin < self.upper_freq <= self.sample_rate / 2:
            raise ValueError("mel band edges must satisfy 0 <= fmin < fmax <= sample_rate / 2")
        if self.log_floor <= 0:
            raise ValueError("mel.log_floor must be positive")

    @property
    def win(self) -> int:
        return int(round(2.5 * self.hop))

    @property
    def num_samples(self) -> int:
        return self.hop * self.n_time_bins

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    @property
    def upper_freq(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else float(self.fmax)


@dataclass
class MelSpectrogram:
    values: np.ndarray  # [n_mels, n_time_bins]
    config: MelConfig | None = None
    silent: bool = False


@dataclass
class PatchGrid:
    patches: np.ndarray  # [grid_h * grid_w, patch_side ** 2]
    grid_h: int
    grid_w: int
    patch_side: int = 16
    config: MelConfig | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.patches.shape != (self.grid_h * self.grid_w, self.patch_side**2):
            raise ValueError(
                f"patches of shape {self.patches.shape} do not match a "
                f"{self.grid_h}x{self.grid_w} grid of {self.patch_side}x{self.patch_side} patches"
            )

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase resampling with scipy's Kaiser-windowed anti-aliasing filter."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if clip.sample_rate == target_rate:
        return clip
    ratio = Fraction(int(target_rate), clip.sample_rate)
    out = signal.resample_poly(clip.samples, ratio.numerator, ratio.denominator)
    return AudioClip(out, target_rate)


def fit_duration(clip: AudioClip, seconds: float) -> AudioClip:
    """Crop from the start or zero-pad at the end to ``round(seconds * rate)`` samples."""
    if seconds <= 0:
        raise ValueError(f"seconds must be positive, got {seconds}")
    n = int(round(seconds * clip.sample_rate))
    samples = clip.samples
    if samples.size >= n:
        return AudioClip(samples[:n], clip.sample_rate)
    return AudioClip(np.concatenate([samples, np.zeros(n - samples.size)]), clip.sample_rate)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: MelConfig) -> np.ndarray:
    edges = mel_to_hz(
        np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.upper_freq), config.n_mels + 2)
    )
    return edges[1:-1]


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """HTK-scale triangular filters, unnormalized, shape [n_mels, fft_size // 2 + 1]."""
    edges = mel_to_hz(
        np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.upper_freq), config.n_mels + 2)
    )
    bins = np.fft.rfftfreq(config.fft_size, d=1.0 / config.sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def stft_power(samples: np.ndarray, config: MelConfig) -> np.ndarray:
    """Power spectrum, shape [frames, fft_size // 2 + 1]."""
    win, hop = config.win, config.hop
    pad = win - hop
    left = pad // 2
    padded = np.concatenate([np.zeros(left), samples, np.zeros(pad - left)])
    frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop]
    window = signal.get_window("hann", win, fftbins=True)
    spectrum = np.fft.rfft(frames * window, n=config.fft_size, axis=-1)
    return spectrum.real**2 + spectrum.imag**2


def mel_spectrogram(clip: AudioClip, config: MelConfig) -> MelSpectrogram:
    if clip.sample_rate != config.sample_rate:
        raise ValueError(
            f"clip sample rate {clip.sample_rate} differs from configured {config.sample_rate}"
        )
    if clip.samples.size != config.num_samples:
        raise ValueError(
            f"clip has {clip.samples.size} samples, expected {config.num_samples} "
            f"({config.duration} s at {config.sample_rate} Hz)"
        )
    power = stft_power(clip.samples, config)
    mel = mel_filterbank(config) @ power.T
    logmel = np.log(mel + config.log_floor)
    std = logmel.std()
    silent = bool(std < 1e-12)
    values = (logmel - logmel.mean()) / (1.0 if silent else std)
    return MelSpectrogram(values, config, silent=silent)


def patchify(spec: MelSpectrogram, patch_side: int = 16) -> PatchGrid:
    values = np.asarray(spec.values)
    n_mels, n_frames = values.shape
    if n_mels % patch_side or n_frames % patch_side:
        raise ValueError(
            f"spectrogram of {n_mels} mel bands x {n_frames} frames is not divisible "
            f"by patch side {patch_side}"
        )
    gh, gw = n_mels // patch_side, n_frames // patch_side
    patches = (
        values.reshape(gh, patch_side, gw, patch_side)
        .transpose(0, 2, 1, 3)
        .reshape(gh * gw, patch_side * patch_side)
    )
    return PatchGrid(np.ascontiguousarray(patches), gh, gw, patch_side, spec.config)


def unpatchify(grid: PatchGrid) -> MelSpectrogram:
    s = grid.patch_side
    values = (
        grid.patches.reshape(grid.grid_h, grid.grid_w, s, s)
        .transpose(0, 2, 1, 3)
        .reshape(grid.grid_h * s, grid.grid_w * s)
    )
    return MelSpectrogram(np.ascontiguousarray(values), grid.config)


def preprocess(clip: AudioClip, config: MelConfig, patch_side: int = 16) -> PatchGrid:
    """Resample, fit to the configured duration, and patchify one clip."""
    clip = fit_duration(resample(clip, config.sample_rate), config.duration)
    return patchify(mel_spectrogram(clip, config), patch_side)


# --- file formats -----------------------------------------------------------


def read_wav(path: str | Path) -> AudioClip:
    """Read a PCM 16/24/32-bit or float32 WAV; stereo files keep the first channel."""
    rate, data = wavfile.read(str(path))
    if data.ndim == 2:
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data / 32768.0
    elif data.dtype == np.int32:
        # scipy left-aligns 24-bit samples into int32
        samples = data / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV sample type {data.dtype}")
    return AudioClip(samples, rate)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write 16-bit PCM."""
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    wavfile.write(str(path), clip.sample_rate, pcm)


SPEC_MAGIC = b"AJMEL\x00v1"


def save_spectrogram(path: str | Path, spec: MelSpectrogram) -> None:
    """Golden-file container: magic, uint32 rows, uint32 cols, float32 row-major."""
    values = np.ascontiguousarray(spec.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(SPEC_MAGIC)
        f.write(struct.pack("<II", *values.shape))
        f.write(values.tobytes())


def load_spectrogram(path: str | Path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if not raw.startswith(SPEC_MAGIC) or len(raw) < len(SPEC_MAGIC) + 8:
        raise ValueError(f"{path}: not a spectrogram file")
    rows, cols = struct.unpack_from("<II", raw, len(SPEC_MAGIC))
    body = raw[len(SPEC_MAGIC) + 8 :]
    if len(body) != 4 * rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} floats, file is truncated or padded")
    values = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return MelSpectrogram(values)


def frame_count(num_samples: int, config: MelConfig) -> int:
    padded = num_samples + config.win - config.hop
    return (padded - config.win) // config.hop + 1 if padded >= config.win else 0


def nearest_mel_band(freq_hz: float, config: MelConfig) -> int:
    return int(np.argmin(np.abs(mel_center_frequencies(config) - freq_hz)))


def tone(freq_hz: float, seconds: float, sample_rate: int, amplitude: float = 0.5) -> AudioClip:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return AudioClip(amplitude * np.sin(2 * math.pi * freq_hz * t), sample_rate)
