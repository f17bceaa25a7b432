import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audio_jepa.dsp import (
    AudioClip,
    MelConfig,
    MelSpectrogram,
    PatchGrid,
    fit_duration,
    frame_count,
    load_spectrogram,
    mel_center_frequencies,
    mel_filterbank,
    mel_spectrogram,
    nearest_mel_band,
    patchify,
    read_wav,
    resample,
    save_spectrogram,
    tone,
    unpatchify,
    write_wav,
)


def fft_peak_hz(clip: AudioClip) -> float:
    # zero-padded FFT, then parabolic interpolation around the peak bin
    n = 8 * clip.samples.size
    mag = np.abs(np.fft.rfft(clip.samples * np.hanning(clip.samples.size), n=n))
    k = int(np.argmax(mag))
    a, b, c = np.log(mag[k - 1 : k + 2])
    offset = 0.5 * (a - c) / (a - 2 * b + c)
    return (k + offset) * clip.sample_rate / n


class TestAudioClip:
    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="empty"):
            AudioClip(np.array([]), 16000)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            AudioClip(np.array([0.0, np.nan]), 16000)

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            AudioClip(np.zeros(4), 0)


class TestResample:
    def test_identity(self):
        clip = AudioClip(np.random.default_rng(0).uniform(-1, 1, 3200), 32000)
        out = resample(clip, 32000)
        assert np.array_equal(out.samples, clip.samples)

    def test_tone_frequency_preserved(self):
        out = resample(tone(440.0, 1.0, 16000), 32000)
        assert out.sample_rate == 32000
        assert abs(fft_peak_hz(out) - 440.0) < 1.0

    def test_downsampling_keeps_tone_below_both_nyquists(self):
        out = resample(tone(3000.0, 1.0, 44100), 32000)
        assert abs(fft_peak_hz(out) - 3000.0) < 1.0

    @pytest.mark.parametrize("n", [16000, 16001, 15999, 12345])
    def test_length(self, n):
        out = resample(AudioClip(np.zeros(n) + 0.1, 16000), 32000)
        assert abs(out.samples.size - 2 * n) <= 1

    def test_errors(self):
        with pytest.raises(ValueError):
            resample(AudioClip(np.zeros(8), 16000), 0)


class TestFitDuration:
    def test_unchanged(self):
        clip = AudioClip(np.full(320000, 0.25), 32000)
        assert np.array_equal(fit_duration(clip, 10.0).samples, clip.samples)

    def test_pads_at_end(self):
        clip = AudioClip(np.full(160000, 0.25), 32000)
        out = fit_duration(clip, 10.0).samples
        assert out.size == 320000
        assert np.all(out[160000:] == 0.0)
        assert np.all(out[:160000] == 0.25)

    def test_crops_from_start(self):
        samples = np.random.default_rng(1).uniform(-1, 1, 12 * 32000)
        out = fit_duration(AudioClip(samples, 32000), 10.0).samples
        assert np.array_equal(out, samples[:320000])

    def test_bad_duration(self):
        with pytest.raises(ValueError):
            fit_duration(AudioClip(np.zeros(4), 8), 0.0)


class TestMelConfig:
    def test_defaults(self):
        cfg = MelConfig()
        assert cfg.win == 3125 and cfg.hop == 1250
        assert cfg.win / cfg.hop == 2.5
        assert cfg.duration == 10.0
        assert cfg.fft_size >= cfg.win

    def test_fft_too_small(self):
        with pytest.raises(ValueError, match="fft_size"):
            MelConfig(fft_size=2048)


class TestMelSpectrogram:
    def test_frame_count_formula(self):
        cfg = MelConfig()
        assert frame_count(320000, cfg) == 256

    @given(hop=st.integers(10, 400), bins=st.integers(1, 40))
    @settings(max_examples=40, deadline=None)
    def test_frame_count_identity(self, hop, bins):
        cfg = MelConfig(sample_rate=8000, hop=hop, n_time_bins=bins, n_mels=8, fft_size=2048)
        clip = AudioClip(np.random.default_rng(hop).uniform(-1, 1, cfg.num_samples), 8000)
        assert mel_spectrogram(clip, cfg).values.shape == (8, bins)

    def test_default_shape(self):
        clip = AudioClip(np.random.default_rng(0).uniform(-0.5, 0.5, 320000), 32000)
        spec = mel_spectrogram(clip, MelConfig())
        assert spec.values.shape == (128, 256)
        assert np.all(np.isfinite(spec.values))

    def test_normalized(self):
        clip = AudioClip(np.random.default_rng(2).uniform(-0.5, 0.5, 320000), 32000)
        v = mel_spectrogram(clip, MelConfig()).values
        assert abs(v.mean()) < 1e-5
        assert abs(v.std() - 1.0) < 1e-5

    def test_silent_clip(self):
        cfg = MelConfig(n_time_bins=32)
        spec = mel_spectrogram(AudioClip(np.zeros(cfg.num_samples), 32000), cfg)
        assert spec.silent
        assert np.all(spec.values == 0.0)

    def test_silent_clip_before_normalization(self):
        from audio_jepa.dsp import stft_power

        cfg = MelConfig(n_time_bins=32)
        power = stft_power(np.zeros(cfg.num_samples), cfg)
        logmel = np.log(mel_filterbank(cfg) @ power.T + cfg.log_floor)
        assert np.all(logmel == math.log(cfg.log_floor))

    def test_tone_lands_in_nearest_band(self):
        cfg = MelConfig(n_time_bins=32)
        spec = mel_spectrogram(tone(1000.0, cfg.duration, 32000), cfg)
        # edge frames see the zero padding, so check the interior
        peaks = spec.values[:, 2:-2].argmax(axis=0)
        assert np.all(peaks == peaks[0])
        assert peaks[0] == nearest_mel_band(1000.0, cfg)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="samples"):
            mel_spectrogram(AudioClip(np.zeros(1000) + 0.1, 32000), MelConfig())

    def test_rate_mismatch(self):
        with pytest.raises(ValueError, match="sample rate"):
            mel_spectrogram(AudioClip(np.zeros(320000) + 0.1, 16000), MelConfig())


class TestFilterbank:
    def test_rows_nonnegative_and_nonempty(self):
        fb = mel_filterbank(MelConfig())
        assert fb.shape == (128, 2049)
        assert np.all(fb >= 0)
        assert np.all(fb.max(axis=1) > 0)

    def test_centers_increasing(self):
        centers = mel_center_frequencies(MelConfig())
        assert np.all(np.diff(centers) > 0)
        assert centers[0] > 0 and centers[-1] < 16000


class TestPatchify:
    def test_default_grid(self):
        spec = MelSpectrogram(np.random.default_rng(0).standard_normal((128, 256)))
        grid = patchify(spec, 16)
        assert (grid.grid_h, grid.grid_w) == (8, 16)
        assert grid.patches.shape == (128, 256)

    def test_top_left_block(self):
        values = np.arange(32 * 32, dtype=float).reshape(32, 32)
        grid = patchify(MelSpectrogram(values), 16)
        assert grid.num_patches == 4
        assert np.array_equal(grid.patches[0], values[:16, :16].ravel())
        # frequency-major: patch 1 is the next block along time
        assert np.array_equal(grid.patches[1], values[:16, 16:].ravel())
        assert np.array_equal(grid.patches[2], values[16:, :16].ravel())

    def test_patch_covers_rows_and_frames(self):
        values = np.random.default_rng(3).standard_normal((64, 48))
        grid = patchify(MelSpectrogram(values), 16)
        for i in range(grid.grid_h):
            for j in range(grid.grid_w):
                block = values[16 * i : 16 * i + 16, 16 * j : 16 * j + 16]
                assert np.array_equal(grid.patches[i * grid.grid_w + j], block.ravel())

    def test_non_divisible(self):
        with pytest.raises(ValueError, match="100.*256|divisible"):
            patchify(MelSpectrogram(np.zeros((100, 256))), 16)

    @given(h=st.integers(1, 6), w=st.integers(1, 6), side=st.sampled_from([1, 2, 4, 16]))
    @settings(max_examples=40, deadline=None)
    def test_round_trip(self, h, w, side):
        values = np.random.default_rng(h * 31 + w).standard_normal((h * side, w * side))
        back = unpatchify(patchify(MelSpectrogram(values), side)).values
        assert np.array_equal(back, values)

    def test_single_patch_grid(self):
        patch = np.arange(256, dtype=float)
        spec = unpatchify(PatchGrid(patch[None, :], 1, 1, 16))
        assert np.array_equal(spec.values, patch.reshape(16, 16))

    def test_constant_grid(self):
        spec = unpatchify(PatchGrid(np.full((6, 256), 2.5), 2, 3, 16))
        assert spec.values.shape == (32, 48)
        assert np.all(spec.values == 2.5)


class TestFiles:
    def test_wav_round_trip_16bit(self, tmp_path):
        clip = tone(440.0, 0.1, 16000)
        write_wav(tmp_path / "a.wav", clip)
        back = read_wav(tmp_path / "a.wav")
        assert back.sample_rate == 16000
        assert np.max(np.abs(back.samples - clip.samples)) < 1e-4

    @pytest.mark.parametrize("dtype,scale", [(np.int32, 2**31 - 1), (np.float32, 1.0)])
    def test_wav_formats_and_stereo(self, tmp_path, dtype, scale):
        from scipy.io import wavfile

        left = np.linspace(-0.5, 0.5, 100)
        data = np.stack([left, -left], axis=1) * scale
        wavfile.write(tmp_path / "s.wav", 8000, data.astype(dtype))
        back = read_wav(tmp_path / "s.wav")
        assert np.allclose(back.samples, left, atol=1e-6)

    def test_spectrogram_container(self, tmp_path):
        spec = MelSpectrogram(np.random.default_rng(0).standard_normal((8, 12)))
        save_spectrogram(tmp_path / "s.bin", spec)
        back = load_spectrogram(tmp_path / "s.bin")
        assert np.array_equal(back.values, spec.values.astype(np.float32))

    def test_spectrogram_container_truncated(self, tmp_path):
        spec = MelSpectrogram(np.zeros((8, 12)))
        save_spectrogram(tmp_path / "s.bin", spec)
        raw = (tmp_path / "s.bin").read_bytes()
        (tmp_path / "s.bin").write_bytes(raw[:-3])
        with pytest.raises(ValueError, match="truncated"):
            load_spectrogram(tmp_path / "s.bin")
