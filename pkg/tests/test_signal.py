"""Audio loading, resampling, chunking and the compressed CQT."""

import numpy as np
import pytest

from coverseek.errors import AudioReadError, ConfigError, UnsupportedEncodingError
from coverseek.signal import (
    AudioBuffer,
    CqtConfig,
    chunk,
    chunk_offsets,
    compress,
    cqt,
    extract_features,
    extract_features_from_audio,
    load_audio,
    resample,
)

from helpers import sine, write_wav

SR = 22050


class TestLoadAudio:
    def test_silence_wav(self, tmp_path):
        path = write_wav(tmp_path / "silence.wav", np.zeros(SR), SR)
        buf = load_audio(path)
        assert len(buf) == SR
        assert buf.sample_rate == SR
        assert np.all(buf.samples == 0.0)

    def test_stereo_averaged_to_mono(self, tmp_path):
        stereo = np.stack([np.full(1000, 0.5), np.full(1000, -0.5)], axis=1)
        path = write_wav(tmp_path / "stereo.wav", stereo, SR, dtype=np.float32)
        buf = load_audio(path)
        assert buf.samples.shape == (1000,)
        np.testing.assert_allclose(buf.samples, 0.0, atol=1e-7)

    def test_sample_count_is_duration_times_rate(self, tmp_path):
        path = write_wav(tmp_path / "sine.wav", sine(3.0, 440, rate=44100), 44100)
        buf = load_audio(path)
        assert len(buf) == 132300
        assert buf.sample_rate == 44100

    def test_float32_wav_supported(self, tmp_path):
        path = write_wav(tmp_path / "f32.wav", sine(0.5, 220), SR, dtype=np.float32)
        buf = load_audio(path)
        assert len(buf) == SR // 2

    def test_missing_file_is_read_error(self, tmp_path):
        with pytest.raises(AudioReadError):
            load_audio(tmp_path / "absent.wav")

    def test_unsupported_bit_depth_is_encoding_error(self, tmp_path):
        path = write_wav(
            tmp_path / "u8.wav", np.full(100, 128, dtype=np.uint8), SR, dtype=np.uint8
        )
        with pytest.raises(UnsupportedEncodingError):
            load_audio(path)

    def test_garbage_file_is_encoding_error(self, tmp_path):
        path = tmp_path / "junk.wav"
        path.write_bytes(b"definitely not a wav file")
        with pytest.raises(UnsupportedEncodingError):
            load_audio(path)


class TestResample:
    def test_two_to_one_length(self):
        buf = AudioBuffer(sine(1.0, 440, rate=44100), 44100)
        out = resample(buf, 22050)
        assert len(out) == 22050
        assert out.sample_rate == 22050

    def test_identity_when_rates_match(self):
        buf = AudioBuffer(sine(0.25, 440), SR)
        out = resample(buf, SR)
        assert out is buf

    def test_peak_bin_survives_resampling(self, default_cqt_cfg):
        cfg = default_cqt_cfg
        src = AudioBuffer(sine(3.0, 440, rate=44100), 44100)
        down = resample(src, SR)
        padded = np.zeros(cfg.chunk_samples)
        padded[: len(down)] = down.samples
        mat = cqt(AudioBuffer(padded, SR), cfg)
        peak = int(np.argmax(mat[:, 20:100].mean(axis=1)))
        assert peak == 45

    def test_tone_preserved_within_tolerance(self):
        src = AudioBuffer(sine(0.5, 1000, rate=44100), 44100)
        out = resample(src, 22050)
        ref = sine(0.5, 1000, rate=22050)
        # ignore filter edges
        err = np.abs(out.samples[200:-200] - ref[200 : len(out) - 200])
        assert err.max() < 5e-3


class TestChunking:
    def test_60s_gives_five_chunks(self, default_cqt_cfg):
        offsets = chunk_offsets(60 * SR, default_cqt_cfg)
        np.testing.assert_array_equal(offsets / SR, [0, 10, 20, 30, 40])

    def test_short_recording_single_padded_chunk(self, default_cqt_cfg):
        buf = AudioBuffer(sine(6.0, 330), SR)
        chunks = chunk(buf, default_cqt_cfg)
        assert len(chunks) == 1
        assert len(chunks[0]) == default_cqt_cfg.chunk_samples
        assert np.all(chunks[0].samples[6 * SR :] == 0.0)

    def test_exact_chunk_length_no_padding(self, default_cqt_cfg):
        buf = AudioBuffer(sine(20.0, 330), SR)
        chunks = chunk(buf, default_cqt_cfg)
        assert len(chunks) == 1
        np.testing.assert_array_equal(chunks[0].samples, buf.samples)

    def test_25s_gives_full_plus_tail(self, default_cqt_cfg):
        offsets = chunk_offsets(25 * SR, default_cqt_cfg)
        np.testing.assert_array_equal(offsets / SR, [0, 10])

    def test_empty_audio_rejected(self, default_cqt_cfg):
        with pytest.raises(ValueError):
            chunk_offsets(0, default_cqt_cfg)

    def test_chunk_count_matches_direct_simulation(self, default_cqt_cfg):
        """Chunk-count formula against a direct walk of the offset grid."""
        cfg = default_cqt_cfg
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = int(rng.integers(1, 90 * SR))
            offsets = chunk_offsets(n, cfg)
            # simulate: offsets every stride while a full chunk fits, then
            # optionally one more if new samples remain and the tail is long
            expected = [0]
            o = cfg.stride_samples
            while o + cfg.chunk_samples <= n:
                expected.append(o)
                o += cfg.stride_samples
            if n > cfg.chunk_samples:
                last_end = expected[-1] + cfg.chunk_samples
                if n > last_end and n - o >= cfg.min_tail_samples:
                    expected.append(o)
            assert offsets.tolist() == expected
            n_full = (n - cfg.chunk_samples) // cfg.stride_samples + 1 if n >= cfg.chunk_samples else 0
            tail = len(offsets) - max(n_full, 1) if n >= cfg.chunk_samples else 0
            assert len(offsets) == max(1, n_full + tail)
            assert tail in (0, 1)


class TestCqt:
    def test_pure_tone_peak_bin_closed_form(self, default_cqt_cfg):
        cfg = default_cqt_cfg
        mat = cqt(AudioBuffer(sine(20.0, 440), SR), cfg)
        assert mat.shape == (84, 862)
        interior = mat[:, 30:-30]
        peak = int(np.argmax(interior.mean(axis=1)))
        assert peak == round(12 * np.log2(440 / 32.70))

    def test_pure_tone_energy_concentrates(self, default_cqt_cfg):
        mat = cqt(AudioBuffer(sine(20.0, 440), SR), default_cqt_cfg)
        energy = (mat[:, 30:-30] ** 2).sum(axis=1)
        peak = int(np.argmax(energy))
        frac = energy[peak - 1 : peak + 2].sum() / energy.sum()
        assert frac >= 0.5

    def test_zero_chunk_gives_zero_matrix(self, default_cqt_cfg):
        mat = cqt(AudioBuffer(np.zeros(default_cqt_cfg.chunk_samples) + 0.0, SR), default_cqt_cfg)
        assert np.all(mat == 0.0)

    def test_frame_count_formula(self, default_cqt_cfg):
        assert default_cqt_cfg.frames_per_chunk == 862

    def test_wrong_length_rejected(self, default_cqt_cfg):
        with pytest.raises(ValueError):
            cqt(AudioBuffer(np.zeros(1000) + 0.0, SR), default_cqt_cfg)

    def test_magnitudes_non_negative_and_finite(self, small_cqt_cfg):
        rng = np.random.default_rng(12)
        buf = AudioBuffer(rng.uniform(-1, 1, small_cqt_cfg.chunk_samples), SR)
        mat = cqt(buf, small_cqt_cfg)
        assert np.all(mat >= 0.0)
        assert np.all(np.isfinite(mat))


class TestCompress:
    def test_862_frames_factor_100_gives_8(self):
        mat = np.arange(84 * 862, dtype=np.float64).reshape(84, 862)
        assert compress(mat, 100).shape == (84, 8)

    def test_constant_matrix_stays_constant(self):
        mat = np.full((10, 50), 3.75)
        np.testing.assert_array_equal(compress(mat, 7), np.full((10, 7), 3.75))

    def test_factor_one_is_identity(self):
        mat = np.random.default_rng(13).standard_normal((4, 9))
        assert compress(mat, 1) is mat

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="too short"):
            compress(np.ones((4, 5)), 6)

    def test_composition_of_factors(self):
        rng = np.random.default_rng(14)
        mat = rng.standard_normal((6, 120))
        twice = compress(compress(mat, 4), 5)
        once = compress(mat, 20)
        np.testing.assert_allclose(twice, once, rtol=1e-12, atol=1e-14)


class TestExtractFeatures:
    def test_60s_default_shape(self, default_cqt_cfg, tmp_path):
        path = write_wav(tmp_path / "a.wav", sine(60.0, 261.63), SR)
        feats = extract_features(path, default_cqt_cfg)
        assert feats.data.shape == (5, 84, 8)
        assert feats.recording_id == "a"
        np.testing.assert_array_equal(feats.chunk_offsets_seconds, [0, 10, 20, 30, 40])

    def test_silence_standardization_guarded(self, default_cqt_cfg, tmp_path):
        path = write_wav(tmp_path / "zeros.wav", np.zeros(25 * SR), SR)
        feats = extract_features(path, default_cqt_cfg)
        assert feats.data.shape[0] == 2
        assert np.all(feats.data == 0.0)

    def test_tail_chunk_rule(self, default_cqt_cfg, tmp_path):
        path = write_wav(tmp_path / "b.wav", sine(25.0, 220), SR)
        feats = extract_features(path, default_cqt_cfg)
        assert feats.data.shape[0] == 2

    def test_deterministic(self, small_cqt_cfg, tmp_path):
        rng = np.random.default_rng(15)
        path = write_wav(tmp_path / "r.wav", rng.uniform(-0.5, 0.5, 9 * SR), SR)
        a = extract_features(path, small_cqt_cfg)
        b = extract_features(path, small_cqt_cfg)
        np.testing.assert_array_equal(a.data, b.data)

    def test_chunks_standardized(self, small_cqt_cfg):
        buf = AudioBuffer(sine(9.0, 175), SR)
        feats = extract_features_from_audio(buf, small_cqt_cfg, "t")
        for chunk_mat in feats.data:
            assert abs(chunk_mat.mean()) < 1e-9
            assert abs(chunk_mat.std() - 1.0) < 1e-6


class TestCqtConfig:
    def test_bad_overlap_rejected(self):
        with pytest.raises(ConfigError):
            CqtConfig(overlap_seconds=20.0)

    def test_bins_not_multiple_rejected(self):
        with pytest.raises(ConfigError):
            CqtConfig(n_bins=83)

    def test_nyquist_violation_rejected(self):
        with pytest.raises(ConfigError):
            CqtConfig(n_bins=120)

    def test_unknown_window_rejected(self):
        with pytest.raises(ConfigError):
            CqtConfig(window="hamming")
