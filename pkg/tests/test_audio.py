"""Audio synthesis and featurizer contracts.

The DFT assertions use a direct O(N^2) transform written here, independent
of the FFT the implementation calls.
"""

import numpy as np
import pytest

from talkdiff.audio import (
    AudioClip,
    AudioEmbedding,
    FeaturizerCfg,
    ToneSegment,
    ToneSpec,
    embed_audio,
    energy_from_tokens,
    featurizer_for,
    load_embedding,
    load_wav,
    save_embedding,
    synth_audio,
)
from talkdiff.tensorfile import TensorFileError

SILENCE_1S = ToneSpec([ToneSegment(duration=1.0, freq=0.0, amp=0.0)])


def brute_force_dft_mag(window: np.ndarray, n_bins: int) -> np.ndarray:
    """Direct DFT magnitudes for bins 1..n_bins, same 2/N normalization."""
    n = window.size
    out = np.zeros(n_bins)
    for k in range(1, n_bins + 1):
        re = sum(window[t] * np.cos(2 * np.pi * k * t / n) for t in range(n))
        im = sum(-window[t] * np.sin(2 * np.pi * k * t / n) for t in range(n))
        out[k - 1] = 2.0 * np.hypot(re, im) / n
    return out


class TestSynth:
    def test_silence_is_zero_samples(self):
        clip = synth_audio(SILENCE_1S, seed=0)
        assert clip.samples.shape == (16000,)
        assert np.all(clip.samples == 0.0)

    def test_deterministic_bitwise(self):
        spec = ToneSpec([ToneSegment(0.3, 440.0, 0.5), ToneSegment(0.2, 100.0, 0.2, 0.8)],
                        noise_amp=0.05)
        a = synth_audio(spec, seed=7)
        b = synth_audio(spec, seed=7)
        assert np.array_equal(a.samples, b.samples)

    def test_seed_changes_noise(self):
        spec = ToneSpec([ToneSegment(0.1, 440.0, 0.5)], noise_amp=0.05)
        a = synth_audio(spec, seed=1)
        b = synth_audio(spec, seed=2)
        assert not np.array_equal(a.samples, b.samples)

    def test_sine_energy_matches_half_amp_squared(self):
        # mean square of an amp-A sine is A^2/2; check each 640-sample frame
        clip = synth_audio(ToneSpec([ToneSegment(1.0, 440.0, 0.5)]), seed=0)
        windows = clip.samples[: 25 * 640].reshape(25, 640)
        energy = (windows ** 2).mean(axis=1)
        assert np.all(np.abs(energy - 0.125) / 0.125 < 0.01)

    def test_rejects_bad_segments(self):
        with pytest.raises(ValueError, match="duration"):
            synth_audio(ToneSpec([ToneSegment(0.0, 100.0, 0.5)]), seed=0)
        with pytest.raises(ValueError, match="aliasing"):
            synth_audio(ToneSpec([ToneSegment(0.1, 8000.0, 0.5)]), seed=0)
        with pytest.raises(ValueError, match="segments"):
            synth_audio(ToneSpec([]), seed=0)

    def test_clip_bounds_respected(self):
        loud = ToneSpec([ToneSegment(0.1, 440.0, 1.0)], noise_amp=0.5)
        clip = synth_audio(loud, seed=3)
        assert clip.samples.max() <= 1.0
        assert clip.samples.min() >= -1.0


class TestEmbed:
    def test_silence_tokens(self):
        emb = embed_audio(synth_audio(SILENCE_1S, seed=0))
        assert emb.tokens.shape == (25, 10)
        expected = np.zeros(10)
        expected[0] = np.log(1e-8)
        assert np.allclose(emb.tokens, expected[None, :], atol=0)

    def test_doubling_amplitude_adds_log4_to_energy(self):
        spec_half = ToneSpec([ToneSegment(0.2, 440.0, 0.25)])
        spec_full = ToneSpec([ToneSegment(0.2, 440.0, 0.5)])
        e_half = embed_audio(synth_audio(spec_half, seed=0))
        e_full = embed_audio(synth_audio(spec_full, seed=0))
        diff = e_full.tokens[:, 0] - e_half.tokens[:, 0]
        # exact up to the 1e-8 energy floor, which perturbs at ~1e-7 here
        assert np.allclose(diff, np.log(4.0), atol=1e-5)

    def test_bin_center_sine_dominates_its_bin(self):
        # 100 Hz = bin 4 of a 640-sample window at 16 kHz
        clip = synth_audio(ToneSpec([ToneSegment(0.4, 100.0, 0.6)]), seed=0)
        emb = embed_audio(clip)
        mags = emb.tokens[:, 1:9]
        assert np.all(np.argmax(mags, axis=1) == 3)
        others = np.delete(mags, 3, axis=1)
        assert np.all(mags[:, 3] > others.max(axis=1) + 0.1)

    def test_matches_brute_force_dft(self, rng):
        samples = rng.uniform(-1, 1, 640 * 2)
        clip = AudioClip(samples)
        emb = embed_audio(clip)
        for t in range(2):
            window = samples[t * 640: (t + 1) * 640]
            expected = brute_force_dft_mag(window, 8)
            np.testing.assert_allclose(emb.tokens[t, 1:9], expected, atol=1e-10)

    def test_delta_log_energy_layout(self):
        spec = ToneSpec([ToneSegment(0.04, 440.0, 0.2), ToneSegment(0.04, 440.0, 0.4)])
        emb = embed_audio(synth_audio(spec, seed=0))
        assert emb.tokens[0, 9] == 0.0
        assert emb.tokens[1, 9] == pytest.approx(
            emb.tokens[1, 0] - emb.tokens[0, 0], abs=0)

    def test_deterministic_for_equal_clips(self, rng):
        samples = rng.uniform(-1, 1, 640 * 3)
        a = embed_audio(AudioClip(samples.copy()))
        b = embed_audio(AudioClip(samples.copy()))
        assert np.array_equal(a.tokens, b.tokens)

    def test_time_shift_locality(self, rng):
        samples = rng.uniform(-1, 1, 640 * 8)
        full = embed_audio(AudioClip(samples))
        for k in (1, 3):
            shifted = embed_audio(AudioClip(samples[k * 640:]))
            # interior tokens (delta defined on both sides) line up exactly
            np.testing.assert_allclose(shifted.tokens[1:], full.tokens[k + 1:],
                                       atol=1e-12)

    def test_features_finite_for_random_clips(self, rng):
        for _ in range(10):
            n = int(rng.integers(640, 640 * 5))
            emb = embed_audio(AudioClip(rng.uniform(-1, 1, n)))
            assert np.all(np.isfinite(emb.tokens))

    def test_too_short_clip_rejected(self):
        with pytest.raises(ValueError, match="too short"):
            embed_audio(AudioClip(np.zeros(100)))

    def test_energy_recoverable_from_tokens(self, rng):
        e_target = rng.uniform(0.05, 0.45, 4)
        segs = [ToneSegment(0.04, 100.0, float(np.sqrt(2 * e))) for e in e_target]
        emb = embed_audio(synth_audio(ToneSpec(segs), seed=0))
        np.testing.assert_allclose(energy_from_tokens(emb.tokens), e_target, rtol=1e-9)

    def test_cfg_validation(self):
        with pytest.raises(ValueError, match="window"):
            FeaturizerCfg(window=10, dft_bins=8)
        with pytest.raises(ValueError, match="energy_floor"):
            FeaturizerCfg(window=640, dft_bins=8, energy_floor=0.0)


class TestEmbeddingIO:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        emb = AudioEmbedding(rng.standard_normal((16, 10)))
        save_embedding(emb, tmp_path / "e.sdtf")
        out = load_embedding(tmp_path / "e.sdtf")
        assert np.array_equal(out.tokens, emb.tokens)

    def test_empty_file_is_header_error(self, tmp_path):
        path = tmp_path / "e.sdtf"
        path.write_bytes(b"")
        with pytest.raises(TensorFileError):
            load_embedding(path)

    def test_missing_tokens_tensor(self, tmp_path):
        from talkdiff.tensorfile import save_tensors
        save_tensors(tmp_path / "e.sdtf", {"other": np.zeros(3)})
        with pytest.raises(TensorFileError, match="tokens"):
            load_embedding(tmp_path / "e.sdtf")


class TestWav:
    def test_pcm16_roundtrip(self, tmp_path):
        import wave

        clip = synth_audio(ToneSpec([ToneSegment(0.1, 440.0, 0.5)]), seed=0)
        pcm = (clip.samples * 32767.0).astype("<i2")
        path = tmp_path / "t.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(16000)
            wf.writeframes(pcm.tobytes())
        loaded = load_wav(path)
        assert loaded.sample_rate == 16000
        np.testing.assert_allclose(loaded.samples, clip.samples, atol=1e-4)

    def test_rejects_stereo(self, tmp_path):
        import wave

        path = tmp_path / "s.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(16000)
            wf.writeframes(b"\x00" * 64)
        with pytest.raises(ValueError, match="mono"):
            load_wav(path)
