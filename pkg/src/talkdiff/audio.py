"""Synthetic audio and a deterministic per-video-frame featurizer.

The featurizer emits one token per video frame: log window energy, the
magnitudes of the first ``dft_bins`` DFT bins of that window, and the
log-energy delta to the previous frame.  Windows do not overlap (window =
samples per video frame), so tokens are local to their frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensorfile import TensorFileError, load_tensors, save_tensors

DEFAULT_SAMPLE_RATE = 16_000
DEFAULT_FPS = 25
DEFAULT_DFT_BINS = 8
DEFAULT_ENERGY_FLOOR = 1e-8

# token layout: [log energy, dft_bins magnitudes, delta log energy]
FEATURE_DIM_EXTRA = 2


@dataclass(frozen=True)
class ToneSegment:
    """One tone: ``duration`` seconds of a sine at ``freq`` Hz.

    ``amp`` is the peak amplitude; if ``amp_end`` is set the amplitude ramps
    linearly from ``amp`` to ``amp_end`` across the segment.  ``freq = 0``
    produces silence.
    """

    duration: float
    freq: float = 0.0
    amp: float = 0.0
    amp_end: Optional[float] = None


@dataclass(frozen=True)
class ToneSpec:
    """A sequence of tone segments plus optional seeded white noise."""

    segments: Sequence[ToneSegment]
    noise_amp: float = 0.0


@dataclass
class AudioClip:
    """Mono audio samples in [-1, 1] with the video frame rate they pair with."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    frames_per_second: int = DEFAULT_FPS

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")
        if self.samples.size and (self.samples.min() < -1.0 or self.samples.max() > 1.0):
            raise ValueError("samples must lie in [-1, 1]")
        if self.sample_rate <= 0 or self.frames_per_second <= 0:
            raise ValueError("sample_rate and frames_per_second must be positive")

    @property
    def window(self) -> int:
        """Samples per video frame."""
        return self.sample_rate // self.frames_per_second


@dataclass(frozen=True)
class FeaturizerCfg:
    """Windowing and feature parameters for :func:`embed_audio`."""

    window: int
    dft_bins: int = DEFAULT_DFT_BINS
    energy_floor: float = DEFAULT_ENERGY_FLOOR

    def __post_init__(self):
        if self.window < 2 * self.dft_bins:
            raise ValueError(
                f"window ({self.window}) must be >= 2 * dft_bins ({self.dft_bins})"
            )
        if self.dft_bins < 1:
            raise ValueError("dft_bins must be >= 1")
        if self.energy_floor <= 0:
            raise ValueError("energy_floor must be positive")

    @property
    def feature_dim(self) -> int:
        return self.dft_bins + FEATURE_DIM_EXTRA


@dataclass
class AudioEmbedding:
    """Per-frame feature tokens, one row per video frame."""

    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"tokens must be [T, D] with T >= 1, got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("tokens contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def synth_audio(
    spec: ToneSpec,
    seed: int,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    frames_per_second: int = DEFAULT_FPS,
) -> AudioClip:
    """Render a tone spec to samples.  Deterministic for fixed (spec, seed).

    Rejects non-positive durations and frequencies at or above Nyquist.
    The final mix is clipped to [-1, 1].
    """
    if not spec.segments:
        raise ValueError("spec has no segments")
    if spec.noise_amp < 0:
        raise ValueError("noise_amp must be >= 0")
    nyquist = sample_rate / 2.0
    parts = []
    for i, seg in enumerate(spec.segments):
        if seg.duration <= 0:
            raise ValueError(f"segment {i}: duration must be positive, got {seg.duration}")
        if not (0.0 <= seg.freq < nyquist):
            raise ValueError(
                f"segment {i}: freq {seg.freq} Hz outside [0, {nyquist}) (aliasing)"
            )
        amp0 = float(seg.amp)
        amp1 = float(seg.amp if seg.amp_end is None else seg.amp_end)
        if amp0 < 0 or amp1 < 0:
            raise ValueError(f"segment {i}: amplitudes must be >= 0")
        n = int(round(seg.duration * sample_rate))
        t = np.arange(n, dtype=np.float64) / sample_rate
        env = amp0 + (amp1 - amp0) * (np.arange(n, dtype=np.float64) / max(n - 1, 1))
        parts.append(env * np.sin(2.0 * np.pi * seg.freq * t))
    samples = np.concatenate(parts)
    if spec.noise_amp > 0:
        rng = np.random.default_rng(seed)
        samples = samples + spec.noise_amp * rng.standard_normal(samples.size)
    np.clip(samples, -1.0, 1.0, out=samples)
    return AudioClip(samples, sample_rate, frames_per_second)


def featurizer_for(clip: AudioClip, dft_bins: int = DEFAULT_DFT_BINS,
                   energy_floor: float = DEFAULT_ENERGY_FLOOR) -> FeaturizerCfg:
    """Featurizer config matching the clip's frame rate."""
    return FeaturizerCfg(window=clip.window, dft_bins=dft_bins, energy_floor=energy_floor)


def embed_audio(clip: AudioClip, cfg: Optional[FeaturizerCfg] = None) -> AudioEmbedding:
    """Embed a clip as one token per video frame.

    Token t is ``[log(E_t + floor), 2|X_1|/N .. 2|X_b|/N, log E_t - log E_{t-1}]``
    where ``E_t`` is the mean squared sample value of window t and ``X_k`` its
    DFT.  The delta entry is 0 for the first frame.  A trailing partial window
    is dropped.
    """
    if cfg is None:
        cfg = featurizer_for(clip)
    n_frames = clip.samples.size // cfg.window
    if n_frames < 1:
        raise ValueError(
            f"clip too short: {clip.samples.size} samples < one window ({cfg.window})"
        )
    windows = clip.samples[: n_frames * cfg.window].reshape(n_frames, cfg.window)
    energy = np.mean(windows ** 2, axis=1)
    log_energy = np.log(energy + cfg.energy_floor)
    spectrum = np.fft.rfft(windows, axis=1)
    mags = 2.0 * np.abs(spectrum[:, 1 : cfg.dft_bins + 1]) / cfg.window
    delta = np.zeros(n_frames)
    delta[1:] = log_energy[1:] - log_energy[:-1]
    tokens = np.concatenate([log_energy[:, None], mags, delta[:, None]], axis=1)
    return AudioEmbedding(tokens)


def energy_from_tokens(tokens: np.ndarray,
                       energy_floor: float = DEFAULT_ENERGY_FLOOR) -> np.ndarray:
    """Invert the log-energy feature back to per-frame energies."""
    tokens = np.asarray(tokens, dtype=np.float64)
    return np.maximum(np.exp(tokens[:, 0]) - energy_floor, 0.0)


def save_embedding(embedding: AudioEmbedding, path) -> None:
    save_tensors(path, {"tokens": embedding.tokens})


def load_embedding(path) -> AudioEmbedding:
    tensors = load_tensors(path)
    if "tokens" not in tensors:
        raise TensorFileError("embedding file has no 'tokens' tensor")
    tokens = tensors["tokens"]
    if tokens.ndim != 2:
        raise TensorFileError(f"'tokens' must be rank 2, got rank {tokens.ndim}")
    return AudioEmbedding(tokens.astype(np.float64))


def load_wav(path, frames_per_second: int = DEFAULT_FPS) -> AudioClip:
    """Load a PCM16 mono little-endian WAV file."""
    import wave

    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise ValueError(f"expected mono WAV, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise ValueError(f"expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        raw = wf.readframes(wf.getnframes())
        rate = wf.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, sample_rate=rate, frames_per_second=frames_per_second)
