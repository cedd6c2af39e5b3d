"""Sprite-face video samples with known region drivers.

Each clip pairs 16 frames with 16 audio tokens.  Three signals drive three
disjoint screen regions:

* lip rectangle height follows the instantaneous per-frame audio energy,
* eye patch brightness follows a low-pass filtered copy of that energy,
* the face disk slides horizontally on an audio-independent sinusoid.

The lip rectangle is drawn with a fractional top row, so the mean intensity
inside the default lip mask is an exactly affine function of the energy
driver; that is what makes the sync metric a real oracle.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .audio import AudioClip, AudioEmbedding, ToneSegment, ToneSpec, embed_audio, synth_audio
from .tensorfile import load_tensors, save_tensors

DEFAULT_FRAMES = 16
DEFAULT_SIZE = 32
CARRIER_HZ = 100.0          # DFT bin 4 of an 8-bin, 640-sample window
ENERGY_LOW = 0.05
ENERGY_HIGH = 0.45
EXP_INIT = 0.5
CHECKER_CELL = 4
DISK_VALUE = 0.75


@dataclass(frozen=True)
class SceneCfg:
    """Scene appearance and driver parameters."""

    background_contrast: float = 0.2
    lip_gain: float = 1.0            # keep <= 1 so lip height stays in its band
    exp_smooth: float = 0.6          # low-pass coefficient for the eye driver
    pose_amp: float = 3.0            # horizontal disk offset, pixels
    pose_period: float = 16.0        # frames per oscillation

    def __post_init__(self):
        if not (0.0 <= self.background_contrast <= 1.0):
            raise ValueError("background_contrast must lie in [0, 1]")
        if self.lip_gain < 0 or self.pose_amp < 0:
            raise ValueError("gains must be >= 0")
        if not (0.0 <= self.exp_smooth < 1.0):
            raise ValueError("exp_smooth must lie in [0, 1)")
        if self.pose_period <= 0:
            raise ValueError("pose_period must be positive")

    def digest(self) -> str:
        text = "\n".join(f"{k}={getattr(self, k)!r}" for k in sorted(self.__dataclass_fields__))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class VideoSample:
    """16 frames, their audio embedding and the ground-truth drivers."""

    frames: np.ndarray            # [N, 1, H, W] in [0, 1]
    audio: AudioEmbedding         # [N, D_a]
    lip_energy: np.ndarray        # [N]
    exp_level: np.ndarray         # [N]
    pose_offset: np.ndarray       # [N]
    seed: int = 0

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 1:
            raise ValueError(f"frames must be [N, 1, H, W], got {self.frames.shape}")
        n = self.frames.shape[0]
        if self.audio.n_frames != n:
            raise ValueError(f"{self.audio.n_frames} audio tokens for {n} frames")
        for name in ("lip_energy", "exp_level", "pose_offset"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be a finite length-{n} vector")
            setattr(self, name, arr)
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("frame pixels must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def _checkerboard(rng: np.random.Generator, height: int, width: int,
                  contrast: float) -> np.ndarray:
    dr, dc = rng.integers(0, CHECKER_CELL, size=2)
    rows = (np.arange(height) + dr) // CHECKER_CELL
    cols = (np.arange(width) + dc) // CHECKER_CELL
    parity = (rows[:, None] + cols[None, :]) % 2
    return 0.5 + contrast * (parity - 0.5)


def gen_video_sample(seed: int, cfg: SceneCfg = SceneCfg(),
                     n_frames: int = DEFAULT_FRAMES,
                     height: int = DEFAULT_SIZE, width: int = DEFAULT_SIZE,
                     energies: np.ndarray | None = None) -> VideoSample:
    """Render one deterministic clip for ``seed``.

    ``energies`` overrides the seeded per-frame energy draw (used by tests
    to drive known signals, e.g. silence).
    """
    if height < 16 or width < 16:
        raise ValueError(f"scene needs height, width >= 16, got {height}x{width}")
    rng = np.random.default_rng(seed)
    background = _checkerboard(rng, height, width, cfg.background_contrast)

    if energies is None:
        e = rng.uniform(ENERGY_LOW, ENERGY_HIGH, size=n_frames)
    else:
        e = np.asarray(energies, dtype=np.float64)
        if e.shape != (n_frames,) or e.min() < 0 or e.max() > 0.5:
            raise ValueError(f"energies must be {n_frames} values in [0, 0.5]")

    # audio: one constant-amplitude carrier segment per video frame, with
    # amp_t = sqrt(2 e_t) so each 640-sample window integrates to exactly e_t
    segments = [ToneSegment(duration=0.04, freq=CARRIER_HZ, amp=float(np.sqrt(2.0 * et)))
                for et in e]
    clip = synth_audio(ToneSpec(segments), seed=seed)
    audio = embed_audio(clip)
    if audio.n_frames != n_frames:
        raise AssertionError("audio tokenization out of step with frame count")

    t = np.arange(n_frames)
    pose = cfg.pose_amp * np.sin(2.0 * np.pi * t / cfg.pose_period)
    exp = np.empty(n_frames)
    prev = EXP_INIT
    for i in range(n_frames):
        prev = cfg.exp_smooth * prev + (1.0 - cfg.exp_smooth) * e[i]
        exp[i] = prev

    # geometry derived from the default mask bands so drivers land in-region
    lip_r0, lip_r1 = 13 * height // 20, 9 * height // 10
    lip_c0, lip_c1 = 3 * width // 10, 7 * width // 10
    exp_r0, exp_r1 = 3 * height // 20, height // 2
    margin = int(np.ceil(cfg.pose_amp)) + 1
    rect_c0, rect_c1 = lip_c0 + margin, lip_c1 - margin
    if rect_c1 <= rect_c0:
        raise ValueError("pose amplitude too large for the lip band width")
    eye_rows = slice((exp_r0 + exp_r1) // 2 - 1, (exp_r0 + exp_r1) // 2 + 2)
    eye_half = max(width // 32, 1)
    left_c, right_c = width // 2 - width // 8, width // 2 + width // 8
    # the disk must cover the static lip band at every pose offset, otherwise
    # background pixels leak into the lip mask and corrupt the energy readout
    corner_dy = max(lip_r1 - 1 - height // 2, height // 2 - lip_r0)
    corner_dx = max(width // 2 - lip_c0, lip_c1 - 1 - width // 2) + int(np.ceil(cfg.pose_amp))
    radius = int(np.ceil(np.hypot(corner_dy, corner_dx)))
    yy, xx = np.mgrid[0:height, 0:width]

    frames = np.empty((n_frames, 1, height, width))
    lip_band = lip_r1 - lip_r0
    for i in range(n_frames):
        img = background.copy()
        off = int(np.round(pose[i]))
        cx = width // 2 + off
        img[(yy - height // 2) ** 2 + (xx - cx) ** 2 <= radius ** 2] = DISK_VALUE
        for ec in (left_c + off, right_c + off):
            img[eye_rows, ec - eye_half:ec + eye_half + 1] = exp[i]
        # lip rectangle grows upward from the band's bottom edge; the partial
        # top row keeps masked mean intensity exactly affine in e_t
        h_t = 1.0 + 1.5 * lip_band * cfg.lip_gain * e[i]
        h_t = min(h_t, float(lip_band))
        full = int(h_t)
        frac = h_t - full
        img[lip_r1 - full:lip_r1, rect_c0 + off:rect_c1 + off] = 1.0
        if frac > 0 and lip_r1 - full - 1 >= lip_r0:
            row = lip_r1 - full - 1
            band = img[row, rect_c0 + off:rect_c1 + off]
            img[row, rect_c0 + off:rect_c1 + off] = band + frac * (1.0 - band)
        frames[i, 0] = img

    return VideoSample(frames=np.clip(frames, 0.0, 1.0), audio=audio,
                       lip_energy=e, exp_level=exp, pose_offset=pose, seed=seed)


def make_dataset(n: int, seed: int, cfg: SceneCfg = SceneCfg(), **kwargs) -> List[VideoSample]:
    """n deterministic samples from consecutive seeds seed..seed+n-1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [gen_video_sample(seed + i, cfg, **kwargs) for i in range(n)]


def save_video_sample(sample: VideoSample, path) -> None:
    save_tensors(path, {
        "frames": sample.frames,
        "audio": sample.audio.tokens,
        "lip_energy": sample.lip_energy,
        "exp_level": sample.exp_level,
        "pose_offset": sample.pose_offset,
        "seed": np.array([float(sample.seed)]),
    })


def load_video_sample(path) -> VideoSample:
    t = load_tensors(path)
    required = ("frames", "audio", "lip_energy", "exp_level", "pose_offset")
    missing = [k for k in required if k not in t]
    if missing:
        raise ValueError(f"video sample file missing tensors: {missing}")
    seed = int(t["seed"][0]) if "seed" in t else 0
    return VideoSample(frames=t["frames"], audio=AudioEmbedding(t["audio"]),
                       lip_energy=t["lip_energy"], exp_level=t["exp_level"],
                       pose_offset=t["pose_offset"], seed=seed)


def save_dataset(samples: Sequence[VideoSample], out_dir, cfg: SceneCfg,
                 config_digest: str = "none") -> Path:
    """One tensor file per sample plus a manifest recording seeds and digests."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"count = {len(samples)}", f"scene_digest = {cfg.digest()}",
             f"config_digest = {config_digest}"]
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}.sdtf"
        save_video_sample(s, out / name)
        lines.append(f"sample_{i:05d} = seed {s.seed}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_dataset(in_dir) -> List[VideoSample]:
    files = sorted(Path(in_dir).glob("sample_*.sdtf"))
    if not files:
        raise FileNotFoundError(f"no sample_*.sdtf files under {in_dir}")
    return [load_video_sample(f) for f in files]
