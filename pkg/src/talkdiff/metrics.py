"""Pixel-level video quality proxies.

These scores are self-contained functions of the frames, the region masks
and the per-frame audio energy.  They require no learned models or
external reference data, which also means they are only comparable to each
other within this codebase, never to externally published scores.

* smoothness: 1 - mean absolute inter-frame pixel difference
* subject / background consistency: mean cosine similarity of each frame's
  region pixels against frame 0
* sync: best lagged Pearson correlation between lip-region intensity and
  audio energy, reported as (confidence, |best lag|)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, NamedTuple, Sequence

import numpy as np

from .adapters import RegionMasks

CSV_COLUMNS = ("id", "adapter_kind", "smooth", "subject", "background", "sync_c", "sync_d")
DEFAULT_MAX_LAG = 2


class SyncResult(NamedTuple):
    sync_c: float
    sync_d: int
    degenerate: bool = False


@dataclass
class MetricsReport:
    """One video's scores; ranges: smooth in [0,1], cosines in [-1,1]."""

    smooth: float
    subject: float
    background: float
    sync_c: float
    sync_d: int
    degenerate_sync: bool = False


def _frames_2d(frames: np.ndarray) -> np.ndarray:
    """Accept [N, H, W] or [N, 1, H, W]; return [N, H, W] float64 in [0, 1]."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        if frames.shape[1] != 1:
            raise ValueError(f"expected single-channel frames, got {frames.shape}")
        frames = frames[:, 0]
    if frames.ndim != 3:
        raise ValueError(f"frames must be [N, H, W] or [N, 1, H, W], got {frames.shape}")
    if not np.all(np.isfinite(frames)) or frames.min() < 0.0 or frames.max() > 1.0:
        raise ValueError("frame pixels must be finite and lie in [0, 1]")
    return frames


def smoothness(frames: np.ndarray) -> float:
    """1 - mean |f_{t+1} - f_t|; 1.0 for a constant video."""
    f = _frames_2d(frames)
    if f.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    return float(1.0 - np.mean(np.abs(np.diff(f, axis=0))))


def _region_consistency(frames: np.ndarray, region: np.ndarray) -> float:
    f = _frames_2d(frames)
    if f.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    if region.sum() == 0:
        raise ValueError("empty region")
    vecs = f[:, region]                      # [N, n_pixels]
    ref = vecs[0]
    ref_norm = np.linalg.norm(ref)
    sims = []
    for t in range(1, vecs.shape[0]):
        cur = vecs[t]
        if np.array_equal(cur, ref):
            # bitwise-equal frames score exactly 1.0; the float cosine would
            # wobble by an ulp and can even exceed 1
            sims.append(1.0)
            continue
        denom = ref_norm * np.linalg.norm(cur)
        sims.append(float(np.clip(cur @ ref / denom, -1.0, 1.0)) if denom > 0 else 0.0)
    return float(np.mean(sims))


def subject_consistency(frames: np.ndarray, masks: RegionMasks) -> float:
    """Cosine consistency of the face region (where max(lip, exp) > 0)."""
    return _region_consistency(frames, np.maximum(masks.lip, masks.exp) > 0)


def background_consistency(frames: np.ndarray, masks: RegionMasks) -> float:
    """Cosine consistency of the complement region (max(lip, exp) == 0)."""
    return _region_consistency(frames, np.maximum(masks.lip, masks.exp) == 0)


def lip_intensity(frames: np.ndarray, masks: RegionMasks) -> np.ndarray:
    """Mask-weighted mean intensity of the lip region, per frame."""
    f = _frames_2d(frames)
    weight = masks.lip.sum()
    if weight == 0:
        raise ValueError("empty lip mask")
    return (f * masks.lip[None]).sum(axis=(1, 2)) / weight


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc ** 2).sum() * (yc ** 2).sum())
    if denom == 0:
        return 0.0
    return float((xc * yc).sum() / denom)


def sync_proxy(frames: np.ndarray, masks: RegionMasks, audio_energy: np.ndarray,
               max_lag: int = DEFAULT_MAX_LAG) -> SyncResult:
    """Lagged correlation between lip intensity and audio energy.

    For each lag d in [-max_lag, max_lag], correlates lip intensity
    l_{t+d} with energy e_t over the overlapping frames; returns the best
    correlation and |best lag|.  Ties prefer smaller |d|, then negative d.
    Constant intensity or energy yields (0.0, 0) flagged degenerate.
    """
    energy = np.asarray(audio_energy, dtype=np.float64)
    lip = lip_intensity(frames, masks)
    n = lip.shape[0]
    if energy.shape != (n,):
        raise ValueError(f"energy length {energy.shape} != frame count {n}")
    if n < 2 * max_lag + 2:
        raise ValueError(f"need >= {2 * max_lag + 2} frames for max_lag={max_lag}")
    if np.ptp(lip) == 0 or np.ptp(energy) == 0:
        return SyncResult(0.0, 0, degenerate=True)

    best_r = -np.inf
    best_d = 0
    for d in sorted(range(-max_lag, max_lag + 1), key=lambda d: (abs(d), d)):
        if d >= 0:
            r = _pearson(lip[d:], energy[: n - d])
        else:
            r = _pearson(lip[: n + d], energy[-d:])
        if r > best_r:
            best_r, best_d = r, d
    return SyncResult(float(best_r), abs(best_d), degenerate=False)


def evaluate_video(frames: np.ndarray, masks: RegionMasks, audio_energy: np.ndarray,
                   max_lag: int = DEFAULT_MAX_LAG) -> MetricsReport:
    """All proxies for one clip."""
    sync = sync_proxy(frames, masks, audio_energy, max_lag)
    return MetricsReport(
        smooth=smoothness(frames),
        subject=subject_consistency(frames, masks),
        background=background_consistency(frames, masks),
        sync_c=sync.sync_c,
        sync_d=sync.sync_d,
        degenerate_sync=sync.degenerate,
    )


def write_report_csv(path, rows: Iterable[Sequence], config_digest: str = "none") -> None:
    """Batch report: one row per video, with the config digest in a header comment."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_digest={config_digest}\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row)


def report_row(video_id: str, adapter: str, report: MetricsReport) -> List:
    return [video_id, adapter, f"{report.smooth:.6f}", f"{report.subject:.6f}",
            f"{report.background:.6f}", f"{report.sync_c:.6f}", report.sync_d]
