"""FLOP accounting and wall-clock comparison of the two adapter designs.

Counts are multiply-accumulates (MACs), not FLOPs-times-two; the same
convention is used everywhere.  The timing harness runs the full denoiser
forward pass single-threaded by default so medians are stable enough to
compare.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from .adapters import SUPPORTED_KERNELS, RegionMasks, make_default_masks
from .diffusion import ADAPTER_KINDS, DenoiserParams, _denoiser_forward, init_denoiser

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - declared dependency, belt and braces
    threadpool_limits = None

MIN_RUNS = 30
_ATTENTION_OPS = ("q_proj", "k_proj", "v_proj", "scores", "weighted_sum", "out_proj")


@dataclass(frozen=True)
class BenchDims:
    """Shape of one adapter evaluation (and of the timed denoiser)."""

    channels: int = 64
    attn_dim: int = 128
    audio_dim: int = 10
    audio_tokens: int = 16
    height: int = 32
    width: int = 32
    heads: int = 4
    kernel_size: int = 1
    blocks: int = 3

    def __post_init__(self):
        if min(self.channels, self.attn_dim, self.audio_dim, self.audio_tokens,
               self.height, self.width, self.heads, self.blocks) < 1:
            raise ValueError("all benchmark dimensions must be >= 1")
        if self.attn_dim % self.heads != 0:
            raise ValueError(f"attn_dim {self.attn_dim} not divisible by heads {self.heads}")
        if self.kernel_size not in SUPPORTED_KERNELS:
            raise ValueError(f"kernel_size must be one of {SUPPORTED_KERNELS}")


DESK_BENCH = BenchDims()
SMALL_BENCH = BenchDims(channels=8, attn_dim=16, audio_dim=16, audio_tokens=4,
                        height=4, width=4, heads=1, kernel_size=1, blocks=1)


@dataclass(frozen=True)
class FlopReport:
    """Per-op MAC counts for one adapter evaluation plus both designs' totals."""

    per_op: Dict[str, int]
    attention_macs: int
    zero_conv_macs: int
    semi_total: int
    fully_total: int
    ratio: float
    kind: Optional[str] = None

    def total(self, kind: str) -> int:
        if kind == "semi":
            return self.semi_total
        if kind == "fully":
            return self.fully_total
        raise ValueError(f"unknown adapter kind {kind!r}")

    def to_json(self) -> dict:
        out = {"per_op": dict(self.per_op), "attention_macs": self.attention_macs,
               "zero_conv_macs": self.zero_conv_macs, "semi_total": self.semi_total,
               "fully_total": self.fully_total, "ratio": self.ratio, "unit": "MAC"}
        if self.kind is not None:
            out["kind"] = self.kind
        return out


def count_flops(dims: BenchDims, kind: Optional[str] = None) -> FlopReport:
    """Analytic MAC counts for one adapter evaluation.

    Attention = Q/K/V projections + score matrix + weighted sum + output
    projection.  Semi-decoupled = one attention + three pointwise zero
    convolutions; fully decoupled = three attentions.
    """
    if kind is not None and kind not in ADAPTER_KINDS:
        raise ValueError(f"unknown adapter kind {kind!r}, expected one of {ADAPTER_KINDS}")
    s = dims.height * dims.width
    per_op = {
        "q_proj": s * dims.channels * dims.attn_dim,
        "k_proj": dims.audio_tokens * dims.audio_dim * dims.attn_dim,
        "v_proj": dims.audio_tokens * dims.audio_dim * dims.attn_dim,
        "scores": s * dims.audio_tokens * dims.attn_dim,
        "weighted_sum": s * dims.audio_tokens * dims.attn_dim,
        "out_proj": s * dims.attn_dim * dims.channels,
        "zero_convs": 3 * s * dims.channels * dims.channels * dims.kernel_size ** 2,
    }
    attention = sum(per_op[k] for k in _ATTENTION_OPS)
    zero_convs = per_op["zero_convs"]
    semi = attention + zero_convs
    fully = 3 * attention
    return FlopReport(per_op=per_op, attention_macs=attention, zero_conv_macs=zero_convs,
                      semi_total=semi, fully_total=fully, ratio=fully / semi, kind=kind)


@dataclass(frozen=True)
class TimingReport:
    """Robust per-forward wall-clock statistics, nanoseconds."""

    kind: str
    median_ns: float
    p10_ns: float
    p90_ns: float
    runs: int
    single_thread: bool
    config_digest: str = "none"

    def to_json(self) -> dict:
        return {"median_ns": self.median_ns, "p10_ns": self.p10_ns,
                "p90_ns": self.p90_ns, "runs": self.runs,
                "single_thread": self.single_thread,
                "config_digest": self.config_digest}


def _timer_granularity_ns() -> float:
    deltas = []
    for _ in range(50):
        a = time.perf_counter_ns()
        b = time.perf_counter_ns()
        while b == a:
            b = time.perf_counter_ns()
        deltas.append(b - a)
    return float(min(deltas))


def _bench_masks(height: int, width: int) -> RegionMasks:
    """Any partition works for timing; fall back to thirds on tiny grids."""
    if height >= 8 and width >= 8:
        return make_default_masks(height, width)
    lip = np.zeros((height, width))
    exp = np.zeros((height, width))
    lip[2 * height // 3:] = 1.0
    exp[height // 3: 2 * height // 3] = 1.0
    return RegionMasks(lip, exp, 1.0 - np.maximum(lip, exp))


def _build_bench_model(dims: BenchDims, kind: str, seed: int):
    p = init_denoiser(seed, channels=dims.channels, in_channels=1, blocks=dims.blocks,
                      attn_dim=dims.attn_dim, heads=dims.heads, audio_dim=dims.audio_dim,
                      time_dim=16, kernel_size=dims.kernel_size, adapter=kind)
    masks = _bench_masks(dims.height, dims.width)
    rng = np.random.default_rng(seed + 1)
    z = rng.standard_normal((1, 1, dims.height, dims.width))
    a = rng.standard_normal((dims.audio_tokens, dims.audio_dim))
    t = np.array([float(dims.blocks)])
    return p, masks, z, a, t


def time_inference(dims: BenchDims, kind: str, runs: int = 50, warmup: int = 10,
                   single_thread: bool = True, seed: int = 0,
                   config_digest: str = "none") -> TimingReport:
    """Median/p10/p90 time of one full denoiser forward at ``dims``.

    Runs single-threaded BLAS by default; timings taken with more threads
    are labeled indicative-only via ``single_thread=False`` in the report.
    Raises if the per-call time is too close to timer granularity.
    """
    if runs < MIN_RUNS:
        raise ValueError(f"need runs >= {MIN_RUNS} for stable percentiles, got {runs}")
    p, masks, z, a, t = _build_bench_model(dims, kind, seed)

    def measure() -> np.ndarray:
        for _ in range(warmup):
            _denoiser_forward(z, t, a, masks, p)
        out = np.empty(runs)
        for i in range(runs):
            t0 = time.perf_counter_ns()
            _denoiser_forward(z, t, a, masks, p)
            out[i] = time.perf_counter_ns() - t0
        return out

    if single_thread and threadpool_limits is not None:
        with threadpool_limits(limits=1):
            times = measure()
    else:
        single_thread = False if threadpool_limits is None else single_thread
        times = measure()

    median = float(np.median(times))
    granularity = _timer_granularity_ns()
    if median < 100.0 * granularity:
        raise RuntimeError(
            f"per-call time {median:.0f} ns is within 100x of timer granularity "
            f"({granularity:.0f} ns); use a larger benchmark config")
    return TimingReport(kind=kind, median_ns=median,
                        p10_ns=float(np.percentile(times, 10)),
                        p90_ns=float(np.percentile(times, 90)),
                        runs=runs, single_thread=single_thread,
                        config_digest=config_digest)


def compare(kind_a: str, kind_b: str, dims: BenchDims, runs: int = 50, warmup: int = 10,
            single_thread: bool = True, seed: int = 0,
            config_digest: str = "none") -> dict:
    """Time both kinds and report improvement = (median_b - median_a) / median_b.

    Positive improvement means ``kind_a`` is faster.  The analytic MAC
    ratio is included alongside so the wall-clock number has a reference.
    """
    flops = count_flops(dims)
    timing_a = time_inference(dims, kind_a, runs, warmup, single_thread, seed, config_digest)
    timing_b = time_inference(dims, kind_b, runs, warmup, single_thread, seed, config_digest)
    improvement = (timing_b.median_ns - timing_a.median_ns) / timing_b.median_ns
    return {
        "config": asdict(dims),
        "config_digest": config_digest,
        "results": [
            {"kind": kind_a, "flops": count_flops(dims, kind_a).to_json(),
             "timing": timing_a.to_json()},
            {"kind": kind_b, "flops": count_flops(dims, kind_b).to_json(),
             "timing": timing_b.to_json()},
        ],
        "comparison": {
            "faster_kind": kind_a if improvement > 0 else kind_b,
            "time_improvement": improvement,
            "flop_ratio_fully_over_semi": flops.ratio,
            "flop_totals": {"semi": flops.semi_total, "fully": flops.fully_total},
        },
    }


def format_flop_table(report: FlopReport) -> str:
    """Human-readable MAC table."""
    lines = ["operation            MACs", "-" * 33]
    for name, count in report.per_op.items():
        lines.append(f"{name:<20s} {count:>12d}")
    lines.append("-" * 33)
    lines.append(f"{'attention (x1)':<20s} {report.attention_macs:>12d}")
    lines.append(f"{'semi total':<20s} {report.semi_total:>12d}")
    lines.append(f"{'fully total':<20s} {report.fully_total:>12d}")
    lines.append(f"{'ratio fully/semi':<20s} {report.ratio:>12.4f}")
    return "\n".join(lines)


def format_comparison_table(result: dict) -> str:
    """Human-readable summary of a :func:`compare` result."""
    lines = [f"{'kind':<8s} {'median ms':>12s} {'p10 ms':>10s} {'p90 ms':>10s} {'MACs':>14s}"]
    for entry in result["results"]:
        t = entry["timing"]
        macs = entry["flops"]["semi_total" if entry["kind"] == "semi" else "fully_total"]
        lines.append(f"{entry['kind']:<8s} {t['median_ns'] / 1e6:>12.3f} "
                     f"{t['p10_ns'] / 1e6:>10.3f} {t['p90_ns'] / 1e6:>10.3f} {macs:>14d}")
    comp = result["comparison"]
    lines.append(f"time improvement: {100.0 * comp['time_improvement']:.1f}% "
                 f"(analytic MAC ratio {comp['flop_ratio_fully_over_semi']:.3f})")
    return "\n".join(lines)
