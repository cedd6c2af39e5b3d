"""Acceptance suite: one test per release criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines and timings.  Criterion 6 trains both adapter kinds end to end and
dominates the runtime (budget: 20 minutes on a laptop core).
"""

import ast
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import assert_grads_close, fd_gradient
from test_attention import oracle_attention, small_weights

from talkdiff.adapters import (
    RegionMasks,
    adapter_backward,
    fully_decoupled_forward,
    init_fully_decoupled,
    init_semi_decoupled,
    make_default_masks,
    semi_decoupled_forward,
)
from talkdiff.attention import cross_attention, cross_attention_backward, init_attn_weights
from talkdiff.bench import SMALL_BENCH, BenchDims, compare, count_flops
from talkdiff.diffusion import (
    TrainCfg,
    TrainData,
    clip_conditioning,
    conditioning_dim,
    denoiser_backward,
    denoiser_forward,
    init_denoiser,
    make_schedule,
    sample,
    train_model,
)
from talkdiff.faces import make_dataset
from talkdiff.metrics import MetricsReport, smoothness, subject_consistency, sync_proxy

# --- frozen criterion constants -------------------------------------------
# Calibrated once via an oracle run of this exact protocol (seeds included);
# see the loss/sync numbers recorded in the repository test log.
LOSS_DROP_REQUIRED = 0.50
SYNC_SEMI_REQUIRED = 0.50
SYNC_GAP_ALLOWED = 0.05

E2E_TRAIN_CLIPS = 200
E2E_HELD_OUT = 20
E2E_STEPS = 2000
E2E_BATCH = 8
E2E_LR = 1e-3
MA_WINDOW = 100


def report(num, desc, t0):
    print(f"ACCEPTANCE {num} PASS  {desc}  [{time.time() - t0:.2f}s]")


def test_criterion_1_zero_init_silence():
    """Fresh semi-decoupled adapters are silent and audio cannot leak."""
    t0 = time.time()
    rng = np.random.default_rng(0)
    masks = make_default_masks(32, 32)
    adapter = init_semi_decoupled(rng, 16, 32, conditioning_dim(10), heads=4)
    for _ in range(3):
        z = rng.standard_normal((16, 32, 32))
        a = rng.standard_normal((16, conditioning_dim(10)))
        out = semi_decoupled_forward(z, a, masks, adapter)
        assert np.all(out == 0.0), "zero-init adapter must return the exact zero map"

    p = init_denoiser(1, channels=16, blocks=3, attn_dim=32, heads=4,
                      audio_dim=conditioning_dim(10), adapter="semi")
    z = rng.standard_normal((1, 32, 32))
    a1 = rng.standard_normal((16, conditioning_dim(10)))
    a2 = rng.standard_normal((16, conditioning_dim(10)))
    out1 = denoiser_forward(z, 11, a1, masks, p)
    out2 = denoiser_forward(z, 11, a2, masks, p)
    assert np.array_equal(out1, out2), "denoiser output must be bitwise audio-independent"
    elapsed = time.time() - t0
    assert elapsed < 1.0, f"criterion runtime budget exceeded: {elapsed:.2f}s"
    report(1, "zero-init silence is exact and audio-independent", t0)


def test_criterion_2_gradient_oracle():
    """Analytic gradients match central differences on every parameter."""
    t0 = time.time()
    rng = np.random.default_rng(7)

    # cross-attention, dims <= 4
    w = init_attn_weights(rng, 2, 4, 3, heads=2)
    z = rng.standard_normal((2, 2, 2))
    a = rng.standard_normal((3, 3))
    up = rng.standard_normal(z.shape)
    dz, da, dw = cross_attention_backward(z, a, w, up)

    def attn_loss():
        return float(np.sum(up * cross_attention(z, a, w)))

    assert_grads_close(dz, fd_gradient(attn_loss, z), rtol=1e-4, label="attn d_z")
    assert_grads_close(da, fd_gradient(attn_loss, a), rtol=1e-4, label="attn d_a")
    for name, arr in w.to_dict().items():
        assert_grads_close(dw[name], fd_gradient(attn_loss, arr), rtol=1e-4,
                           label=f"attn d_{name}")

    # both adapters, dims <= 4
    masks = RegionMasks(*(rng.uniform(0, 1, (4, 4)) for _ in range(3)))
    z = rng.standard_normal((2, 4, 4))
    a = rng.standard_normal((2, 3))
    up = rng.standard_normal(z.shape)
    semi = init_semi_decoupled(rng, 2, 2, 3, heads=1)
    for zc in semi.zero_convs:
        zc.weight[...] = 0.3 * rng.standard_normal(zc.weight.shape)
        zc.bias[...] = 0.1 * rng.standard_normal(zc.bias.shape)
    fully = init_fully_decoupled(rng, 2, 2, 3, heads=1)
    for params, forward, label in ((semi, semi_decoupled_forward, "semi"),
                                   (fully, fully_decoupled_forward, "fully")):
        grads, dz, da = adapter_backward(z, a, masks, params, up)

        def ad_loss(fwd=forward, p=params):
            return float(np.sum(up * fwd(z, a, masks, p)))

        assert_grads_close(dz, fd_gradient(ad_loss, z), rtol=1e-4, label=f"{label} d_z")
        assert_grads_close(da, fd_gradient(ad_loss, a), rtol=1e-4, label=f"{label} d_a")
        for name, arr in params.to_dict().items():
            assert_grads_close(grads[name], fd_gradient(ad_loss, arr), rtol=1e-4,
                               label=f"{label} d_{name}")

    # tiny full denoiser at the looser tolerance
    p = init_denoiser(3, channels=2, blocks=2, attn_dim=2, heads=1, audio_dim=3,
                      time_dim=4, adapter="semi")
    for blk in p.blocks:
        for zc in blk.adapter.zero_convs:
            zc.weight[...] = 0.3 * rng.standard_normal(zc.weight.shape)
            zc.bias[...] = 0.1 * rng.standard_normal(zc.bias.shape)
    masks = make_default_masks(8, 8)
    z = rng.standard_normal((1, 8, 8))
    a = rng.standard_normal((4, 3))
    up = rng.standard_normal(z.shape)
    grads, dz = denoiser_backward(z, 5, a, masks, p, up)

    def dn_loss():
        return float(np.sum(up * denoiser_forward(z, 5, a, masks, p)))

    assert_grads_close(dz, fd_gradient(dn_loss, z), rtol=1e-3, label="denoiser d_z")
    for name, arr in p.params_dict().items():
        assert_grads_close(grads[name], fd_gradient(dn_loss, arr), rtol=1e-3,
                           label=f"denoiser d_{name}")
    elapsed = time.time() - t0
    assert elapsed < 30.0, f"criterion runtime budget exceeded: {elapsed:.2f}s"
    report(2, "all gradients match finite differences", t0)


def test_criterion_3_brute_force_attention_equivalence():
    """The canonical tiny instance matches the loop oracle to 1e-12."""
    t0 = time.time()
    w = small_weights()          # C=2, D=2, D_a=2, heads=1, integer-ish weights
    z = np.array([1.0, -2.0]).reshape(2, 1, 1)
    a = np.array([[0.5, 1.0], [-1.0, 0.25]])
    ours = cross_attention(z, a, w)
    expected = oracle_attention(z, a, w)
    assert np.max(np.abs(ours - expected)) <= 1e-12
    report(3, "cross-attention equals the brute-force formula evaluation", t0)


def test_criterion_4_flop_accounting():
    """Frozen MAC walkthrough plus the exact 3x attention identity."""
    t0 = time.time()
    r = count_flops(SMALL_BENCH)
    assert r.attention_macs == 8192
    assert r.fully_total == 24576
    assert r.semi_total == 11264
    assert abs(r.ratio - 2.1818) < 1e-3

    rng = np.random.default_rng(4)
    for _ in range(20):
        dims = BenchDims(
            channels=int(rng.integers(1, 48)),
            attn_dim=2 * int(rng.integers(1, 32)),
            audio_dim=int(rng.integers(1, 32)),
            audio_tokens=int(rng.integers(1, 32)),
            height=int(rng.integers(1, 32)),
            width=int(rng.integers(1, 32)),
            heads=2,
            kernel_size=int(rng.choice([1, 3])),
        )
        rep = count_flops(dims)
        assert rep.fully_total == 3 * rep.attention_macs     # exact integers
    elapsed = time.time() - t0
    assert elapsed < 1.0, f"criterion runtime budget exceeded: {elapsed:.2f}s"
    report(4, "MAC accounting reproduces the derived counts; attention ratio is 3", t0)


def test_criterion_5_latency_direction():
    """Semi-decoupled forward is measurably faster at the desk-bench shape."""
    t0 = time.time()
    result = compare("semi", "fully", BenchDims(), runs=50, warmup=10,
                     single_thread=True, seed=0)
    semi_med = result["results"][0]["timing"]["median_ns"]
    fully_med = result["results"][1]["timing"]["median_ns"]
    improvement = result["comparison"]["time_improvement"]
    assert semi_med < fully_med, (
        f"semi median {semi_med:.0f}ns not below fully {fully_med:.0f}ns")
    assert improvement >= 0.10, f"median reduction {improvement:.1%} below 10%"
    elapsed = time.time() - t0
    assert elapsed < 120.0, f"criterion runtime budget exceeded: {elapsed:.2f}s"
    report(5, f"semi is {improvement:.1%} faster at the desk-bench shape", t0)


@pytest.fixture(scope="module")
def e2e_results():
    """Train both adapter kinds once; shared by the criterion-6 tests."""
    t_start = time.time()
    train_clips = make_dataset(E2E_TRAIN_CLIPS, seed=0)
    held_out = make_dataset(E2E_HELD_OUT, seed=E2E_TRAIN_CLIPS)
    masks = make_default_masks(32, 32)
    data = TrainData(
        latents=np.concatenate([s.frames for s in train_clips]),
        conditioning=np.concatenate([clip_conditioning(s.audio.tokens)
                                     for s in train_clips]),
        masks=masks,
    )
    out = {}
    for kind in ("semi", "fully"):
        p = init_denoiser(0, channels=16, blocks=3, attn_dim=32, heads=4,
                          audio_dim=conditioning_dim(10), adapter=kind)
        schedule = make_schedule()
        cfg = TrainCfg(steps=E2E_STEPS, batch_size=E2E_BATCH, lr=E2E_LR, seed=0)
        losses = train_model(data, p, schedule, cfg)
        syncs = []
        for i, clip in enumerate(held_out):
            frames = sample(clip.audio.tokens, masks, p, schedule, steps=40,
                            seed=1000 + i)
            syncs.append(sync_proxy(frames, masks, clip.lip_energy).sync_c)
        out[kind] = {
            "init_ma": float(np.mean(losses[:MA_WINDOW])),
            "final_ma": float(np.mean(losses[-MA_WINDOW:])),
            "sync_mean": float(np.mean(syncs)),
            "sync_values": syncs,
        }
    out["elapsed"] = time.time() - t_start
    return out


def test_criterion_6a_training_loss_drops(e2e_results):
    """Loss moving average falls by at least half for both adapter kinds."""
    t0 = time.time()
    for kind in ("semi", "fully"):
        r = e2e_results[kind]
        drop = 1.0 - r["final_ma"] / r["init_ma"]
        assert drop >= LOSS_DROP_REQUIRED, (
            f"{kind}: loss MA dropped only {drop:.1%} "
            f"({r['init_ma']:.4f} -> {r['final_ma']:.4f})")
    report(6, "training halves the loss moving average for both kinds "
              f"(total e2e {e2e_results['elapsed']:.0f}s)", t0)


def test_criterion_6b_lip_sync_quality(e2e_results):
    """Held-out sync confidence: semi clears the bar and tracks the baseline."""
    t0 = time.time()
    semi = e2e_results["semi"]["sync_mean"]
    fully = e2e_results["fully"]["sync_mean"]
    assert semi >= SYNC_SEMI_REQUIRED, (
        f"semi mean sync_c {semi:.3f} below the calibrated bar {SYNC_SEMI_REQUIRED}")
    assert semi >= fully - SYNC_GAP_ALLOWED, (
        f"semi sync_c {semi:.3f} trails fully {fully:.3f} by more than "
        f"{SYNC_GAP_ALLOWED}")
    assert e2e_results["elapsed"] < 1200.0, (
        f"e2e runtime {e2e_results['elapsed']:.0f}s exceeds the 20 min budget")
    report(6, f"held-out sync_c: semi {semi:.3f} vs fully {fully:.3f}", t0)


def test_criterion_7_metric_sanity():
    """Exact fixture values for the pixel metrics."""
    t0 = time.time()
    masks = make_default_masks(32, 32)
    constant = np.full((16, 1, 32, 32), 0.4)
    assert smoothness(constant) == 1.0
    assert subject_consistency(constant, masks) == 1.0

    rng = np.random.default_rng(2)
    energy = rng.uniform(0.1, 0.9, 16)
    shifted = np.zeros((16, 32, 32))
    lip_vals = np.roll(energy, 1)
    lip_vals[0] = energy[0]
    shifted[:, masks.lip > 0] = lip_vals[:, None]
    res = sync_proxy(shifted, masks, energy)
    assert res.sync_c == pytest.approx(1.0, abs=1e-9)
    assert res.sync_d == 1

    alternating = np.zeros((6, 1, 8, 8))
    alternating[1::2] = 1.0
    assert smoothness(alternating) == 0.0
    elapsed = time.time() - t0
    assert elapsed < 1.0, f"criterion runtime budget exceeded: {elapsed:.2f}s"
    report(7, "metric fixtures hit their exact values", t0)


def test_criterion_8_scores_are_self_contained():
    """The metric module scores pixels only: no learned models, no external
    reference values, nothing downloaded.  Its numbers are comparable across
    adapter kinds inside this repository and nowhere else."""
    t0 = time.time()
    src_path = Path(__file__).resolve().parent.parent / "src" / "talkdiff" / "metrics.py"
    tree = ast.parse(src_path.read_text(encoding="utf-8"))
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            imported.update(alias.name.split(".")[0] for alias in node.names)
        elif isinstance(node, ast.ImportFrom) and node.level == 0:
            imported.add((node.module or "").split(".")[0])
    allowed = {"csv", "dataclasses", "pathlib", "typing", "numpy", "talkdiff", ""}
    assert imported <= allowed, f"unexpected metric dependencies: {imported - allowed}"

    # the report schema is exactly the five self-contained proxies
    fields = {f for f in MetricsReport.__dataclass_fields__ if f != "degenerate_sync"}
    assert fields == {"smooth", "subject", "background", "sync_c", "sync_d"}
    report(8, "metrics are pixel-level proxies with no external references", t0)
