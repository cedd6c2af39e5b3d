"""Miniature noise-prediction diffusion around a small conv denoiser.

The denoiser is a stack of pointwise-conv blocks with tanh nonlinearity,
a sinusoidal timestep embedding projected per block, and one pluggable
audio adapter per block applied residually:

    h <- h + conv2(tanh(conv1(h))) + time_proj(sin_embed(t))
    h <- h + adapter(h, audio, masks)

Residual insertion means zero-initialized adapters are a no-op: at
construction the denoiser output is bitwise independent of the audio.
All math is float64 and every gradient is hand-derived; finite-difference
tests pin the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .adapters import (
    AdapterParams,
    Conv2dParams,
    FullyDecoupledParams,
    RegionMasks,
    SemiDecoupledParams,
    _adapter_backward,
    _adapter_forward,
    _conv2d_backward,
    _conv2d_forward,
    adapter_kind,
    conv_init,
    init_fully_decoupled,
    init_semi_decoupled,
)
from .tensorfile import load_tensors, save_tensors

ADAPTER_KINDS = ("semi", "fully")
DEFAULT_TIMESTEPS = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_SAMPLE_STEPS = 40


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule with cumulative alpha products."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def timesteps(self) -> int:
        return self.beta.shape[0]


def make_schedule(timesteps: int = DEFAULT_TIMESTEPS,
                  beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Betas linear from beta_start to beta_end; alpha_bar[t] = prod(1 - beta[:t+1])."""
    if timesteps < 2:
        raise ValueError(f"timesteps must be >= 2, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, timesteps)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)


def add_noise(z0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    if not (0 <= t < schedule.timesteps):
        raise ValueError(f"timestep {t} out of range [0, {schedule.timesteps})")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos timestep embedding: t [B] -> [B, dim]."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass
class BlockParams:
    """One denoiser block: conv pair, timestep projection, audio adapter."""

    conv1: Conv2dParams
    conv2: Conv2dParams
    time_weight: np.ndarray       # [time_dim, C]
    time_bias: np.ndarray         # [C]
    adapter: AdapterParams

    def to_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = self.conv1.to_dict(prefix + "conv1.")
        out.update(self.conv2.to_dict(prefix + "conv2."))
        out[prefix + "time_weight"] = self.time_weight
        out[prefix + "time_bias"] = self.time_bias
        out.update(self.adapter.to_dict(prefix + "adapter."))
        return out


@dataclass
class DenoiserParams:
    """Full denoiser parameter set; `params_dict` flattens to name -> array."""

    in_proj: Conv2dParams         # in_channels -> C
    out_proj: Conv2dParams        # C -> in_channels
    blocks: List[BlockParams]
    time_dim: int

    @property
    def adapter_kind(self) -> str:
        return adapter_kind(self.blocks[0].adapter)

    @property
    def channels(self) -> int:
        return self.in_proj.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.in_proj.weight.shape[1]

    @property
    def audio_dim(self) -> int:
        ad = self.blocks[0].adapter
        if isinstance(ad, SemiDecoupledParams):
            return ad.attn.audio_dim
        return ad.attn_lip.audio_dim

    def params_dict(self) -> Dict[str, np.ndarray]:
        out = self.in_proj.to_dict("in_proj.")
        for i, blk in enumerate(self.blocks):
            out.update(blk.to_dict(f"blocks.{i}."))
        out.update(self.out_proj.to_dict("out_proj."))
        return out


def init_denoiser(seed: int, *, channels: int = 16, in_channels: int = 1,
                  blocks: int = 3, attn_dim: int = 32, heads: int = 4,
                  audio_dim: int = 10, time_dim: int = 16, kernel_size: int = 1,
                  adapter: str = "semi") -> DenoiserParams:
    """Seeded denoiser with the requested adapter kind in every block."""
    if adapter not in ADAPTER_KINDS:
        raise ValueError(f"unknown adapter kind {adapter!r}, expected one of {ADAPTER_KINDS}")
    if blocks < 1:
        raise ValueError("need at least one block")
    rng = np.random.default_rng(seed)
    block_list = []
    for _ in range(blocks):
        if adapter == "semi":
            ad: AdapterParams = init_semi_decoupled(rng, channels, attn_dim, audio_dim,
                                                    heads, kernel_size)
        else:
            ad = init_fully_decoupled(rng, channels, attn_dim, audio_dim, heads)
        bound = 1.0 / np.sqrt(time_dim)
        block_list.append(BlockParams(
            conv1=conv_init(rng, channels, channels),
            conv2=conv_init(rng, channels, channels),
            time_weight=rng.uniform(-bound, bound, size=(time_dim, channels)),
            time_bias=rng.uniform(-bound, bound, size=channels),
            adapter=ad,
        ))
    return DenoiserParams(
        in_proj=conv_init(rng, in_channels, channels),
        out_proj=conv_init(rng, channels, in_channels),
        blocks=block_list,
        time_dim=time_dim,
    )


def _as_batched_tokens(a: np.ndarray, batch: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return np.broadcast_to(a, (batch,) + a.shape)
    if a.ndim == 3 and a.shape[0] == batch:
        return a
    raise ValueError(f"audio tokens must be [T, D] or [B, T, D], got {a.shape}")


def _denoiser_forward(x: np.ndarray, t: np.ndarray, a: np.ndarray, m: RegionMasks,
                      p: DenoiserParams, need_cache: bool = False):
    """Batched forward: x [B, in_C, H, W], t [B] -> prediction [B, in_C, H, W]."""
    b = x.shape[0]
    a = _as_batched_tokens(a, b)
    temb = sinusoidal_embedding(t, p.time_dim)          # [B, E]
    h = _conv2d_forward(x, p.in_proj)
    cache: Dict[str, object] = {"x": x, "temb": temb, "blocks": []}
    for blk in p.blocks:
        u = _conv2d_forward(h, blk.conv1)
        v = np.tanh(u)
        r = _conv2d_forward(v, blk.conv2)
        tp = temb @ blk.time_weight + blk.time_bias      # [B, C]
        h1 = h + r + tp[:, :, None, None]
        ad_out, ad_cache = _adapter_forward(h1, a, m, blk.adapter, need_cache=need_cache)
        h2 = h1 + ad_out
        if need_cache:
            cache["blocks"].append({"h_in": h, "v": v, "h1": h1, "adapter": ad_cache})
        h = h2
    out = _conv2d_forward(h, p.out_proj)
    if need_cache:
        cache["h_final"] = h
        return out, cache
    return out, None


def _denoiser_backward(cache: dict, d_out: np.ndarray, p: DenoiserParams):
    """Gradients of sum(d_out * forward) w.r.t. every parameter and the input."""
    grads: Dict[str, np.ndarray] = {}
    d_h, d_w, d_b = _conv2d_backward(cache["h_final"], p.out_proj, d_out)
    grads["out_proj.weight"] = d_w
    grads["out_proj.bias"] = d_b

    temb = cache["temb"]
    for i in reversed(range(len(p.blocks))):
        blk = p.blocks[i]
        blk_cache = cache["blocks"][i]
        # h2 = h1 + adapter(h1): gradient flows through both paths
        d_h1_adapter, _, ad_grads = _adapter_backward(blk_cache["adapter"], d_h, blk.adapter)
        for k, v in ad_grads.items():
            grads[f"blocks.{i}.adapter.{k}"] = v
        d_h1 = d_h + d_h1_adapter
        # h1 = h_in + conv2(tanh(conv1(h_in))) + time_proj
        d_tp = d_h1.sum(axis=(2, 3))                     # [B, C]
        grads[f"blocks.{i}.time_weight"] = temb.T @ d_tp
        grads[f"blocks.{i}.time_bias"] = d_tp.sum(axis=0)
        v = blk_cache["v"]
        d_v, d_w2, d_b2 = _conv2d_backward(v, blk.conv2, d_h1)
        grads[f"blocks.{i}.conv2.weight"] = d_w2
        grads[f"blocks.{i}.conv2.bias"] = d_b2
        d_u = d_v * (1.0 - v * v)
        d_hin, d_w1, d_b1 = _conv2d_backward(blk_cache["h_in"], blk.conv1, d_u)
        grads[f"blocks.{i}.conv1.weight"] = d_w1
        grads[f"blocks.{i}.conv1.bias"] = d_b1
        d_h = d_h1 + d_hin

    d_x, d_w, d_b = _conv2d_backward(cache["x"], p.in_proj, d_h)
    grads["in_proj.weight"] = d_w
    grads["in_proj.bias"] = d_b
    return grads, d_x


def denoiser_forward(z_t: np.ndarray, t: int, a: np.ndarray, m: RegionMasks,
                     p: DenoiserParams) -> np.ndarray:
    """Predict the noise component of one latent [in_C, H, W]."""
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.ndim != 3:
        raise ValueError(f"latent must be [C, H, W], got shape {z_t.shape}")
    out, _ = _denoiser_forward(z_t[None], np.array([t], dtype=np.float64),
                               np.asarray(a, dtype=np.float64), m, p)
    return out[0]


def denoiser_backward(z_t: np.ndarray, t: int, a: np.ndarray, m: RegionMasks,
                      p: DenoiserParams, upstream: np.ndarray):
    """Gradients of ``sum(upstream * denoiser_forward(...))``.

    Returns ``(param_grads, d_z)``; ``param_grads`` is keyed like
    ``p.params_dict()``.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != z_t.shape:
        raise ValueError(f"upstream shape {upstream.shape} != latent shape {z_t.shape}")
    _, cache = _denoiser_forward(z_t[None], np.array([t], dtype=np.float64),
                                 np.asarray(a, dtype=np.float64), m, p, need_cache=True)
    grads, d_x = _denoiser_backward(cache, upstream[None], p)
    return grads, d_x[0]


# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------

def conditioning_dim(audio_dim: int) -> int:
    return 2 * audio_dim + 1


def frame_conditioning(tokens: np.ndarray, frame_index: int) -> np.ndarray:
    """Per-frame conditioning over the full token context.

    Row j is ``[token_j, token_t, 1 if j == t else 0]`` for current frame t:
    all context tokens stay visible to the attention while the current
    frame's token is broadcast and flagged, which is what makes per-frame
    generation identifiable (the attention itself has no positional term).
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [T, D], got {tokens.shape}")
    n = tokens.shape[0]
    if not (0 <= frame_index < n):
        raise ValueError(f"frame_index {frame_index} out of range [0, {n})")
    current = np.broadcast_to(tokens[frame_index], tokens.shape)
    flag = np.zeros((n, 1))
    flag[frame_index, 0] = 1.0
    return np.concatenate([tokens, current, flag], axis=1)


def clip_conditioning(tokens: np.ndarray) -> np.ndarray:
    """Stacked per-frame conditioning for every frame of a clip: [T, T, 2D+1]."""
    tokens = np.asarray(tokens, dtype=np.float64)
    return np.stack([frame_conditioning(tokens, i) for i in range(tokens.shape[0])])


# ---------------------------------------------------------------------------
# optimizer and training
# ---------------------------------------------------------------------------

@dataclass
class TrainCfg:
    """Optimizer and loop settings; everything is seeded and deterministic."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 1:
            raise ValueError("lr, batch_size and steps must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the parameter dict."""

    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls(step=0,
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState, cfg: TrainCfg) -> None:
    """One in-place Adam update over the shared parameter arrays."""
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for key, p in params.items():
        g = grads[key]
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


@dataclass
class TrainData:
    """Flattened training pairs: one latent frame + its conditioning tokens."""

    latents: np.ndarray         # [N, in_C, H, W]
    conditioning: np.ndarray    # [N, T, D_cond]
    masks: RegionMasks

    def __post_init__(self):
        if self.latents.shape[0] != self.conditioning.shape[0]:
            raise ValueError("latents and conditioning must pair 1:1")
        if self.latents.shape[0] < 1:
            raise ValueError("empty training set")

    def __len__(self) -> int:
        return self.latents.shape[0]


def train_step(batch: Tuple[np.ndarray, np.ndarray, RegionMasks], p: DenoiserParams,
               schedule: NoiseSchedule, params: Dict[str, np.ndarray],
               opt: AdamState, cfg: TrainCfg, rng: np.random.Generator) -> float:
    """One noise-prediction step: sample t and eps, MSE on eps, Adam update.

    ``batch`` is (latents [B, C, H, W], conditioning [B, T, D], masks).
    Returns the scalar loss.  Aborts on non-finite loss.
    """
    z0, cond, masks = batch
    b = z0.shape[0]
    if b < 1:
        raise ValueError("empty batch")
    t = rng.integers(0, schedule.timesteps, size=b)
    eps = rng.standard_normal(z0.shape)
    ab = schedule.alpha_bar[t][:, None, None, None]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps

    pred, cache = _denoiser_forward(z_t, t.astype(np.float64), cond, masks, p,
                                    need_cache=True)
    resid = pred - eps
    loss = float(np.mean(resid ** 2))
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss at opt step {opt.step}: check learning rate and data scale")
    d_pred = (2.0 / resid.size) * resid
    grads, _ = _denoiser_backward(cache, d_pred, p)
    adam_step(params, grads, opt, cfg)
    return loss


def train_model(data: TrainData, p: DenoiserParams, schedule: NoiseSchedule,
                cfg: TrainCfg, log_fn=None) -> List[float]:
    """Run ``cfg.steps`` training steps; returns the per-step loss trajectory.

    ``log_fn(step, loss)`` is invoked every ``cfg.log_every`` steps.
    Two runs with equal seeds produce identical trajectories.
    """
    rng = np.random.default_rng(cfg.seed)
    params = p.params_dict()
    opt = AdamState.for_params(params)
    losses: List[float] = []
    n = len(data)
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        batch = (data.latents[idx], data.conditioning[idx], data.masks)
        loss = train_step(batch, p, schedule, params, opt, cfg, rng)
        losses.append(loss)
        if log_fn is not None and (step % cfg.log_every == 0 or step == cfg.steps):
            log_fn(step, loss)
    return losses


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample(a: np.ndarray, m: RegionMasks, p: DenoiserParams, schedule: NoiseSchedule,
           steps: int = DEFAULT_SAMPLE_STEPS, seed: int = 0) -> np.ndarray:
    """Deterministic DDIM sampling, one latent frame per audio token.

    ``a`` is the raw token matrix [T, D_a]; every frame is conditioned on
    the full context via :func:`frame_conditioning`.  Returns frames
    [T, in_C, H, W] clipped to [0, 1].  Fixed seeds give bit-identical
    output.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"audio tokens must be [T, D_a], got {a.shape}")
    if not (1 <= steps <= schedule.timesteps):
        raise ValueError(f"steps must lie in [1, {schedule.timesteps}], got {steps}")
    n_frames = a.shape[0]
    h, w = m.shape
    cond = clip_conditioning(a) if p.audio_dim == conditioning_dim(a.shape[1]) else \
        np.broadcast_to(a, (n_frames,) + a.shape)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_frames, p.in_channels, h, w))

    ts = np.unique(np.linspace(0, schedule.timesteps - 1, steps).round().astype(int))[::-1]
    for i, t in enumerate(ts):
        t_vec = np.full(n_frames, float(t))
        eps_hat, _ = _denoiser_forward(z, t_vec, cond, m, p)
        ab_t = schedule.alpha_bar[t]
        x0 = (z - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        if i + 1 < len(ts):
            ab_next = schedule.alpha_bar[ts[i + 1]]
            z = np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * eps_hat
        else:
            z = x0
    return np.clip(z, 0.0, 1.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(base_path, p: DenoiserParams, schedule: NoiseSchedule,
                    meta: Optional[Dict[str, str]] = None) -> Tuple[Path, Path]:
    """Write ``<base>.sdtf`` (parameters + schedule) and ``<base>.manifest``."""
    base = Path(base_path)
    tensor_path = base.with_suffix(".sdtf")
    manifest_path = base.with_suffix(".manifest")
    tensors = dict(p.params_dict())
    tensors["schedule.beta"] = schedule.beta
    save_tensors(tensor_path, tensors)

    c = p.channels
    ad = p.blocks[0].adapter
    heads = (ad.attn if isinstance(ad, SemiDecoupledParams) else ad.attn_lip).heads
    attn_dim = (ad.attn if isinstance(ad, SemiDecoupledParams) else ad.attn_lip).model_dim
    kernel = ad.zc_lip.kernel_size if isinstance(ad, SemiDecoupledParams) else 1
    lines = {
        "adapter": p.adapter_kind,
        "channels": str(c),
        "in_channels": str(p.in_channels),
        "blocks": str(len(p.blocks)),
        "attn_dim": str(attn_dim),
        "heads": str(heads),
        "audio_dim": str(p.audio_dim),
        "time_dim": str(p.time_dim),
        "kernel_size": str(kernel),
        "timesteps": str(schedule.timesteps),
    }
    lines.update(meta or {})
    manifest_path.write_text(
        "".join(f"{k} = {v}\n" for k, v in lines.items()), encoding="utf-8")
    return tensor_path, manifest_path


def read_manifest(path) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed manifest line: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_checkpoint(base_path) -> Tuple[DenoiserParams, NoiseSchedule, Dict[str, str]]:
    """Rebuild the denoiser and schedule written by :func:`save_checkpoint`."""
    base = Path(base_path)
    tensor_path = base.with_suffix(".sdtf")
    manifest_path = base.with_suffix(".manifest")
    if not tensor_path.exists() or not manifest_path.exists():
        raise FileNotFoundError(f"missing checkpoint files for base {base}")
    meta = read_manifest(manifest_path)
    tensors = load_tensors(tensor_path)
    p = init_denoiser(
        0,
        channels=int(meta["channels"]),
        in_channels=int(meta["in_channels"]),
        blocks=int(meta["blocks"]),
        attn_dim=int(meta["attn_dim"]),
        heads=int(meta["heads"]),
        audio_dim=int(meta["audio_dim"]),
        time_dim=int(meta["time_dim"]),
        kernel_size=int(meta["kernel_size"]),
        adapter=meta["adapter"],
    )
    params = p.params_dict()
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise ValueError(f"checkpoint missing tensors: {missing[:4]}...")
    for key, arr in params.items():
        stored = tensors[key]
        if stored.shape != arr.shape:
            raise ValueError(f"checkpoint tensor {key} has shape {stored.shape}, "
                             f"expected {arr.shape}")
        arr[...] = stored
    beta = tensors["schedule.beta"]
    schedule = NoiseSchedule(beta=beta, alpha_bar=np.cumprod(1.0 - beta))
    if schedule.timesteps != int(meta["timesteps"]):
        raise ValueError("manifest timesteps disagree with stored schedule")
    return p, schedule, meta
