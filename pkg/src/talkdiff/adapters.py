"""Region-masked audio conditioning adapters.

Two interchangeable designs:

* semi-decoupled: one shared cross-attention over the full latent, then
  three zero-initialized convolutions applied to the lip/expression/pose
  masked copies of that shared feature map, summed.
* fully decoupled: three independent cross-attentions, each masked by its
  region, summed.

Zero convolutions start at exactly zero (weights and bias), so a freshly
built semi-decoupled adapter contributes nothing until trained.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple, Union

import numpy as np

from .attention import AttnWeights, _attention_backward, _attention_forward, init_attn_weights
from .tensorfile import load_tensors, save_tensors

REGIONS = ("lip", "exp", "pose")
SUPPORTED_KERNELS = (1, 3)

# mask bands as exact integer fractions of the grid
_LIP_ROWS = (13, 20, 9, 10)    # rows [13H/20, 9H/10)
_LIP_COLS = (3, 10, 7, 10)     # cols [3W/10, 7W/10)
_EXP_ROWS = (3, 20, 1, 2)      # rows [3H/20, H/2)
_EXP_COLS = (1, 5, 4, 5)       # cols [W/5, 4W/5)


@dataclass
class RegionMasks:
    """Spatial weight maps in [0, 1] for the lip, expression and pose regions."""

    lip: np.ndarray
    exp: np.ndarray
    pose: np.ndarray

    def __post_init__(self):
        shapes = set()
        for name in REGIONS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"{name} mask must be 2-D, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} mask values must lie in [0, 1]")
            setattr(self, name, arr)
            shapes.add(arr.shape)
        if len(shapes) != 1:
            raise ValueError(f"mask shapes differ: {sorted(shapes)}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.lip.shape

    def as_tuple(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.lip, self.exp, self.pose


def make_default_masks(height: int, width: int) -> RegionMasks:
    """Banded default masks: lip low-center, expression upper-middle,
    pose everything else.  The three regions partition the grid.

    Band edges use exact integer arithmetic (e.g. lip rows span
    [13H//20, 9H//10)), so the geometry is reproducible at any size.
    """
    if height < 8 or width < 8:
        raise ValueError(f"grid too small: need H, W >= 8, got {height}x{width}")

    def band(rows, cols):
        m = np.zeros((height, width))
        r0 = rows[0] * height // rows[1]
        r1 = rows[2] * height // rows[3]
        c0 = cols[0] * width // cols[1]
        c1 = cols[2] * width // cols[3]
        m[r0:r1, c0:c1] = 1.0
        return m

    lip = band(_LIP_ROWS, _LIP_COLS)
    exp = band(_EXP_ROWS, _EXP_COLS)
    pose = 1.0 - np.maximum(lip, exp)
    return RegionMasks(lip, exp, pose)


def save_masks(masks: RegionMasks, path) -> None:
    save_tensors(path, {"lip": masks.lip, "exp": masks.exp, "pose": masks.pose})


def load_masks(path) -> RegionMasks:
    t = load_tensors(path)
    missing = [r for r in REGIONS if r not in t]
    if missing:
        raise ValueError(f"mask file missing tensors: {missing}")
    return RegionMasks(t["lip"], t["exp"], t["pose"])


@dataclass
class Conv2dParams:
    """One 2-D convolution: weight [C_out, C_in, k, k] and bias [C_out].

    Kernel size 1 or 3; k=3 pads with zeros so the output keeps H x W.
    """

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"weight must be [C_out, C_in, k, k], got {self.weight.shape}")
        if self.weight.shape[2] not in SUPPORTED_KERNELS:
            raise ValueError(f"unsupported kernel size {self.weight.shape[2]}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias length must equal C_out")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def to_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}


def zero_conv_init(in_channels: int, out_channels: int, kernel_size: int = 1) -> Conv2dParams:
    """All-zero conv parameters; applying them yields exactly zero."""
    if kernel_size not in SUPPORTED_KERNELS:
        raise ValueError(f"unsupported kernel size {kernel_size}, expected one of {SUPPORTED_KERNELS}")
    return Conv2dParams(
        weight=np.zeros((out_channels, in_channels, kernel_size, kernel_size)),
        bias=np.zeros(out_channels),
    )


def conv_init(rng: np.random.Generator, in_channels: int, out_channels: int,
              kernel_size: int = 1) -> Conv2dParams:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) conv parameters."""
    if kernel_size not in SUPPORTED_KERNELS:
        raise ValueError(f"unsupported kernel size {kernel_size}, expected one of {SUPPORTED_KERNELS}")
    fan_in = in_channels * kernel_size * kernel_size
    bound = 1.0 / np.sqrt(fan_in)
    return Conv2dParams(
        weight=rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size, kernel_size)),
        bias=rng.uniform(-bound, bound, size=out_channels),
    )


def _conv2d_forward(x: np.ndarray, p: Conv2dParams) -> np.ndarray:
    """x [B, C_in, H, W] -> [B, C_out, H, W], zero padding for k=3."""
    k = p.kernel_size
    if k == 1:
        b, ci, h, w = x.shape
        y = (p.weight[:, :, 0, 0] @ x.reshape(b, ci, h * w)).reshape(b, -1, h, w)
    else:
        b, _, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        y = np.zeros((b, p.weight.shape[0], h, w))
        for di in range(3):
            for dj in range(3):
                y += np.einsum("oi,bihw->bohw", p.weight[:, :, di, dj],
                               xp[:, :, di:di + h, dj:dj + w])
    return y + p.bias[None, :, None, None]


def _conv2d_backward(x: np.ndarray, p: Conv2dParams, d_y: np.ndarray):
    """Gradients (dx, d_weight, d_bias) for :func:`_conv2d_forward`."""
    k = p.kernel_size
    d_b = d_y.sum(axis=(0, 2, 3))
    if k == 1:
        b, ci, h, w = x.shape
        dy_flat = d_y.reshape(b, -1, h * w)
        d_w = np.matmul(dy_flat, x.reshape(b, ci, h * w).swapaxes(1, 2)).sum(axis=0)
        d_w = d_w[:, :, None, None]
        d_x = (p.weight[:, :, 0, 0].T @ dy_flat).reshape(b, ci, h, w)
        return d_x, d_w, d_b
    b, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    d_w = np.zeros_like(p.weight)
    d_xp = np.zeros_like(xp)
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di:di + h, dj:dj + w]
            d_w[:, :, di, dj] = np.einsum("bohw,bihw->oi", d_y, patch)
            d_xp[:, :, di:di + h, dj:dj + w] += np.einsum(
                "oi,bohw->bihw", p.weight[:, :, di, dj], d_y)
    return d_xp[:, :, 1:-1, 1:-1], d_w, d_b


@dataclass
class SemiDecoupledParams:
    """Shared attention plus one zero conv per region (all mapping C -> C)."""

    attn: AttnWeights
    zc_lip: Conv2dParams
    zc_exp: Conv2dParams
    zc_pose: Conv2dParams

    def __post_init__(self):
        shapes = {self.zc_lip.weight.shape, self.zc_exp.weight.shape, self.zc_pose.weight.shape}
        if len(shapes) != 1:
            raise ValueError(f"zero conv shapes differ: {sorted(shapes)}")
        c = self.attn.query_channels
        co, ci, _, _ = self.zc_lip.weight.shape
        if (co, ci) != (c, c):
            raise ValueError(f"zero convs must map {c}->{c}, got {ci}->{co}")

    @property
    def zero_convs(self) -> Tuple[Conv2dParams, Conv2dParams, Conv2dParams]:
        return self.zc_lip, self.zc_exp, self.zc_pose

    def to_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = self.attn.to_dict(prefix + "attn.")
        for region, zc in zip(REGIONS, self.zero_convs):
            out.update(zc.to_dict(f"{prefix}zc_{region}."))
        return out


@dataclass
class FullyDecoupledParams:
    """Three independent attention parameter sets, one per region."""

    attn_lip: AttnWeights
    attn_exp: AttnWeights
    attn_pose: AttnWeights

    def __post_init__(self):
        dims = {(a.query_channels, a.model_dim, a.audio_dim, a.heads)
                for a in self.attentions}
        if len(dims) != 1:
            raise ValueError("the three attention parameter sets must share dimensions")

    @property
    def attentions(self) -> Tuple[AttnWeights, AttnWeights, AttnWeights]:
        return self.attn_lip, self.attn_exp, self.attn_pose

    def to_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for region, attn in zip(REGIONS, self.attentions):
            out.update(attn.to_dict(f"{prefix}attn_{region}."))
        return out


AdapterParams = Union[SemiDecoupledParams, FullyDecoupledParams]


def init_semi_decoupled(rng: np.random.Generator, channels: int, model_dim: int,
                        audio_dim: int, heads: int = 1,
                        kernel_size: int = 1) -> SemiDecoupledParams:
    return SemiDecoupledParams(
        attn=init_attn_weights(rng, channels, model_dim, audio_dim, heads),
        zc_lip=zero_conv_init(channels, channels, kernel_size),
        zc_exp=zero_conv_init(channels, channels, kernel_size),
        zc_pose=zero_conv_init(channels, channels, kernel_size),
    )


def init_fully_decoupled(rng: np.random.Generator, channels: int, model_dim: int,
                         audio_dim: int, heads: int = 1) -> FullyDecoupledParams:
    return FullyDecoupledParams(
        attn_lip=init_attn_weights(rng, channels, model_dim, audio_dim, heads),
        attn_exp=init_attn_weights(rng, channels, model_dim, audio_dim, heads),
        attn_pose=init_attn_weights(rng, channels, model_dim, audio_dim, heads),
    )


def adapter_kind(p: AdapterParams) -> str:
    return "semi" if isinstance(p, SemiDecoupledParams) else "fully"


def _check_adapter_inputs(x: np.ndarray, a: np.ndarray, m: RegionMasks, channels: int):
    if x.ndim != 4 or x.shape[1] != channels:
        raise ValueError(f"latent batch must be [B, {channels}, H, W], got {x.shape}")
    if x.shape[2:] != m.shape:
        raise ValueError(f"mask shape {m.shape} does not match latent spatial {x.shape[2:]}")
    if a.ndim != 3:
        raise ValueError(f"token batch must be [B, T, D_a], got {a.shape}")


def _flatten_spatial(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).swapaxes(1, 2)     # [B, S, C]


def _unflatten_spatial(x: np.ndarray, h: int, w: int) -> np.ndarray:
    b, _, c = x.shape
    return x.swapaxes(1, 2).reshape(b, c, h, w)


def _semi_forward(x: np.ndarray, a: np.ndarray, m: RegionMasks,
                  p: SemiDecoupledParams, need_cache: bool = False):
    """Batched semi-decoupled path.  Exactly one attention evaluation."""
    _check_adapter_inputs(x, a, m, p.attn.query_channels)
    h, w = m.shape
    coupled_flat, attn_cache = _attention_forward(_flatten_spatial(x), a, p.attn,
                                                  need_cache=need_cache)
    coupled = _unflatten_spatial(coupled_flat, h, w)
    out = None
    masked = []
    for mask, zc in zip(m.as_tuple(), p.zero_convs):
        xm = coupled * mask[None, None]
        y = _conv2d_forward(xm, zc)
        out = y if out is None else out + y
        if need_cache:
            masked.append(xm)
    if not need_cache:
        return out, None
    return out, {"attn": attn_cache, "masked": masked, "masks": m, "shape": (h, w)}


def _semi_backward(cache: dict, d_out: np.ndarray, p: SemiDecoupledParams):
    h, w = cache["shape"]
    d_coupled = None
    grads: Dict[str, np.ndarray] = {}
    for region, mask, xm, zc in zip(REGIONS, cache["masks"].as_tuple(),
                                    cache["masked"], p.zero_convs):
        d_xm, d_w, d_b = _conv2d_backward(xm, zc, d_out)
        grads[f"zc_{region}.weight"] = d_w
        grads[f"zc_{region}.bias"] = d_b
        contrib = d_xm * mask[None, None]
        d_coupled = contrib if d_coupled is None else d_coupled + contrib
    d_flat = _flatten_spatial(d_coupled)
    dx_flat, da, attn_grads = _attention_backward(cache["attn"], d_flat)
    for k, v in attn_grads.items():
        grads[f"attn.{k}"] = v
    return _unflatten_spatial(dx_flat, h, w), da, grads


def _fully_forward(x: np.ndarray, a: np.ndarray, m: RegionMasks,
                   p: FullyDecoupledParams, need_cache: bool = False):
    """Batched fully-decoupled path.  Exactly three attention evaluations."""
    _check_adapter_inputs(x, a, m, p.attn_lip.query_channels)
    h, w = m.shape
    x_flat = _flatten_spatial(x)
    out = None
    caches = []
    for mask, attn in zip(m.as_tuple(), p.attentions):
        y_flat, c = _attention_forward(x_flat, a, attn, need_cache=need_cache)
        y = _unflatten_spatial(y_flat, h, w) * mask[None, None]
        out = y if out is None else out + y
        caches.append(c)
    if not need_cache:
        return out, None
    return out, {"attn": caches, "masks": m, "shape": (h, w)}


def _fully_backward(cache: dict, d_out: np.ndarray, p: FullyDecoupledParams):
    h, w = cache["shape"]
    dx = None
    da = None
    grads: Dict[str, np.ndarray] = {}
    for region, mask, attn_cache in zip(REGIONS, cache["masks"].as_tuple(), cache["attn"]):
        d_masked = _flatten_spatial(d_out * mask[None, None])
        dx_flat, da_i, attn_grads = _attention_backward(attn_cache, d_masked)
        for k, v in attn_grads.items():
            grads[f"attn_{region}.{k}"] = v
        dx_i = _unflatten_spatial(dx_flat, h, w)
        dx = dx_i if dx is None else dx + dx_i
        da = da_i if da is None else da + da_i
    return dx, da, grads


def _adapter_forward(x: np.ndarray, a: np.ndarray, m: RegionMasks,
                     p: AdapterParams, need_cache: bool = False):
    if isinstance(p, SemiDecoupledParams):
        return _semi_forward(x, a, m, p, need_cache)
    return _fully_forward(x, a, m, p, need_cache)


def _adapter_backward(cache: dict, d_out: np.ndarray, p: AdapterParams):
    if isinstance(p, SemiDecoupledParams):
        return _semi_backward(cache, d_out, p)
    return _fully_backward(cache, d_out, p)


def semi_decoupled_forward(z: np.ndarray, a: np.ndarray, m: RegionMasks,
                           p: SemiDecoupledParams) -> np.ndarray:
    """Shared attention, then summed region-masked zero convolutions.

    At construction (all-zero convs) the output is exactly the zero map.
    """
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    out, _ = _semi_forward(z[None], a[None], m, p)
    return out[0]


def fully_decoupled_forward(z: np.ndarray, a: np.ndarray, m: RegionMasks,
                            p: FullyDecoupledParams) -> np.ndarray:
    """Sum of three independent attentions, each masked by its region."""
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    out, _ = _fully_forward(z[None], a[None], m, p)
    return out[0]


def adapter_forward(z: np.ndarray, a: np.ndarray, m: RegionMasks,
                    p: AdapterParams) -> np.ndarray:
    if isinstance(p, SemiDecoupledParams):
        return semi_decoupled_forward(z, a, m, p)
    return fully_decoupled_forward(z, a, m, p)


def adapter_backward(z: np.ndarray, a: np.ndarray, m: RegionMasks, p: AdapterParams,
                     upstream: np.ndarray):
    """Gradients of ``sum(upstream * adapter_forward(z, a, m, p))``.

    Returns ``(param_grads, d_z, d_a)`` with ``param_grads`` keyed like
    ``p.to_dict()``.
    """
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != z.shape:
        raise ValueError(f"upstream shape {upstream.shape} != latent shape {z.shape}")
    _, cache = _adapter_forward(z[None], a[None], m, p, need_cache=True)
    dx, da, grads = _adapter_backward(cache, upstream[None], p)
    return grads, dx[0], da[0]
