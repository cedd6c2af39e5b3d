"""talkdiff: a desk-scale audio-conditioned talking-face diffusion sandbox.

The package trains a miniature noise-prediction diffusion model on
synthetic sprite-face clips and compares two audio conditioning adapters:
a semi-decoupled design (one shared cross-attention followed by three
region-masked zero convolutions) against a fully decoupled baseline
(three independent attentions, masked and summed).  Everything is float64
numpy with hand-derived gradients, so the whole pipeline is checkable
against brute-force oracles and finite differences.
"""

from .adapters import (
    Conv2dParams,
    FullyDecoupledParams,
    RegionMasks,
    SemiDecoupledParams,
    adapter_backward,
    fully_decoupled_forward,
    load_masks,
    make_default_masks,
    save_masks,
    semi_decoupled_forward,
    zero_conv_init,
)
from .attention import (
    AttnWeights,
    attention_call_count,
    cross_attention,
    cross_attention_backward,
    init_attn_weights,
    softmax_rows,
)
from .audio import (
    AudioClip,
    AudioEmbedding,
    FeaturizerCfg,
    ToneSegment,
    ToneSpec,
    embed_audio,
    load_embedding,
    save_embedding,
    synth_audio,
)
from .bench import BenchDims, FlopReport, TimingReport, compare, count_flops, time_inference
from .config import RunConfig, load_run_config
from .diffusion import (
    DenoiserParams,
    NoiseSchedule,
    TrainCfg,
    add_noise,
    denoiser_backward,
    denoiser_forward,
    frame_conditioning,
    init_denoiser,
    load_checkpoint,
    make_schedule,
    sample,
    save_checkpoint,
    train_model,
    train_step,
)
from .faces import SceneCfg, VideoSample, gen_video_sample, make_dataset
from .metrics import (
    MetricsReport,
    SyncResult,
    background_consistency,
    evaluate_video,
    smoothness,
    subject_consistency,
    sync_proxy,
)
from .tensorfile import TensorFileError, load_tensors, save_tensors

__version__ = "0.1.0"
