"""Command-line entry point.

Subcommands: make-data, train, sample, eval, bench, flops.  All runs are
seeded and reproducible; every artifact embeds the digest of the frozen
config that produced it.  Failures exit nonzero with a single
``error: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import figures
from .adapters import load_masks, make_default_masks
from .audio import energy_from_tokens, load_embedding
from .bench import BenchDims, compare, count_flops, format_comparison_table, format_flop_table
from .config import ConfigError, RunConfig, load_run_config
from .diffusion import (
    TrainData,
    clip_conditioning,
    init_denoiser,
    conditioning_dim,
    load_checkpoint,
    make_schedule,
    sample,
    save_checkpoint,
    train_model,
)
from .faces import SceneCfg, gen_video_sample, load_dataset, make_dataset, save_dataset
from .metrics import evaluate_video, report_row, write_report_csv
from .tensorfile import TensorFileError, load_tensors, save_tensors


class CliError(Exception):
    """User-facing failure; rendered as one `error:` line."""


def _config_from_args(args) -> RunConfig:
    overrides = {}
    if getattr(args, "adapter", None):
        overrides["run.adapter"] = args.adapter
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = str(args.seed)
    if getattr(args, "steps", None) is not None:
        overrides["train.steps"] = str(args.steps)
    return load_run_config(args.config, overrides)


def _build_denoiser(cfg: RunConfig):
    return init_denoiser(
        cfg.seed,
        channels=cfg.model.channels,
        in_channels=1,
        blocks=cfg.model.blocks,
        attn_dim=cfg.model.attn_dim,
        heads=cfg.model.heads,
        audio_dim=conditioning_dim(cfg.data.audio_dim),
        time_dim=cfg.model.time_dim,
        kernel_size=cfg.model.zero_conv_kernel,
        adapter=cfg.adapter,
    )


def cmd_make_data(args) -> int:
    cfg = _config_from_args(args)
    n = args.n if args.n is not None else cfg.data.n_samples
    samples = make_dataset(n, cfg.seed, cfg.scene, n_frames=cfg.data.frames,
                           height=cfg.data.height, width=cfg.data.width)
    manifest = save_dataset(samples, args.out, cfg.scene, config_digest=cfg.digest())
    print(f"wrote {n} samples to {args.out}")
    print(f"manifest: {manifest} (config_digest={cfg.digest()})")
    return 0


def _training_data(cfg: RunConfig, data_dir) -> TrainData:
    samples = load_dataset(data_dir)
    latents = np.concatenate([s.frames for s in samples], axis=0)
    conditioning = np.concatenate([clip_conditioning(s.audio.tokens) for s in samples],
                                  axis=0)
    masks = make_default_masks(cfg.data.height, cfg.data.width)
    return TrainData(latents=latents, conditioning=conditioning, masks=masks)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    digest = cfg.digest()
    data = _training_data(cfg, args.data)
    params = _build_denoiser(cfg)
    schedule = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                             cfg.schedule.beta_end)

    log_rows = []

    def log_fn(step, loss):
        log_rows.append((step, loss))
        print(f"step {step:6d}  loss {loss:.6f}")

    losses = train_model(data, params, schedule, cfg.train, log_fn=log_fn)

    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".loss.csv")
    with log_path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_digest={digest}\n# adapter={cfg.adapter}\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(losses, start=1):
            writer.writerow([step, f"{loss:.8f}"])

    save_checkpoint(args.out, params, schedule,
                    meta={"config_digest": digest, "seed": str(cfg.seed),
                          "train_steps": str(cfg.train.steps)})
    if not args.no_figure:
        fig_path = figures.save_loss_curve(range(1, len(losses) + 1), losses,
                                           log_path.with_suffix(".png"))
        print(f"loss figure: {fig_path}")
    print(f"checkpoint: {Path(args.out).with_suffix('.sdtf')} (config_digest={digest})")
    print(f"final loss {losses[-1]:.6f}")
    return 0


def cmd_sample(args) -> int:
    params, schedule, meta = load_checkpoint(args.checkpoint)
    digest = meta.get("config_digest", "none")
    if args.audio is not None:
        tokens = load_embedding(args.audio).tokens
    else:
        clip = gen_video_sample(args.audio_seed, SceneCfg())
        tokens = clip.audio.tokens
    masks = load_masks(args.masks) if args.masks else make_default_masks(args.size, args.size)
    frames = sample(tokens, masks, params, schedule, steps=args.steps, seed=args.seed)

    out = Path(args.out)
    save_tensors(out, {"frames": frames, "audio": tokens})
    out.with_suffix(".manifest").write_text(
        f"adapter = {meta.get('adapter', 'unknown')}\n"
        f"config_digest = {digest}\n"
        f"seed = {args.seed}\n"
        f"steps = {args.steps}\n",
        encoding="utf-8")
    if args.pgm_dir:
        pgm_dir = Path(args.pgm_dir)
        pgm_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(frames[:, 0]):
            write_pgm(frame, pgm_dir / f"frame_{i:03d}.pgm")
        print(f"wrote {frames.shape[0]} PGM frames to {pgm_dir}")
    if args.png:
        figures.save_frame_strip(frames, args.png)
        print(f"frame strip: {args.png}")
    print(f"wrote {frames.shape[0]} frames to {out} (config_digest={digest})")
    return 0


def write_pgm(frame: np.ndarray, path) -> None:
    """8-bit binary PGM (P5) dump of one [H, W] frame in [0, 1]."""
    arr = np.clip(np.asarray(frame), 0.0, 1.0)
    data = (arr * 255.0).round().astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def cmd_eval(args) -> int:
    videos = sorted(Path(args.videos).glob("*.sdtf"))
    if not videos:
        raise CliError(f"no .sdtf video files under {args.videos}")
    masks = load_masks(args.masks) if args.masks else None
    rows = []
    digest = "none"
    for path in videos:
        tensors = load_tensors(path)
        if "frames" not in tensors:
            raise CliError(f"{path} has no 'frames' tensor")
        frames = tensors["frames"]
        if masks is None:
            masks = make_default_masks(frames.shape[-2], frames.shape[-1])
        if "lip_energy" in tensors:
            energy = tensors["lip_energy"]
        elif "audio" in tensors:
            energy = energy_from_tokens(tensors["audio"])
        else:
            raise CliError(f"{path} has neither 'lip_energy' nor 'audio' tensors")
        kind = "unknown"
        manifest = path.with_suffix(".manifest")
        if manifest.exists():
            for line in manifest.read_text(encoding="utf-8").splitlines():
                if line.startswith("adapter"):
                    kind = line.split("=", 1)[1].strip()
                if line.startswith("config_digest"):
                    digest = line.split("=", 1)[1].strip()
        report = evaluate_video(frames, masks, energy)
        rows.append(report_row(path.stem, kind, report))
    write_report_csv(args.out, rows, config_digest=digest)
    if not args.no_figure:
        fig_path = figures.save_metrics_figure(rows, Path(args.out).with_suffix(".png"))
        print(f"metrics figure: {fig_path}")
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    result = compare("semi", "fully", cfg.bench, runs=args.runs, warmup=args.warmup,
                     single_thread=not args.multi_thread, seed=cfg.seed,
                     config_digest=cfg.digest())
    out = Path(args.out)
    out.write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(format_comparison_table(result))
    if not args.no_figure:
        fig_path = figures.save_bench_figure(result, out.with_suffix(".png"))
        print(f"bench figure: {fig_path}")
    print(f"wrote {out}")
    return 0


def cmd_flops(args) -> int:
    cfg = _config_from_args(args)
    report = count_flops(cfg.bench)
    print(f"config: {cfg.bench}")
    print(format_flop_table(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="talkdiff",
        description="Desk-scale audio-conditioned talking-face diffusion sandbox.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--adapter", choices=("semi", "fully"), default=None,
                       help="override adapter kind")
        p.add_argument("--seed", type=int, default=None, help="override run seed")

    p = sub.add_parser("make-data", help="generate a synthetic clip dataset")
    add_config(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=None, help="number of clips")
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("train", help="train the denoiser on a dataset")
    add_config(p)
    p.add_argument("--data", required=True, help="dataset directory from make-data")
    p.add_argument("--out", required=True, help="checkpoint base path")
    p.add_argument("--log", default=None, help="loss CSV path (default <out>.loss.csv)")
    p.add_argument("--steps", type=int, default=None, help="override training steps")
    p.add_argument("--no-figure", action="store_true", help="skip the loss curve PNG")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate a clip from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint base path")
    p.add_argument("--out", required=True, help="output .sdtf path")
    p.add_argument("--audio", default=None, help="audio embedding .sdtf (optional)")
    p.add_argument("--audio-seed", type=int, default=0,
                   help="seed for a synthetic clip's audio when --audio is not given")
    p.add_argument("--masks", default=None, help="region masks .sdtf (default: built-in)")
    p.add_argument("--size", type=int, default=32, help="mask grid size when built-in")
    p.add_argument("--steps", type=int, default=40, help="DDIM steps")
    p.add_argument("--seed", type=int, default=0, help="init noise seed")
    p.add_argument("--pgm-dir", default=None, help="also dump frames as PGM files")
    p.add_argument("--png", default=None, help="also render a frame strip PNG")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="score videos into a CSV report")
    p.add_argument("--videos", required=True, help="directory of .sdtf videos")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--masks", default=None, help="region masks .sdtf (default: built-in)")
    p.add_argument("--no-figure", action="store_true", help="skip the metrics PNG")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="time semi vs fully decoupled adapters")
    add_config(p)
    p.add_argument("--out", required=True, help="output JSON path")
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--multi-thread", action="store_true",
                   help="allow BLAS threading (timings become indicative-only)")
    p.add_argument("--no-figure", action="store_true", help="skip the bench PNG")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("flops", help="print the analytic MAC table")
    add_config(p)
    p.set_defaults(fn=cmd_flops)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, TensorFileError, ValueError, FileNotFoundError,
            RuntimeError, OSError) as exc:
        message = str(exc).replace("\n", " ").strip() or exc.__class__.__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
