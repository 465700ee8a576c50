"""Command-line entry point: ``dome <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import RunConfig, load_config
from .occupancy import (NUSCENES_CLASSES, SYNTHETIC_CLASSES, OccupancyGrid, compute_metrics, get_preset, read_grid,
                        read_sequence, write_sequence)
from .render import render_ascii, render_bev
from .synthetic import gen_synthetic
from .trajectory import resample_scene, trajectory_stats
from .vae import reconstruct, train_vae, write_latent
from .world import evaluate_forecasts, forecast_latents, rollout, train_world_model

log = logging.getLogger("dome")


def class_table(preset: str):
    return NUSCENES_CLASSES if preset == "reference" else SYNTHETIC_CLASSES


def configure_threads() -> None:
    n = os.environ.get("DOME_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def scene_files(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        out.extend(sorted(p.glob("*.occs")) if p.is_dir() else [p])
    if not out:
        raise SystemExit(f"no .occs files found in {', '.join(map(str, paths))}")
    return out


def load_scenes(paths):
    scenes = []
    for f in scene_files(paths):
        grids, poses = read_sequence(f)
        scenes.append((f.stem, np.stack([g.labels for g in grids]), poses, grids))
    return scenes


def out_dir(args) -> Path:
    d = Path(args.out or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def require(value, flag: str):
    if value is None:
        raise SystemExit(f"{flag} is required for this command")
    return value


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- #
# subcommands


def cmd_synth(args, cfg: RunConfig) -> int:
    d = out_dir(args)
    scenes = gen_synthetic(cfg.seed, args.n_scenes, cfg.preset, args.n_frames, args.turn_prob, out_dir=d)
    print(f"wrote {len(scenes)} scenes of {args.n_frames} frames to {d}")
    return 0


def cmd_train_vae(args, cfg: RunConfig) -> int:
    d = out_dir(args)
    scenes = load_scenes(require(args.data, "--data"))
    frames = np.concatenate([s[1] for s in scenes])
    vcfg = cfg.vae_config()
    epochs = args.epochs if args.epochs is not None else cfg.train.vae_epochs
    res = train_vae(frames, vcfg, epochs, lr=cfg.train.lr, batch_size=cfg.train.vae_batch, seed=cfg.seed,
                    ema_decay=cfg.train.ema_decay, min_lr=cfg.train.min_lr)
    ckpt.save_vae(res.model, d / "vae.ckpt")
    write_json(d / "vae_losses.json", {"losses": res.losses})
    rep = compute_metrics(reconstruct(res.model, frames), frames, class_table(cfg.preset))
    print(f"vae: {len(frames)} frames, {epochs} epochs, train recon mIoU {rep.miou:.4f} IoU {rep.iou_total:.4f}")
    print(f"compression ratio {vcfg.compression_ratio:g}; checkpoint {d / 'vae.ckpt'}")
    return 0


def cmd_train_wm(args, cfg: RunConfig) -> int:
    d = out_dir(args)
    vae = ckpt.load_vae(require(args.checkpoint, "--checkpoint"))
    scenes = load_scenes(require(args.data, "--data"))
    nh, nw, c = vae.cfg.latent_shape
    steps = args.steps if args.steps is not None else cfg.train.wm_steps
    res = train_world_model(vae, [(s[1], s[2]) for s in scenes], cfg.dit_config((nh, nw), c), steps,
                            cfg.make_schedule(), n_c=cfg.n_c, lr=cfg.train.lr, batch_size=cfg.train.wm_batch,
                            seed=cfg.seed, ema_decay=cfg.train.ema_decay, min_lr=cfg.train.min_lr)
    ckpt.save_world(res.model, d, res.store, use_ema=not args.no_ema)
    write_json(d / "wm_losses.json", {"losses": res.losses})
    print(f"world model: {steps} steps, final loss {np.mean(res.losses[-50:]):.4f}; saved to {d}")
    return 0


def _single_scene(args):
    scenes = load_scenes([require(args.input, "--input")])
    return scenes[0]


def cmd_forecast(args, cfg: RunConfig) -> int:
    d = out_dir(args)
    model = ckpt.load_world(require(args.checkpoint, "--checkpoint"))
    name, labels, poses, grids = _single_scene(args)
    n_f, n_c, st = model.n_f, cfg.n_c, args.start
    if st + n_f > len(labels):
        raise SystemExit(f"scene {name} has {len(labels)} frames; a window at {st} needs {st + n_f}")
    z_ctx = model.encode(labels[st:st + n_c])
    z = forecast_latents(model, z_ctx, poses[st:st + n_f], seed=cfg.seed)
    pred = model.decode(z[n_c:])
    ref = grids[0]
    out_grids = [OccupancyGrid(p, ref.resolution, ref.origin, ref.num_classes) for p in pred]
    write_sequence(out_grids, poses[st + n_c:st + n_f], d / "forecast.occs")
    if args.save_latents:
        for k, zk in enumerate(z[n_c:]):
            write_latent(zk * model.latent_scale, d / f"latent_{k:02d}.occz")
    print(f"forecast {len(pred)} frames from {n_c} context frames of {name} -> {d / 'forecast.occs'}")
    return 0


def cmd_rollout(args, cfg: RunConfig) -> int:
    d = out_dir(args)
    model = ckpt.load_world(require(args.checkpoint, "--checkpoint"))
    name, labels, poses, grids = _single_scene(args)
    st = args.start
    try:
        res = rollout(labels[st:st + cfg.n_c], poses[st:], args.frames, model, seed=cfg.seed,
                      frame_rate=cfg.frame_rate)
    except ValueError as exc:
        raise SystemExit(str(exc))
    ref = grids[0]
    out_poses = poses[st + cfg.n_c:st + cfg.n_c + len(res.frames)]
    write_sequence([OccupancyGrid(f, ref.resolution, ref.origin, ref.num_classes) for f in res.frames], out_poses,
                   d / "rollout.occs")
    summary = {"frames": len(res.frames), "duration_s": res.duration_s, "frame_rate": res.frame_rate,
               "windows": [{"pose_offset": o, "new_frames": n} for o, n in res.windows]}
    write_json(d / "rollout.json", summary)
    print(f"rollout: {len(res.frames)} frames = {res.duration_s:g} s in {len(res.windows)} windows")
    return 0


def cmd_resample(args, cfg: RunConfig) -> int:
    d = out_dir(args)
    preset = get_preset(cfg.preset)
    table = class_table(cfg.preset)
    opts = cfg.resample
    n = args.num_samples if args.num_samples is not None else opts["num_samples"]
    manifest = {"seed": cfg.seed, "samples": [], "skipped": []}
    for si, (name, _, poses, grids) in enumerate(load_scenes(require(args.input, "--input"))):
        seed = cfg.seed + si
        res = resample_scene(grids, poses, table, preset, n, seed=seed, min_separation=opts["min_separation"],
                             retry_budget=opts["retry_budget"])
        for s in res.samples:
            f = d / f"{name}_sample_{s.sample_idx:02d}.occs"
            write_sequence(s.grids, s.poses, f)
            manifest["samples"].append({"scene_id": name, "sample_idx": s.sample_idx, "seed": seed,
                                        "waypoint_count": int(len(s.trajectory.waypoints)),
                                        "frames": len(s.grids), "file": f.name})
        manifest["skipped"].extend({"scene_id": name, "sample_idx": k, "reason": why} for k, why in res.skipped)
    write_json(d / "manifest.json", manifest)
    print(f"resampled {len(manifest['samples'])} sequences ({len(manifest['skipped'])} skipped) -> {d}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model = ckpt.load_world(require(args.checkpoint, "--checkpoint"))
    scenes = load_scenes(require(args.data, "--data"))
    starts = [int(s) for s in args.starts.split(",")]
    result = evaluate_forecasts(model, [(s[1], s[2]) for s in scenes], class_table(cfg.preset), n_c=cfg.n_c,
                                starts=starts, seed=cfg.seed, frame_rate=cfg.frame_rate)
    print(result.to_text())
    payload = result.to_json()
    print(json.dumps(payload, sort_keys=True))
    if args.out:
        write_json(out_dir(args) / "eval.json", payload)
    return 0


def cmd_render(args, cfg: RunConfig) -> int:
    path = Path(require(args.input, "--input"))
    grid = read_grid(path) if path.suffix == ".occg" else read_sequence(path)[0][args.frame]
    empty = class_table(cfg.preset).empty_id
    if args.ascii:
        print(render_ascii(grid, empty))
        return 0
    target = Path(args.out) if args.out and args.out.endswith(".png") else out_dir(args) / f"{path.stem}_{args.frame:04d}.png"
    render_bev(grid, target, empty)
    print(f"wrote {target}")
    return 0


def cmd_stats(args, cfg: RunConfig) -> int:
    scenes = load_scenes(require(args.input, "--input"))
    stats = trajectory_stats([s[2] for s in scenes], n_bins=args.bins)
    if args.out:
        write_json(out_dir(args) / "stats.json", stats)
    print(json.dumps({k: stats[k] for k in ("bins", "counts", "max_bin_fraction")}))
    return 0


# --------------------------------------------------------------------------- #
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (render also accepts a .png path)")
    common.add_argument("--preset", help="grid preset: synthetic, reference or tiny")
    common.add_argument("--checkpoint", help="VAE checkpoint (train-wm) or world-model directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dome", description="Occupancy world model: data, training, inference.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic driving scenes")
    s.add_argument("--n-scenes", type=int, default=8)
    s.add_argument("--n-frames", type=int, default=19)
    s.add_argument("--turn-prob", type=float, default=0.2)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train-vae", parents=[common], help="train the occupancy VAE")
    s.add_argument("--data", nargs="+", help="directories or .occs files")
    s.add_argument("--epochs", type=int)
    s.set_defaults(fn=cmd_train_vae)

    s = sub.add_parser("train-wm", parents=[common], help="train the diffusion world model on a frozen VAE")
    s.add_argument("--data", nargs="+")
    s.add_argument("--steps", type=int)
    s.add_argument("--no-ema", action="store_true", help="save live weights instead of the EMA")
    s.set_defaults(fn=cmd_train_wm)

    s = sub.add_parser("forecast", parents=[common], help="predict one window from context frames")
    s.add_argument("--input", help=".occs scene supplying context frames and poses")
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--n-c", type=int, dest="n_c")
    s.add_argument("--save-latents", action="store_true", help="also write OCCZ latents")
    s.set_defaults(fn=cmd_forecast)

    s = sub.add_parser("rollout", parents=[common], help="chain windows into a long sequence")
    s.add_argument("--input")
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--frames", type=int, default=64)
    s.add_argument("--n-c", type=int, dest="n_c")
    s.set_defaults(fn=cmd_rollout)

    s = sub.add_parser("resample", parents=[common], help="trajectory resampling augmentation")
    s.add_argument("--input", nargs="+")
    s.add_argument("--num-samples", type=int)
    s.set_defaults(fn=cmd_resample)

    s = sub.add_parser("eval", parents=[common], help="horizon table against the copy-paste baseline")
    s.add_argument("--data", nargs="+")
    s.add_argument("--starts", default="0", help="comma-separated window start frames")
    s.add_argument("--n-c", type=int, dest="n_c")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("render", parents=[common], help="top-down PNG or ASCII view of a grid")
    s.add_argument("--input")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--ascii", action="store_true")
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("stats", parents=[common], help="heading histogram of pose sequences")
    s.add_argument("--input", nargs="+")
    s.add_argument("--bins", type=int, default=9)
    s.set_defaults(fn=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    configure_threads()
    try:
        cfg = load_config(args.config, seed=args.seed, preset=args.preset, n_c=getattr(args, "n_c", None))
    except (OSError, ValueError) as exc:
        raise SystemExit(f"config error: {exc}")
    try:
        return args.fn(args, cfg)
    except ckpt.MissingCheckpoint as exc:
        raise SystemExit(f"missing checkpoint: {exc}")


if __name__ == "__main__":
    sys.exit(main())
