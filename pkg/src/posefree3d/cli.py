"""Command-line entry points.

Every subcommand writes under ``--out`` with a fixed layout::

    checkpoints/   training snapshots (``latest.safetensors`` is the newest)
    samples/       image grids, interpolation frames, inversion bundles
    plots/         pose-distribution overlays
    metrics.log    JSONL loss and metric records

Exit status is 0 on success, 2 on usage errors and 1 on any other failure,
with a one-line JSON diagnostic on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .camera import CameraPose

log = logging.getLogger("posefree3d")


class UsageError(Exception):
    pass


def save_grid(images: torch.Tensor, path, ncol: int = 8, pad: int = 2):
    """Tile ``(N, 3, H, W)`` images in [-1, 1] into one PNG."""
    from .synthdata import save_png

    n, c, h, w = images.shape
    ncol = min(ncol, n)
    nrow = math.ceil(n / ncol)
    grid = torch.ones(c, nrow * (h + pad) + pad, ncol * (w + pad) + pad, dtype=torch.float64)
    for i in range(n):
        r, q = divmod(i, ncol)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[:, y:y + h, x:x + w] = images[i].detach().double()
    save_png(path, grid)


def _pose_records(pose: CameraPose) -> list[dict]:
    t = pose.as_tensor().detach().double().reshape(-1, 2)
    return [{"azimuth": float(a), "elevation": float(e)} for a, e in t.tolist()]


def _checkpoint(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoints" / "latest.safetensors" if (p / "checkpoints").is_dir() else p / "latest.safetensors"
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return p


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_data(args):
    from .synthdata import PRESETS, SceneSpec, generate_dataset

    if args.spec in PRESETS:
        spec = PRESETS[args.spec]()
    elif Path(args.spec).is_file():
        with open(args.spec) as f:
            spec = SceneSpec(**json.load(f))
    else:
        raise UsageError(f"--spec must be one of {sorted(PRESETS)} or a JSON file")
    changes = {k: v for k, v in (("count", args.count), ("resolution", args.resolution), ("seed", args.seed))
               if v is not None}
    spec = dataclasses.replace(spec, **changes)
    manifest = generate_dataset(spec, args.out, workers=args.workers)
    print(f"wrote {manifest['count']} records to {args.out}")


def cmd_train(args):
    from .config import SHIPPED, load_config, save_config
    from .trainer import fit

    overrides = _overrides(args.set)
    if args.no_symmetry_loss:
        overrides["symmetry_enabled"] = False
    if args.no_pose_aware_d:
        overrides["pose_aware_d_enabled"] = False
    if args.no_pose_condition:
        overrides["pose_condition_enabled"] = False
    if args.pose_lr is not None:
        overrides["lr_pose_learner"] = args.pose_lr
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        config = load_config(args.config or SHIPPED / "default.ini", overrides)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.ini")
    resume = _checkpoint(args.resume) if args.resume else None
    init_from = _checkpoint(args.init_from) if args.init_from else None
    trainer, history = fit(config, args.data, out, resume=resume, evaluate=not args.no_eval,
                           max_steps=args.max_steps, progress=True, init_from=init_from)
    (out / "samples").mkdir(exist_ok=True)
    g = torch.Generator().manual_seed(config.seed)
    from .field import sample_latents

    with torch.no_grad():
        z = sample_latents(16, config.latent_dim, g)
        save_grid(trainer.G_ema.generate(z).image.image, out / "samples" / f"step_{trainer.step:07d}.png")
    if history:
        print(json.dumps({k: v for k, v in history[-1].items() if not isinstance(v, (list, tuple))}))
    print(f"trained to step {trainer.step}; checkpoint {trainer.last_checkpoint}")


def cmd_eval(args):
    from .evaluation import evaluate_models, format_table, plot_pose_distributions
    from .inversion import InversionConfig
    from .synthdata import TrainingImages, load_eval_records
    from .trainer import MetricLog, load_models

    config, G, D = load_models(_checkpoint(args.checkpoint))
    records = load_eval_records(args.data)
    n_real = min(args.n_real, len(records))
    data = TrainingImages(args.data, resolution=config.resolution, limit=n_real)
    images = data.images(np.arange(n_real))
    true_poses = np.array([[float(r.pose.azimuth), float(r.pose.elevation)] for r in records[:n_real]])
    inv = InversionConfig(stage1_steps=args.inversion_steps, stage2_steps=args.inversion_steps // 2)
    report, dists = evaluate_models(G, D, images, true_poses, n_latents=args.n_latents,
                                    n_reprojection=args.reprojection_latents,
                                    depth_records=records[:args.depth_images] if args.depth_images else None,
                                    depth_inversion=inv, bins=config.hist_bins, seed=args.seed)
    out = Path(args.out)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    plot_pose_distributions(dists, out / "plots" / "pose_distribution.png")
    rec = report.as_dict()
    rec.update(kind="eval", checkpoint=str(args.checkpoint))
    MetricLog(out / "metrics.log").write(rec)
    print(format_table(report))


def _load_generator(path):
    from .trainer import load_models

    config, G, _ = load_models(_checkpoint(path))
    return config, G


def cmd_sample(args):
    from .field import sample_latents

    config, G = _load_generator(args.checkpoint)
    g = torch.Generator().manual_seed(args.seed)
    z = sample_latents(args.n, G.latent_dim, g)
    with torch.no_grad():
        out = G.generate(z)
    dest = Path(args.out) / "samples"
    dest.mkdir(parents=True, exist_ok=True)
    save_grid(out.image.image, dest / f"samples_seed{args.seed}.png")
    with open(dest / f"samples_seed{args.seed}.json", "w") as f:
        json.dump({"seed": args.seed, "poses": _pose_records(out.pose)}, f, indent=1)
    print(f"wrote {args.n} samples to {dest}")


def interpolation_path(G, z1: torch.Tensor, z2: torch.Tensor, steps: int, space: str = "w"):
    """Renders along a straight line between two latents; returns (images, poses).

    ``steps`` counts intervals, so ``steps + 1`` frames are produced and the
    end frames equal direct samples of ``z1`` and ``z2``.
    """
    if steps < 1:
        raise UsageError("--steps must be >= 1")
    t = torch.linspace(0, 1, steps + 1, dtype=z1.dtype).reshape(-1, 1)
    with torch.no_grad():
        if space == "w":
            a, b = G.map_latent(z1.reshape(1, -1)), G.map_latent(z2.reshape(1, -1))
            w = a + t * (b - a)
            w[0], w[-1] = a[0], b[0]
        elif space == "z":
            z = z1.reshape(1, -1) + t * (z2 - z1).reshape(1, -1)
            z[0], z[-1] = z1, z2
            w = G.map_latent(z)
        else:
            raise UsageError(f"unknown interpolation space {space!r}")
        pose = G.pose_learner(w)
        return G.synthesize(w, pose).image, pose


def cmd_interpolate(args):
    from .field import sample_latents
    from .synthdata import save_png

    _, G = _load_generator(args.checkpoint)
    z1 = sample_latents(1, G.latent_dim, torch.Generator().manual_seed(args.z1))[0]
    z2 = sample_latents(1, G.latent_dim, torch.Generator().manual_seed(args.z2))[0]
    images, pose = interpolation_path(G, z1, z2, args.steps, args.space)
    dest = Path(args.out) / "samples" / f"interp_{args.z1}_{args.z2}_{args.space}"
    dest.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_png(dest / f"frame_{i:03d}.png", img)
    save_grid(images, dest / "strip.png", ncol=len(images))
    with open(dest / "poses.json", "w") as f:
        json.dump({"space": args.space, "frames": _pose_records(pose)}, f, indent=1)
    print(f"wrote {len(images)} frames to {dest}")


def cmd_invert(args):
    from .inversion import InversionConfig, azimuth_sweep, invert, novel_views
    from .synthdata import load_png, save_png

    if args.mode not in ("A", "B"):
        raise UsageError("--mode must be A or B")
    from .checkpoint import save_checkpoint
    from .trainer import load_models

    config, G, D = load_models(_checkpoint(args.checkpoint))
    img = torch.from_numpy(load_png(args.image)).float()[None] / 127.5 - 1
    res = G.intrinsics.image_resolution
    if img.shape[-1] != res or img.shape[-2] != res:
        img = F.interpolate(img, size=(res, res), mode="area")
    cfg = InversionConfig(stage1_steps=args.stage1_steps, stage2_steps=args.stage2_steps, mode=args.mode,
                          seed=args.seed)
    result = invert(img, G, cfg)
    dest = Path(args.out) / "samples" / f"invert_{Path(args.image).stem}_{args.mode}"
    dest.mkdir(parents=True, exist_ok=True)
    save_png(dest / "target.png", img[0])
    with torch.no_grad():
        save_png(dest / "reconstruction.png", result.generator.synthesize(result.style, result.pose).image[0])
    center = CameraPose(float(result.pose.azimuth.reshape(-1)[0]), float(result.pose.elevation.reshape(-1)[0]))
    views = novel_views(result, azimuth_sweep(center, args.views))
    save_grid(torch.cat([v.image for v in views]), dest / "novel_views.png", ncol=args.views)
    np.save(dest / "style.npy", result.style.detach().numpy())
    # the tuned generator as an inference checkpoint (load with load_models)
    save_checkpoint(dest / "tuned.safetensors", {"G_ema": result.generator, "G": result.generator, "D": D}, {},
                    torch.Generator(), {"config": config.to_dict(), "step": 0, "images_seen": 0,
                                        "source": str(args.checkpoint)})
    with open(dest / "result.json", "w") as f:
        json.dump({"mode": result.mode, "pose": _pose_records(result.pose)[0], "psnr": result.psnr,
                   "objective": result.objective, "trace": result.trace}, f, indent=1)
    print(f"psnr {result.psnr:.2f} dB, pose {_pose_records(result.pose)[0]}; bundle in {dest}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posefree3d", description="Pose-free 3D-aware GAN at desk scale")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="render a synthetic dataset")
    s.add_argument("--spec", default="faces-proxy", help="preset name or SceneSpec JSON file")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int)
    s.add_argument("--resolution", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train", help="train a generator/discriminator pair")
    s.add_argument("--config", help="INI config (default: shipped default.ini)")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint file or run directory")
    s.add_argument("--init-from", help="start from another run's weights with fresh optimizers")
    s.add_argument("--no-symmetry-loss", action="store_true")
    s.add_argument("--no-pose-aware-d", action="store_true")
    s.add_argument("--no-pose-condition", action="store_true")
    s.add_argument("--pose-lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--no-eval", action="store_true")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics table and pose-distribution plots")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n-latents", type=int, default=10000)
    s.add_argument("--n-real", type=int, default=2000)
    s.add_argument("--reprojection-latents", type=int, default=16)
    s.add_argument("--depth-images", type=int, default=0)
    s.add_argument("--inversion-steps", type=int, default=200)
    s.add_argument("--seed", type=int, default=1234)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="image grid of random samples")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("interpolate", help="frames along a line between two latents")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--z1", type=int, required=True, help="seed of the first latent")
    s.add_argument("--z2", type=int, required=True, help="seed of the second latent")
    s.add_argument("--steps", type=int, default=8)
    s.add_argument("--space", choices=("w", "z"), default="w")
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("invert", help="fit the generator to one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("A", "B"), default="A")
    s.add_argument("--stage1-steps", type=int, default=400)
    s.add_argument("--stage2-steps", type=int, default=300)
    s.add_argument("--views", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_invert)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a structured diagnostic
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
