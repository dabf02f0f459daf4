"""Long-running acceptance experiments.

Each experiment writes a JSON summary into a runs directory so the
acceptance suite can check it without retraining. Run them with
``python -m posefree3d.experiments <name> --runs DIR --data DIR``.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .camera import CameraPose
from .config import SHIPPED, TrainConfig, load_config
from .discriminator import PoseAwareDiscriminator

log = logging.getLogger("posefree3d.experiments")

ABLATIONS = {
    "full": {},
    "no_symmetry": {"symmetry_enabled": False},
    "no_pose_aware_d": {"pose_aware_d_enabled": False},
    "no_pose_condition": {"pose_condition_enabled": False},
}


def _write(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)


def _true_poses(records) -> torch.Tensor:
    return torch.tensor([[float(r.pose.azimuth), float(r.pose.elevation)] for r in records], dtype=torch.float32)


def angle_l1(pred: torch.Tensor, truth: torch.Tensor) -> float:
    """Mean absolute angle error over both angles, in radians."""
    return float((pred - truth).abs().mean())


def supervised_pose_head(data_dir, n_train: int = 5000, n_test: int = 500, steps: int = 2000, batch_size: int = 32,
                         resolution: int = 32, lr: float = 1e-3, seed: int = 0, base_channels: int = 32,
                         pose_hidden: int = 256) -> dict:
    """Train the discriminator trunk and pose head alone on labelled images.

    Returns train and held-out mean L1 pose error of the final weights.
    """
    from .synthdata import TrainingImages, load_eval_records

    torch.manual_seed(seed)
    records = load_eval_records(data_dir)
    if len(records) < n_train + n_test:
        raise ValueError(f"need {n_train + n_test} records, dataset has {len(records)}")
    data = TrainingImages(data_dir, resolution=resolution, limit=n_train + n_test)
    poses = _true_poses(records[:n_train + n_test])
    D = PoseAwareDiscriminator(resolution, base_channels, 128, pose_hidden)
    opt = torch.optim.Adam(D.parameters(), lr=lr, betas=(0.9, 0.99))
    rng = np.random.default_rng(seed)
    history = []
    for step in range(steps):
        idx = rng.integers(0, n_train, batch_size)
        pred = D.predict_pose(D.extract_features(data.images(idx))).as_tensor(dtype=torch.float32)
        loss = F.mse_loss(pred, poses[idx], reduction="sum") / batch_size
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if (step + 1) % 100 == 0:
            history.append({"step": step + 1, "loss": loss.item()})
            log.info("pose head step %d loss %.5f", step + 1, loss.item())

    @torch.no_grad()
    def error(lo, hi):
        preds = [D.predict_pose(D.extract_features(data.images(np.arange(s, min(s + 256, hi))))).as_tensor(
            dtype=torch.float32) for s in range(lo, hi, 256)]
        return angle_l1(torch.cat(preds), poses[lo:hi])

    return {"train_l1": error(0, n_train), "test_l1": error(n_train, n_train + n_test), "steps": steps,
            "n_train": n_train, "history": history}


def self_inversion(checkpoint, n: int = 16, stage1_steps: int = 300, stage2_steps: int = 200, seed: int = 99,
                   mode: str = "A") -> dict:
    """Invert the generator's own samples; report pose L1 and PSNR after tuning."""
    from .field import sample_latents
    from .inversion import InversionConfig, invert
    from .trainer import load_models

    _, G, _ = load_models(checkpoint)
    z = sample_latents(n, G.latent_dim, torch.Generator().manual_seed(seed))
    cfg = InversionConfig(stage1_steps=stage1_steps, stage2_steps=stage2_steps, mode=mode)
    rows = []
    for i in range(n):
        with torch.no_grad():
            out = G.generate(z[i:i + 1])
        res = invert(out.image.image, G, cfg)
        err = angle_l1(res.pose.as_tensor(dtype=torch.float64), out.pose.as_tensor(dtype=torch.float64))
        rows.append({"pose_l1": err, "psnr": res.psnr})
        log.info("self-inversion %d: pose L1 %.4f rad, PSNR %.2f dB", i, err, res.psnr)
    return {"pose_l1": float(np.mean([r["pose_l1"] for r in rows])),
            "psnr": float(np.mean([r["psnr"] for r in rows])), "samples": rows, "mode": mode,
            "stage1_steps": stage1_steps, "stage2_steps": stage2_steps}


@torch.no_grad()
def flip_consistency(checkpoint, data_dir, n: int = 500) -> dict:
    """Mean |az(flip(I)) + az(I)| of the trained pose head on real images."""
    from .synthdata import TrainingImages
    from .trainer import load_models

    config, _, D = load_models(checkpoint)
    if D.pose_head is None:
        return {"flip_azimuth_sum": None}
    data = TrainingImages(data_dir, resolution=config.resolution, limit=n)
    images = data.images(np.arange(min(n, len(data))))
    az = D.predict_pose(D.extract_features(images)).azimuth
    az_flip = D.predict_pose(D.extract_features(images.flip(-1))).azimuth
    return {"flip_azimuth_sum": float((az + az_flip).abs().mean()), "azimuth_std": float(az.std())}


def final_metrics(checkpoint, data_dir, n_latents: int = 5000, n_real: int = 2000, n_reprojection: int = 16,
                  n_depth: int = 0, inversion_steps: int = 60, seed: int = 1234) -> dict:
    """Metric report of a trained checkpoint, optionally with inversion depth error."""
    from .evaluation import evaluate_models
    from .inversion import InversionConfig
    from .synthdata import TrainingImages, load_eval_records
    from .trainer import load_models

    config, G, D = load_models(checkpoint)
    records = load_eval_records(data_dir)
    n_real = min(n_real, len(records))
    images = TrainingImages(data_dir, resolution=config.resolution, limit=n_real).images(np.arange(n_real))
    true_poses = _true_poses(records[:n_real]).double().numpy()
    # depth is scored on records past the ones used for the pose histograms
    depth_records = records[-n_depth:] if n_depth else None
    inv = InversionConfig(stage1_steps=inversion_steps, stage2_steps=inversion_steps // 2, mean_samples=2000)
    report, _ = evaluate_models(G, D, images, true_poses, n_latents=n_latents, n_reprojection=n_reprojection,
                                depth_records=depth_records, depth_inversion=inv, bins=config.hist_bins, seed=seed)
    return report.as_dict()


def train_run(config: TrainConfig, data_dir, out_dir, evaluate: bool = True) -> dict:
    """Train (resuming if a checkpoint exists) and summarise the eval history."""
    from .config import save_config
    from .trainer import MetricLog, fit

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.ini")
    latest = out / "checkpoints" / "latest.safetensors"
    t0 = time.time()
    fit(config, data_dir, out, resume=latest if latest.exists() else None, evaluate=evaluate, progress=True)
    records = MetricLog(out / "metrics.log").read()
    losses = [r for r in records if r["kind"] == "loss"]
    loss_keys = [k for k in losses[0] if k not in ("kind", "step", "images")] if losses else []
    return {
        "checkpoint": str(latest),
        "steps": config.total_steps,
        "images_shown": config.total_steps * config.batch_size,
        "wall_seconds": time.time() - t0,
        "aborted": any(r["kind"] == "abort" for r in records),
        "losses_finite": all(math.isfinite(r[k]) for r in losses for k in loss_keys),
        "eval": [{k: r[k] for k in ("step", "images", "js_divergence", "reprojection_error",
                                    "reprojection_planar_baseline") if k in r}
                 for r in records if r["kind"] == "eval"],
    }


def run_desk(runs: Path, data_dir, config: TrainConfig, name: str = "desk", n_depth: int = 0) -> dict:
    summary = train_run(config, data_dir, runs / name)
    summary["final"] = final_metrics(summary["checkpoint"], data_dir, n_depth=n_depth)
    summary["flip"] = flip_consistency(summary["checkpoint"], data_dir)
    _write(runs / f"{name}.json", summary)
    return summary


def run_ablation(runs: Path, data_dir, config: TrainConfig, variant: str, n_depth: int = 32) -> dict:
    cfg = config.replace(**ABLATIONS[variant])
    summary = train_run(cfg, data_dir, runs / f"ablation_{variant}", evaluate=False)
    summary["final"] = final_metrics(summary["checkpoint"], data_dir, n_depth=n_depth)
    _write(runs / f"ablation_{variant}.json", summary)
    return summary


def rescore(runs: Path, data_dir, name: str, n_depth: int) -> dict:
    """Recompute the final metrics of a finished run and update its summary."""
    path = runs / f"{name}.json"
    summary = json.loads(path.read_text())
    summary["final"] = final_metrics(summary["checkpoint"], data_dir, n_depth=n_depth)
    _write(path, summary)
    return summary


def run_lr_sensitivity(runs: Path, data_dir, config: TrainConfig, steps: int = 2000) -> dict:
    out = {}
    for name, lr in (("default", config.lr_pose_learner), ("high", 2.5e-4)):
        cfg = config.replace(lr_pose_learner=lr, total_images=steps * config.batch_size,
                             eval_every=max(steps // 8, 1), checkpoint_every=max(steps // 4, 1))
        summary = train_run(cfg, data_dir, runs / f"lr_{name}")
        summary["final"] = final_metrics(summary["checkpoint"], data_dir, n_reprojection=0)
        summary["lr_pose_learner"] = lr
        out[name] = summary
    _write(runs / "lr_sensitivity.json", out)
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m posefree3d.experiments")
    p.add_argument("name", choices=("pose-head", "desk", "ablation", "lr", "self-inversion", "smoke", "rescore"))
    p.add_argument("--runs", required=True, help="directory for run outputs and JSON summaries")
    p.add_argument("--data", help="dataset directory (manifest.json)")
    p.add_argument("--config", default=str(SHIPPED / "desk.ini"))
    p.add_argument("--variant", choices=tuple(ABLATIONS), default="full")
    p.add_argument("--run", help="summary name for rescore, e.g. desk or ablation_no_symmetry")
    p.add_argument("--checkpoint", help="checkpoint for self-inversion (default: the desk run)")
    p.add_argument("--depth-images", type=int, default=128)
    p.add_argument("--steps", type=int, default=2000)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    runs = Path(args.runs)
    config = load_config(args.config)
    if args.name == "pose-head":
        _write(runs / "pose_head.json", supervised_pose_head(args.data, steps=args.steps))
    elif args.name == "desk":
        run_desk(runs, args.data, config, n_depth=args.depth_images)
    elif args.name == "ablation":
        run_ablation(runs, args.data, config, args.variant, n_depth=args.depth_images)
    elif args.name == "lr":
        run_lr_sensitivity(runs, args.data, config, steps=args.steps)
    elif args.name == "smoke":
        cfg = config.replace(total_images=args.steps * config.batch_size, eval_every=max(args.steps // 4, 1),
                             checkpoint_every=args.steps)
        summary = train_run(cfg, args.data, runs / "smoke", evaluate=False)
        _write(runs / "smoke.json", summary)
    elif args.name == "rescore":
        rescore(runs, args.data, args.run, args.depth_images)
    elif args.name == "self-inversion":
        ckpt = args.checkpoint or runs / "desk" / "checkpoints" / "latest.safetensors"
        _write(runs / "self_inversion.json", self_inversion(ckpt))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
