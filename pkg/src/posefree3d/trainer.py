"""Alternating adversarial optimisation, EMA, checkpointing and metric logs.

Metric log (``metrics.log``) is line-delimited JSON. Each line is one of::

    {"kind": "loss", "step": int, "images": int, <LossReport fields>}
    {"kind": "eval", "step": int, "images": int, <MetricReport fields>}
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from pathlib import Path

import torch

from .camera import CameraPose
from .checkpoint import load_checkpoint, read_metadata, save_checkpoint
from .config import TrainConfig
from .discriminator import PoseAwareDiscriminator
from .field import sample_latents
from .generator import PoseFreeGenerator
from .losses import (
    LossReport,
    NonFiniteLossError,
    d_adv_from_logits,
    ensure_finite,
    g_adv_from_logits,
    gradient_penalty,
    pose_loss,
    symmetric_views,
    totals,
)

log = logging.getLogger(__name__)


def build_generator(config: TrainConfig) -> PoseFreeGenerator:
    return PoseFreeGenerator(
        config.intrinsics(),
        latent_dim=config.latent_dim,
        style_dim=config.style_dim,
        pose_hidden_dim=config.pose_hidden,
        max_azimuth=config.max_azimuth,
        max_elevation=config.max_elevation,
        n_samples=config.n_samples,
        background=config.background,
        mapping_layers=config.mapping_layers,
        backbone=config.backbone,
        hidden_dim=config.field_hidden,
        n_layers=config.field_layers,
        n_bands=config.n_bands,
        view_dependent=config.view_dependent,
        density_scale=config.density_scale,
        triplane_channels=config.triplane_channels,
        triplane_res=config.triplane_res,
    )


def build_discriminator(config: TrainConfig) -> PoseAwareDiscriminator:
    return PoseAwareDiscriminator(
        config.resolution,
        config.d_base_channels,
        config.d_max_channels,
        config.d_pose_hidden,
        config.max_azimuth,
        config.max_elevation,
        pose_aware=config.pose_aware_d_enabled,
        pose_condition=config.pose_condition_enabled,
    )


def param_groups(named_params, lr: float, equalized: bool, multipliers: dict | None = None) -> list[dict]:
    """Adam parameter groups, one per tensor.

    With ``equalized`` each weight tensor (ndim >= 2) gets lr / sqrt(fan_in).
    Because Adam normalises the gradient scale, this moves parameters exactly
    as equalized-learning-rate layers would (up to eps). ``multipliers`` maps
    name prefixes to extra rate factors.
    """
    groups = []
    for name, p in named_params:
        rate = lr
        for prefix, mult in (multipliers or {}).items():
            if name.startswith(prefix):
                rate *= mult
        if equalized and p.dim() >= 2:
            rate /= math.sqrt(p[0].numel())
        groups.append({"params": [p], "lr": rate, "name": name})
    return groups


def _cat_poses(a: CameraPose, b: CameraPose) -> CameraPose:
    return CameraPose.from_tensor(torch.cat([a.as_tensor(), b.as_tensor()]))


class Trainer:
    """Owns G, D, the EMA copy of G, both optimizers and the sampling RNG."""

    def __init__(self, config: TrainConfig):
        self.config = config.validate()
        torch.manual_seed(config.seed)
        self.G = build_generator(config)
        self.D = build_discriminator(config)
        self.G_ema = copy.deepcopy(self.G).eval().requires_grad_(False)
        betas = (config.adam_beta1, config.adam_beta2)
        field = [(n, p) for n, p in self.G.named_parameters() if not n.startswith("pose_learner.")]
        mapping = {"field.mapping.": config.mapping_lr_multiplier}
        self.opt_g = torch.optim.Adam(
            param_groups(field, config.lr_generator, config.equalized_lr, mapping)
            + param_groups(self.G.pose_learner.named_parameters(prefix="pose_learner"), config.lr_pose_learner,
                           config.equalized_pose_lr),
            betas=betas,
            eps=1e-8,
        )
        self.opt_d = torch.optim.Adam(param_groups(self.D.named_parameters(), config.lr_discriminator,
                                                   config.equalized_lr), betas=betas, eps=1e-8)
        self.rng = torch.Generator().manual_seed(config.seed + 1)
        self.step = 0
        self.last_checkpoint: str | None = None

    @property
    def images_seen(self) -> int:
        return self.step * self.config.batch_size

    # -- one iteration -----------------------------------------------------

    def _fakes(self):
        cfg = self.config
        z = sample_latents(cfg.batch_size, cfg.latent_dim, self.rng)
        out = self.G.generate(z, stratified=cfg.stratified, generator=self.rng)
        images, poses = out.image.image, out.pose
        if cfg.symmetry_enabled:
            sym, mirrored = symmetric_views(self.G, z, cfg.stratified, self.rng, w=out.style, pose=out.pose)
            images = torch.cat([images, sym.image])
            poses = _cat_poses(poses, mirrored)
        return images, poses

    def train_step(self, real: torch.Tensor) -> LossReport:
        """One discriminator update followed by one generator update.

        Real images contribute pixels only; nothing about their pose is read.
        """
        cfg = self.config
        b = cfg.batch_size
        if real.shape[0] != b:
            raise ValueError(f"expected a real batch of {b}, got {real.shape[0]}")
        report = LossReport()
        fakes, fake_poses = self._fakes()

        # discriminator
        self.D.requires_grad_(True)
        do_r1 = cfg.penalty_weight > 0 and self.step % cfg.r1_interval == 0
        real_in = real.detach().requires_grad_(do_r1)
        real_out = self.D.criticize(real_in, detach_condition=True)
        fake_out = self.D.criticize(fakes.detach(), detach_condition=True)
        d_adv = d_adv_from_logits(real_out.score, fake_out.score[:b])
        loss_d = d_adv
        report.d_adv = d_adv.item()
        if cfg.symmetry_enabled:
            d_sym = d_adv_from_logits(real_out.score, fake_out.score[b:])
            loss_d = loss_d + d_sym
            report.d_adv_sym = d_sym.item()
        if do_r1:
            pen = gradient_penalty(real_in, real_out.score)
            loss_d = loss_d + cfg.penalty_weight * cfg.r1_interval * pen
            report.d_grad_penalty = pen.item()
        if cfg.pose_aware_d_enabled:
            n = fakes.shape[0] if cfg.symmetric_pose_loss else b
            target = fake_poses.detach()[:n]
            lp = pose_loss(fake_out.predicted_pose[:n], target)
            loss_d = loss_d + cfg.pose_weight * lp
            report.pose_loss = lp.item()
        ensure_finite("discriminator loss", loss_d)
        self.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt_d.step()

        # generator
        self.D.requires_grad_(False)
        g_out = self.D.criticize(fakes)
        g_adv = g_adv_from_logits(g_out.score[:b], cfg.saturating_g)
        loss_g = g_adv
        report.g_adv = g_adv.item()
        if cfg.symmetry_enabled:
            g_sym = g_adv_from_logits(g_out.score[b:], cfg.saturating_g)
            loss_g = loss_g + g_sym
            report.g_adv_sym = g_sym.item()
        ensure_finite("generator loss", loss_g)
        self.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        self.opt_g.step()
        self.D.requires_grad_(True)

        self._update_ema()
        self.step += 1
        report.total_g, report.total_d = totals(
            report, cfg.pose_weight, cfg.penalty_weight, cfg.symmetry_enabled, cfg.pose_aware_d_enabled,
            penalty_scale=cfg.r1_interval,
        )
        if not all(math.isfinite(v) for v in report.as_dict().values()):
            raise NonFiniteLossError(f"non-finite loss at step {self.step}; last good checkpoint: {self.last_checkpoint}")
        return report

    @torch.no_grad()
    def _update_ema(self):
        cfg = self.config
        halflife = cfg.ema_halflife_images
        if cfg.ema_rampup > 0:
            halflife = min(halflife, (self.step + 1) * cfg.batch_size * cfg.ema_rampup)
        beta = 0.5 ** (cfg.batch_size / max(halflife, 1e-8))
        for p_ema, p in zip(self.G_ema.parameters(), self.G.parameters()):
            p_ema.lerp_(p, 1 - beta)
        for b_ema, b in zip(self.G_ema.buffers(), self.G.buffers()):
            b_ema.copy_(b)

    # -- persistence -------------------------------------------------------

    def _modules(self):
        return {"G": self.G, "G_ema": self.G_ema, "D": self.D}

    def _optimizers(self):
        return {"opt_g": self.opt_g, "opt_d": self.opt_d}

    def save(self, path):
        payload = {"config": self.config.to_dict(), "step": self.step, "images_seen": self.images_seen}
        save_checkpoint(path, self._modules(), self._optimizers(), self.rng, payload)
        self.last_checkpoint = str(path)

    @classmethod
    def from_checkpoint(cls, path, config: TrainConfig | None = None) -> "Trainer":
        payload = read_metadata(path)
        trainer = cls(config or TrainConfig.from_dict(payload["config"]))
        payload = load_checkpoint(path, trainer._modules(), trainer._optimizers(), trainer.rng)
        trainer.step = int(payload["step"])
        trainer.last_checkpoint = str(path)
        return trainer

    def initialize_from(self, path):
        """Copy G, G_ema and D weights from a checkpoint; step and optimizer state start fresh."""
        load_checkpoint(path, self._modules())
        return self


def load_models(path):
    """Load ``(config, G_ema, D)`` from a checkpoint for inference."""
    payload = read_metadata(path)
    config = TrainConfig.from_dict(payload["config"])
    G = build_generator(config)
    D = build_discriminator(config)
    G_raw = build_generator(config)
    load_checkpoint(path, {"G_ema": G, "D": D, "G": G_raw})
    return config, G.eval().requires_grad_(False), D.eval().requires_grad_(False)


class MetricLog:
    def __init__(self, path):
        self.path = Path(path)

    def write(self, record: dict):
        with open(self.path, "a") as f:
            f.write(json.dumps(record) + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path) as f:
            return [json.loads(line) for line in f if line.strip()]


def fit(config: TrainConfig, data_dir, out_dir, resume=None, evaluate=True, max_steps: int | None = None,
        progress: bool = False, init_from=None):
    """Train until ``config.total_images`` images have been shown.

    ``init_from`` starts from another run's weights (fine-tuning on a new
    dataset). Writes ``checkpoints/`` and ``metrics.log`` under ``out_dir``; returns
    ``(trainer, history)`` where history is the list of eval records.
    """
    from .evaluation import evaluate_snapshot
    from .synthdata import TrainingImages, load_eval_records, manifest_intrinsics, read_manifest

    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics = MetricLog(out / "metrics.log")
    trainer = Trainer.from_checkpoint(resume, config) if resume else Trainer(config)
    if init_from is not None and not resume:
        trainer.initialize_from(init_from)
    data = TrainingImages(data_dir, resolution=config.resolution)
    eval_records = load_eval_records(data_dir) if evaluate else None
    if evaluate:
        manifest, _ = read_manifest(data_dir)
        dataset_intrinsics = manifest_intrinsics(manifest)
        if abs(dataset_intrinsics.field_of_view - config.intrinsics().field_of_view) > 1e-9:
            log.warning("dataset field of view differs from the training config")
    history = [r for r in metrics.read() if r.get("kind") == "eval" and r["step"] <= trainer.step]
    end = config.total_steps if max_steps is None else min(config.total_steps, trainer.step + max_steps)
    t0 = time.time()

    def run_eval():
        rec = evaluate_snapshot(trainer, data, eval_records)
        rec.update(kind="eval", step=trainer.step, images=trainer.images_seen)
        metrics.write(rec)
        history.append(rec)
        if progress:
            log.info("eval step %d: %s", trainer.step, {k: v for k, v in rec.items() if isinstance(v, float)})

    while trainer.step < end:
        real = data.batch(trainer.step, config.batch_size, config.seed)
        try:
            report = trainer.train_step(real)
        except NonFiniteLossError as exc:
            metrics.write({"kind": "abort", "step": trainer.step, "reason": str(exc),
                           "last_checkpoint": trainer.last_checkpoint})
            raise
        if trainer.step % config.log_every == 0 or trainer.step == end:
            metrics.write({"kind": "loss", "step": trainer.step, "images": trainer.images_seen, **report.as_dict()})
            if progress:
                log.info("step %d (%.1fs) %s", trainer.step, time.time() - t0,
                         " ".join(f"{k}={v:.3f}" for k, v in report.as_dict().items()))
        if evaluate and (trainer.step % config.eval_every == 0 or trainer.step == config.total_steps):
            run_eval()
        if trainer.step % config.checkpoint_every == 0 or trainer.step == end:
            path = out / "checkpoints" / f"step_{trainer.step:07d}.safetensors"
            trainer.save(path)
            trainer.save(out / "checkpoints" / "latest.safetensors")
    return trainer, history
