"""Metrics with synthetic ground truth: pose-distribution JS divergence,
mean-aligned pose error, depth error and reprojection error."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .camera import CameraIntrinsics, CameraPose, camera_frame, generate_rays, warp_image
from .field import sample_latents
from .generator import PoseFreeGenerator

REPROJECTION_SPAN = math.radians(23.0)
REPROJECTION_VIEWS = 5


def _pose_array(poses) -> np.ndarray:
    if isinstance(poses, CameraPose):
        poses = poses.as_tensor()
    if isinstance(poses, torch.Tensor):
        poses = poses.detach().cpu().double().numpy()
    arr = np.asarray(poses, dtype=np.float64).reshape(-1, 2)
    return arr


# ---------------------------------------------------------------------------
# histograms and divergence


@dataclass
class PoseHistogram:
    azimuth_edges: np.ndarray
    elevation_edges: np.ndarray
    azimuth: np.ndarray  # normalized counts
    elevation: np.ndarray
    mean: tuple = (0.0, 0.0)  # per-angle means before any alignment
    count: int = 0


def pose_histogram(poses, max_azimuth: float, max_elevation: float, bins: int = 60,
                   mean_align: bool = True) -> PoseHistogram:
    """Histogram both angles over [-span, span]; out-of-range values fall into the end bins."""
    arr = _pose_array(poses)
    if arr.shape[0] == 0:
        raise ValueError("cannot histogram an empty pose set")
    mean = arr.mean(axis=0)
    vals = arr - mean if mean_align else arr
    out = []
    for col, span in ((0, max_azimuth), (1, max_elevation)):
        edges = np.linspace(-span, span, bins + 1)
        counts, _ = np.histogram(np.clip(vals[:, col], -span, span), bins=edges)
        out.append((edges, counts / counts.sum()))
    return PoseHistogram(out[0][0], out[1][0], out[0][1], out[1][1], (float(mean[0]), float(mean[1])), arr.shape[0])


def _js(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float((a[nz] * np.log2(a[nz] / m[nz])).sum())

    return 0.5 * kl(p) + 0.5 * kl(q)


def js_divergence(p: PoseHistogram, q: PoseHistogram) -> float:
    """Base-2 Jensen-Shannon divergence averaged over azimuth and elevation."""
    if not (np.array_equal(p.azimuth_edges, q.azimuth_edges) and np.array_equal(p.elevation_edges, q.elevation_edges)):
        raise ValueError("histograms must share binning")
    return 0.5 * (_js(p.azimuth, q.azimuth) + _js(p.elevation, q.elevation))


def js_from_probabilities(p: Sequence[float], q: Sequence[float]) -> float:
    return _js(np.asarray(p), np.asarray(q))


# ---------------------------------------------------------------------------
# pose error


def pose_error(predicted, reference) -> float:
    """Mean absolute angular error after subtracting each batch's per-angle mean.

    Averaged over samples and over the two angles.
    """
    a = _pose_array(predicted)
    b = _pose_array(reference)
    if a.shape[0] == 0:
        raise ValueError("empty pose batch")
    if a.shape != b.shape:
        raise ValueError("pose batches must be paired")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    return float(np.abs(a - b).mean())


# ---------------------------------------------------------------------------
# depth error


class DepthModel(Protocol):
    def __call__(self, record) -> torch.Tensor: ...


@dataclass
class DepthErrorResult:
    error: float
    evaluated: int
    skipped: int


def aligned_depth_mse(pred: torch.Tensor, truth: torch.Tensor, min_foreground: float = 0.01) -> float | None:
    """MSE on foreground pixels after scaling ``pred`` to match the ground-truth median.

    Foreground is where the ground truth is positive. Returns None when the
    foreground covers less than ``min_foreground`` of the image.
    """
    pred = pred.double()
    truth = truth.double()
    mask = truth > 0
    if mask.float().mean().item() < min_foreground:
        return None
    p, t = pred[mask], truth[mask]
    med_p = p.median()
    scale = t.median() / med_p if med_p > 0 else torch.ones((), dtype=torch.float64)
    return float(((p * scale - t) ** 2).mean())


def depth_error(model: DepthModel, records, n_samples: int | None = None) -> DepthErrorResult:
    """Average median-aligned foreground depth MSE of ``model(record)`` against the record's depth."""
    records = list(records)[: n_samples or None]
    errs, skipped = [], 0
    for rec in records:
        e = aligned_depth_mse(model(rec), rec.load_depth())
        if e is None:
            skipped += 1
        else:
            errs.append(e)
    return DepthErrorResult(float(np.mean(errs)) if errs else float("nan"), len(errs), skipped)


def planar_depth(pose: CameraPose, intrinsics: CameraIntrinsics, dtype=torch.float64) -> torch.Tensor:
    """Per-pixel ray distance to the plane through the origin facing the camera."""
    rays = generate_rays(pose, intrinsics, dtype=dtype)
    _, _, back, _ = camera_frame(pose, intrinsics, dtype=dtype)
    cos = -(rays.directions * back.reshape(back.shape[:-1] + (1, 1, 3))).sum(-1)
    return intrinsics.orbit_radius / cos


def ground_truth_depth_model(record):
    return record.load_depth()


def flat_plane_depth_model(intrinsics: CameraIntrinsics):
    def model(record):
        return planar_depth(record.pose, intrinsics)

    return model


def inversion_depth_model(generator: PoseFreeGenerator, inversion_config=None, output_resolution: int | None = None):
    """Depth of the generator fitted to each record's image by inversion."""
    from .inversion import invert

    res = generator.intrinsics.image_resolution

    def model(record):
        image = record.load_image().unsqueeze(0)
        if image.shape[-1] != res:
            image = torch.nn.functional.interpolate(image, size=(res, res), mode="area")
        result = invert(image, generator, inversion_config)
        out_res = output_resolution or record.load_depth().shape[-1]
        gen = result.generator
        old = gen.intrinsics
        gen.intrinsics = old.with_resolution(out_res)
        try:
            with torch.no_grad():
                depth = gen.synthesize(result.style, result.pose).depth[0]
        finally:
            gen.intrinsics = old
        return depth

    return model


# ---------------------------------------------------------------------------
# reprojection error


class ViewModel(Protocol):
    intrinsics: CameraIntrinsics

    def base_pose(self, key) -> CameraPose: ...

    def render_view(self, key, pose: CameraPose): ...


class GeneratorViews:
    """Adapter: keys are latent codes; the base pose is the learned one."""

    def __init__(self, generator: PoseFreeGenerator):
        self.generator = generator
        self.intrinsics = generator.intrinsics

    @torch.no_grad()
    def base_pose(self, z) -> CameraPose:
        p = self.generator.pose_learner(self.generator.map_latent(z.reshape(1, -1))).as_tensor()[0]
        return CameraPose(float(p[0]), float(p[1]))

    @torch.no_grad()
    def render_view(self, z, pose: CameraPose):
        out = self.generator.generate_at(z.reshape(1, -1), pose)
        return out.image[0], out.depth[0], out.alpha[0]


class PlanarDepthViews:
    """Same images as the wrapped model, but every depth map is a fronto-parallel plane."""

    def __init__(self, inner):
        self.inner = inner
        self.intrinsics = inner.intrinsics

    def base_pose(self, key):
        return self.inner.base_pose(key)

    def render_view(self, key, pose):
        image, depth, alpha = self.inner.render_view(key, pose)
        return image, planar_depth(pose, self.intrinsics).to(depth.dtype), alpha


def masked_mse(a, b, valid) -> float | None:
    if not bool(valid.any()):
        return None
    diff = (a.double() - b.double()).square().mean(0)
    return float(diff[valid].mean())


def reprojection_error(model: ViewModel, keys, n_views: int = REPROJECTION_VIEWS, span: float = REPROJECTION_SPAN,
                       depth_tolerance: float = 0.05, alpha_threshold: float = 0.5) -> float:
    """Mean masked MSE of consecutive-view warps, both directions, over the keys.

    Views sweep the azimuth uniformly over [-span, span] around each key's
    base pose. Each warp scores the masked MSE over its valid pixels; warps
    with no valid pixel are skipped.
    """
    from .inversion import azimuth_sweep

    errs = []
    intr = model.intrinsics
    for key in keys:
        poses = azimuth_sweep(model.base_pose(key), n_views, span)
        views = [model.render_view(key, p) for p in poses]
        for i in range(n_views - 1):
            for s, t in ((i, i + 1), (i + 1, i)):
                img_s, dep_s, alp_s = views[s]
                img_t, dep_t, alp_t = views[t]
                warped, valid = warp_image(img_s, dep_s, poses[s], poses[t], intr, dep_t,
                                           source_alpha=alp_s, target_alpha=alp_t, depth_tolerance=depth_tolerance,
                                           alpha_threshold=alpha_threshold)
                e = masked_mse(warped, img_t, valid)
                if e is not None:
                    errs.append(e)
    return float(np.mean(errs)) if errs else float("nan")


# ---------------------------------------------------------------------------
# pose distributions


@torch.no_grad()
def generator_poses(generator: PoseFreeGenerator, n: int, seed: int = 0, chunk: int = 4096) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    out = []
    dtype = next(generator.parameters()).dtype
    for start in range(0, n, chunk):
        z = sample_latents(min(chunk, n - start), generator.latent_dim, g, dtype=dtype)
        out.append(generator.pose_learner(generator.map_latent(z)).as_tensor())
    return torch.cat(out)


@torch.no_grad()
def discriminator_poses(discriminator, images: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    if discriminator.pose_head is None:
        raise ValueError("discriminator has no pose head")
    out = []
    for start in range(0, images.shape[0], chunk):
        feats = discriminator.extract_features(images[start:start + chunk])
        out.append(discriminator.predict_pose(feats).as_tensor())
    return torch.cat(out)


@dataclass
class PoseDistributions:
    generator: PoseHistogram
    discriminator: PoseHistogram | None
    dataset: PoseHistogram

    def divergences(self) -> dict:
        out = {"js_generator": js_divergence(self.generator, self.dataset)}
        if self.discriminator is not None:
            out["js_discriminator"] = js_divergence(self.discriminator, self.dataset)
            out["js_generator_vs_discriminator"] = js_divergence(self.generator, self.discriminator)
        return out


def collect_pose_distributions(generator, discriminator, images: torch.Tensor, true_poses, n: int,
                               max_azimuth: float, max_elevation: float, bins: int = 60, seed: int = 0,
                               mean_align: bool = True) -> PoseDistributions:
    """Histograms of generator-inferred, discriminator-predicted and true poses.

    ``images`` are dataset images (pixels only); ``true_poses`` are their
    labels, used solely for the dataset histogram.
    """
    kw = dict(max_azimuth=max_azimuth, max_elevation=max_elevation, bins=bins, mean_align=mean_align)
    g = pose_histogram(generator_poses(generator, n, seed), **kw)
    d = None
    if discriminator is not None and discriminator.pose_head is not None:
        d = pose_histogram(discriminator_poses(discriminator, images), **kw)
    return PoseDistributions(g, d, pose_histogram(true_poses, **kw))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    js_divergence: float
    pose_error: float | None = None
    depth_error: float | None = None
    reprojection_error: float | None = None
    reprojection_planar_baseline: float | None = None
    js_discriminator: float | None = None
    js_generator_vs_discriminator: float | None = None
    generator_pose_mean: tuple | None = None
    generator_pose_std: tuple | None = None
    n_latents: int = 0
    n_real: int = 0
    n_depth: int = 0
    fid: float | None = None  # not computed; needs external classifier weights

    def as_dict(self) -> dict:
        return asdict(self)


COLUMNS = ("js_divergence", "pose_error", "depth_error", "reprojection_error", "reprojection_planar_baseline",
           "js_discriminator", "js_generator_vs_discriminator")


def format_table(report: MetricReport) -> str:
    d = report.as_dict()
    lines = [f"{'metric':<32}{'value':>14}"]
    for key in COLUMNS:
        v = d[key]
        lines.append(f"{key:<32}{('-' if v is None else f'{v:.6f}'):>14}")
    lines.append(f"{'n_latents':<32}{report.n_latents:>14d}")
    lines.append(f"{'n_real':<32}{report.n_real:>14d}")
    lines.append(f"{'n_depth':<32}{report.n_depth:>14d}")
    return "\n".join(lines)


def evaluate_models(generator: PoseFreeGenerator, discriminator, images: torch.Tensor, true_poses, *,
                    n_latents: int = 2000, n_reprojection: int = 8, depth_records=None, depth_inversion=None,
                    bins: int = 60, seed: int = 1234) -> tuple[MetricReport, PoseDistributions]:
    spans = generator.pose_learner.spans.tolist()
    dists = collect_pose_distributions(generator, discriminator, images, true_poses, n_latents, spans[0], spans[1],
                                       bins, seed)
    div = dists.divergences()
    gp = generator_poses(generator, n_latents, seed).double()
    report = MetricReport(
        js_divergence=div["js_generator"],
        js_discriminator=div.get("js_discriminator"),
        js_generator_vs_discriminator=div.get("js_generator_vs_discriminator"),
        generator_pose_mean=tuple(gp.mean(0).tolist()),
        generator_pose_std=tuple(gp.std(0).tolist()),
        n_latents=n_latents,
        n_real=int(images.shape[0]),
    )
    if discriminator is not None and discriminator.pose_head is not None:
        report.pose_error = pose_error(discriminator_poses(discriminator, images), true_poses)
    if n_reprojection > 0:
        g = torch.Generator().manual_seed(seed + 1)
        zs = sample_latents(n_reprojection, generator.latent_dim, g, dtype=next(generator.parameters()).dtype)
        views = GeneratorViews(generator)
        report.reprojection_error = reprojection_error(views, zs)
        report.reprojection_planar_baseline = reprojection_error(PlanarDepthViews(views), zs)
    if depth_records:
        res = depth_error(inversion_depth_model(generator, depth_inversion), depth_records)
        report.depth_error = res.error
        report.n_depth = res.evaluated
    return report, dists


def evaluate_snapshot(trainer, data, records) -> dict:
    """Evaluate the trainer's EMA generator and discriminator on the dataset."""
    cfg = trainer.config
    n_real = min(cfg.eval_real_images, len(records))
    idx = np.arange(n_real)
    images = data.images(idx)
    true_poses = np.array([[float(records[i].pose.azimuth), float(records[i].pose.elevation)] for i in idx])
    depth_records = records[:cfg.eval_depth_images] if cfg.eval_depth_images else None
    was_training = trainer.D.training
    trainer.D.eval()
    try:
        report, _ = evaluate_models(trainer.G_ema, trainer.D, images, true_poses, n_latents=cfg.eval_latents,
                                    n_reprojection=cfg.eval_reprojection_latents, depth_records=depth_records,
                                    bins=cfg.hist_bins)
    finally:
        trainer.D.train(was_training)
    return report.as_dict()


def plot_pose_distributions(dists: PoseDistributions, path, title: str = ""):
    """Overlay the three histograms per angle and save as PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for ax, key, edges_key, label in ((axes[0], "azimuth", "azimuth_edges", "azimuth (rad)"),
                                      (axes[1], "elevation", "elevation_edges", "elevation (rad)")):
        for name, h in (("dataset", dists.dataset), ("generator", dists.generator), ("discriminator", dists.discriminator)):
            if h is None:
                continue
            edges = getattr(h, edges_key)
            ax.stairs(getattr(h, key), edges, label=name)
        ax.set_xlabel(label + " (mean-aligned)")
        ax.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
