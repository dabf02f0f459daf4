"""Procedural scenes with known camera poses and depth.

Layout of a generated dataset directory::

    images/NNNNNN.png   8-bit RGB
    depth/NNNNNN.f32    16-byte header + float32 little-endian H*W
    manifest.json       spec, intrinsics and one record per image

Depth file header: magic ``b"DPTH"``, then three little-endian uint32s
(format version, height, width). Depth is the distance from the camera
center along the unit pixel ray, and 0 on background pixels.

Scenes are mirror-symmetric about the yz-plane and lit from a direction
inside that plane, so a mirrored camera sees a horizontally flipped image.
"""
from __future__ import annotations

import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .camera import CameraIntrinsics, CameraPose, generate_rays

DEPTH_MAGIC = b"DPTH"
DEPTH_VERSION = 1
MANIFEST_VERSION = 1


@dataclass
class AngleDistribution:
    kind: str = "normal"  # "normal" or "uniform"
    mean: float = 0.0
    std: float = 0.3
    low: float = -0.9
    high: float = 0.9

    def validate(self, limit: float, name: str):
        if self.kind not in ("normal", "uniform"):
            raise ValueError(f"{name}: unknown distribution {self.kind!r}")
        if not (-limit <= self.low < self.high <= limit):
            raise ValueError(f"{name}: bounds [{self.low}, {self.high}] outside legal range +-{limit}")
        if self.kind == "normal" and self.std <= 0:
            raise ValueError(f"{name}: std must be positive")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        while True:
            v = rng.normal(self.mean, self.std)
            if self.low <= v <= self.high:
                return float(v)

    def bin_probabilities(self, edges: np.ndarray) -> np.ndarray:
        """Exact probability mass of each histogram bin under this distribution."""
        from scipy import stats

        if self.kind == "uniform":
            cdf = np.clip((edges - self.low) / (self.high - self.low), 0, 1)
        else:
            a = (self.low - self.mean) / self.std
            b = (self.high - self.mean) / self.std
            cdf = stats.truncnorm.cdf(edges, a, b, loc=self.mean, scale=self.std)
        return np.diff(cdf)


@dataclass
class SceneSpec:
    name: str = "faces-proxy"
    kind: str = "faces"  # "faces" or "cars"
    count: int = 10000
    resolution: int = 64
    seed: int = 0
    azimuth: AngleDistribution = field(default_factory=lambda: AngleDistribution("normal", 0.0, 0.3, -0.9, 0.9))
    elevation: AngleDistribution = field(default_factory=lambda: AngleDistribution("normal", 0.0, 0.155, -0.45, 0.45))
    light_direction: tuple = (0.0, 0.5, 1.0)
    ambient: float = 0.35
    supersample: int = 2
    front_marker: bool = True
    fov_degrees: float = 30.0
    near: float = 2.25
    far: float = 3.3
    orbit_radius: float = 2.7
    # albedo ranges (RGB lows and highs)
    skin_low: tuple = (0.55, 0.35, 0.25)
    skin_high: tuple = (0.95, 0.75, 0.6)
    hair_low: tuple = (0.05, 0.03, 0.02)
    hair_high: tuple = (0.6, 0.45, 0.3)

    def __post_init__(self):
        if isinstance(self.azimuth, dict):
            self.azimuth = AngleDistribution(**self.azimuth)
        if isinstance(self.elevation, dict):
            self.elevation = AngleDistribution(**self.elevation)
        self.light_direction = tuple(self.light_direction)
        for key in ("skin_low", "skin_high", "hair_low", "hair_high"):
            setattr(self, key, tuple(getattr(self, key)))

    def validate(self):
        if self.kind not in ("faces", "cars"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.count < 1 or self.resolution < 4 or self.supersample < 1:
            raise ValueError("count, resolution and supersample must be positive")
        self.azimuth.validate(math.pi, "azimuth")
        self.elevation.validate(math.pi / 2 - 1e-3, "elevation")
        if abs(self.light_direction[0]) > 0:
            raise ValueError("light direction must lie in the yz-plane to keep scenes mirror-symmetric")
        self.intrinsics()

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(math.radians(self.fov_degrees), self.resolution, self.near, self.far, self.orbit_radius)

    def to_dict(self) -> dict:
        return asdict(self)


def faces_proxy(count: int = 10000, resolution: int = 64, seed: int = 0) -> SceneSpec:
    return SceneSpec(name="faces-proxy", kind="faces", count=count, resolution=resolution, seed=seed)


def cars_proxy(count: int = 10000, resolution: int = 64, seed: int = 0) -> SceneSpec:
    return SceneSpec(
        name="cars-proxy",
        kind="cars",
        count=count,
        resolution=resolution,
        seed=seed,
        azimuth=AngleDistribution("uniform", 0.0, 1.0, -math.pi / 2, math.pi / 2),
        elevation=AngleDistribution("uniform", 0.0, 1.0, 0.05, 0.5),
        skin_low=(0.1, 0.1, 0.1),
        skin_high=(0.9, 0.9, 0.9),
    )


PRESETS = {"faces-proxy": faces_proxy, "cars-proxy": cars_proxy}


# ---------------------------------------------------------------------------
# analytic scenes


def _uniform(rng, low, high):
    return rng.uniform(np.asarray(low), np.asarray(high)).tolist()


def sample_scene(spec: SceneSpec, rng: np.random.Generator) -> list[dict]:
    """Primitive list for one subject; every primitive is mirror-symmetric in x or has a mirrored twin."""
    if spec.kind == "faces":
        return _face_scene(spec, rng)
    return _car_scene(spec, rng)


def _face_scene(spec, rng):
    rx, ry, rz = rng.uniform(0.30, 0.35), rng.uniform(0.36, 0.42), rng.uniform(0.30, 0.34)
    skin = _uniform(rng, spec.skin_low, spec.skin_high)
    hair = _uniform(rng, spec.hair_low, spec.hair_high)
    eye = _uniform(rng, (0.0, 0.0, 0.1), (0.2, 0.35, 0.6))
    prims = [
        {"shape": "ellipsoid", "center": [0.0, 0.0, 0.0], "size": [rx, ry, rz], "color": skin},
        # hair cap sits behind and above, so the back of the head differs from the front
        {"shape": "ellipsoid", "center": [0.0, 0.06, -0.05], "size": [rx * 1.04, ry * 0.95, rz * 0.97], "color": hair},
    ]

    def surface_z(x, y):
        return rz * math.sqrt(max(1 - (x / rx) ** 2 - (y / ry) ** 2, 0.0))

    er = rng.uniform(0.035, 0.05)
    ex, ey = rng.uniform(0.09, 0.13), rng.uniform(0.05, 0.1)
    for sx in (-1, 1):
        prims.append({"shape": "ellipsoid", "center": [sx * ex, ey, surface_z(ex, ey) - 0.5 * er],
                      "size": [er, er, er], "color": eye})
    if spec.front_marker:
        nl = rng.uniform(0.06, 0.09)
        nz = surface_z(0.0, -0.03)
        prims.append({"shape": "ellipsoid", "center": [0.0, -0.03, nz], "size": [0.045, 0.07, nl],
                      "color": [min(c * 0.9 + 0.08, 1.0) for c in skin]})
    my = rng.uniform(-0.2, -0.15)
    prims.append({"shape": "ellipsoid", "center": [0.0, my, surface_z(0.0, my) - 0.01], "size": [0.09, 0.025, 0.03],
                  "color": _uniform(rng, (0.55, 0.05, 0.05), (0.85, 0.25, 0.25))})
    return prims


def _car_scene(spec, rng):
    body = _uniform(rng, spec.skin_low, spec.skin_high)
    hx, hy, hz = rng.uniform(0.15, 0.19), rng.uniform(0.06, 0.08), rng.uniform(0.33, 0.38)
    prims = [
        {"shape": "box", "center": [0.0, -0.05, 0.0], "size": [hx, hy, hz], "color": body},
        {"shape": "box", "center": [0.0, -0.05 + hy + 0.05, -0.05], "size": [hx * 0.85, 0.05, hz * 0.5],
         "color": [0.15, 0.2, 0.3]},
    ]
    for sx in (-1, 1):
        for sz in (-1, 1):
            prims.append({"shape": "ellipsoid", "center": [sx * hx, -0.05 - hy, sz * hz * 0.6],
                          "size": [0.035, 0.06, 0.06], "color": [0.05, 0.05, 0.05]})
    if spec.front_marker:
        for sx in (-1, 1):
            prims.append({"shape": "ellipsoid", "center": [sx * hx * 0.6, -0.03, hz], "size": [0.035, 0.025, 0.02],
                          "color": [1.0, 0.95, 0.6]})
    return prims


def _intersect_ellipsoid(o, d, center, size):
    c = np.asarray(center)
    r = np.asarray(size)
    oo = (o - c) / r
    dd = d / r
    a = (dd * dd).sum(-1)
    b = 2 * (oo * dd).sum(-1)
    cc = (oo * oo).sum(-1) - 1
    disc = b * b - 4 * a * cc
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = (-b - sq) / (2 * a)
    hit &= t > 0
    p = o + d * t[..., None]
    n = (p - c) / (r * r)
    n /= np.linalg.norm(n, axis=-1, keepdims=True) + 1e-12
    return np.where(hit, t, np.inf), n


def _intersect_box(o, d, center, size):
    c = np.asarray(center)
    h = np.asarray(size)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (c - h - o) * inv
        t2 = (c + h - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = tmin.max(-1)
    t_far = tmax.min(-1)
    hit = (t_near <= t_far) & (t_near > 0)
    axis = tmin.argmax(-1)
    n = np.zeros_like(o)
    sign = -np.sign(np.take_along_axis(d, axis[..., None], -1))[..., 0]
    np.put_along_axis(n, axis[..., None], sign[..., None], -1)
    return np.where(hit, t_near, np.inf), n


def trace(prims: list[dict], origins: np.ndarray, dirs: np.ndarray, light, ambient):
    """Closest-hit Lambertian shading. Returns ``(rgb, t, hit)`` with t = 0 on misses."""
    best = np.full(origins.shape[:-1], np.inf)
    rgb = np.zeros(origins.shape)
    light = np.asarray(light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    for prim in prims:
        fn = _intersect_ellipsoid if prim["shape"] == "ellipsoid" else _intersect_box
        t, n = fn(origins, dirs, prim["center"], prim["size"])
        closer = t < best
        shade = ambient + (1 - ambient) * np.clip((n * light).sum(-1), 0, None)
        col = np.asarray(prim["color"]) * shade[..., None]
        rgb = np.where(closer[..., None], col, rgb)
        best = np.where(closer, t, best)
    hit = np.isfinite(best)
    return np.clip(rgb, 0, 1), np.where(hit, best, 0.0), hit


def _rays_np(pose: CameraPose, intrinsics: CameraIntrinsics):
    rays = generate_rays(pose, intrinsics, dtype=torch.float64)
    return rays.origins.numpy(), rays.directions.numpy()


def render_scene(prims, pose: CameraPose, intrinsics: CameraIntrinsics, light=(0.0, 0.5, 1.0), ambient=0.35,
                 supersample: int = 2, background: float = 1.0):
    """Render an analytic scene.

    Returns ``(image, depth, alpha)``: image ``(3, H, W)`` in [-1, 1] composited
    over ``background``, depth ``(H, W)`` sampled at pixel centers, and
    coverage ``alpha`` from supersampling.
    """
    res = intrinsics.image_resolution
    o, d = _rays_np(pose, intrinsics)
    _, depth, _ = trace(prims, o, d, light, ambient)
    if supersample > 1:
        hi = intrinsics.with_resolution(res * supersample)
        o, d = _rays_np(pose, hi)
    rgb, _, hit = trace(prims, o, d, light, ambient)
    cov = hit.astype(np.float64)
    rgb = rgb + (1 - cov[..., None]) * background
    if supersample > 1:
        s = supersample
        rgb = rgb.reshape(res, s, res, s, 3).mean(axis=(1, 3))
        cov = cov.reshape(res, s, res, s).mean(axis=(1, 3))
    image = 2 * rgb.transpose(2, 0, 1) - 1
    return image, depth, cov


# ---------------------------------------------------------------------------
# file formats


def write_depth(path, depth: np.ndarray):
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC + struct.pack("<III", DEPTH_VERSION, h, w))
        f.write(depth.tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != DEPTH_MAGIC:
            raise ValueError(f"{path}: not a depth file")
        version, h, w = struct.unpack("<III", header[4:])
        if version != DEPTH_VERSION:
            raise ValueError(f"{path}: unsupported depth format version {version}")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != h * w:
        raise ValueError(f"{path}: truncated depth payload")
    return data.reshape(h, w).astype(np.float32)


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((image + 1) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_png(path, image) -> None:
    """Write a (3, H, W) image in [-1, 1] as 8-bit PNG."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().double().numpy()
    Image.fromarray(_to_uint8(np.asarray(image))).save(path, optimize=False)


def load_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG as (3, H, W) uint8."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).transpose(2, 0, 1).copy()


# ---------------------------------------------------------------------------
# generation


def _record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def sample_record(spec: SceneSpec, index: int):
    rng = _record_rng(spec.seed, index)
    az = spec.azimuth.sample(rng)
    el = spec.elevation.sample(rng)
    return CameraPose(az, el), sample_scene(spec, rng)


def generate_dataset(spec: SceneSpec, out_dir, workers: int = 1) -> dict:
    """Render ``spec.count`` images with depth and write the manifest."""
    spec.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "depth").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PermissionError(f"dataset directory {out} is not writable")
    intr = spec.intrinsics()

    def make(i):
        pose, prims = sample_record(spec, i)
        image, depth, _ = render_scene(prims, pose, intr, spec.light_direction, spec.ambient, spec.supersample)
        name = f"{i:06d}"
        save_png(out / "images" / f"{name}.png", image)
        write_depth(out / "depth" / f"{name}.f32", depth)
        return {
            "index": i,
            "image": f"images/{name}.png",
            "depth": f"depth/{name}.f32",
            "azimuth": float(pose.azimuth),
            "elevation": float(pose.elevation),
            "scene": prims,
        }

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(make, range(spec.count)))
    else:
        records = [make(i) for i in range(spec.count)]
    manifest = {
        "format_version": MANIFEST_VERSION,
        "spec": spec.to_dict(),
        "intrinsics": asdict(intr),
        "count": spec.count,
        "records": records,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def read_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {manifest.get('format_version')}")
    return manifest, path.parent


def manifest_intrinsics(manifest: dict) -> CameraIntrinsics:
    return CameraIntrinsics(**manifest["intrinsics"])


# ---------------------------------------------------------------------------
# loaders


class TrainingImages:
    """Pose-blind image source for the trainer.

    Holds only pixels. Batch ``k`` is a pure function of ``(seed, k)``:
    records are visited in a fresh seeded permutation every epoch.
    """

    def __init__(self, manifest_path, resolution: int | None = None, limit: int | None = None):
        manifest, root = read_manifest(manifest_path)
        records = manifest["records"][:limit] if limit else manifest["records"]
        images = []
        for rec in records:
            try:
                img = load_png(root / rec["image"])
            except Exception as exc:
                raise ValueError(f"record {rec['index']} ({rec['image']}): cannot read image: {exc}") from exc
            if img.shape[0] != 3 or img.shape[1] != img.shape[2]:
                raise ValueError(f"record {rec['index']} ({rec['image']}): unexpected image shape {img.shape}")
            images.append(img)
        self._pixels = torch.from_numpy(np.stack(images))
        self.source_resolution = int(self._pixels.shape[-1])
        self.resolution = resolution or self.source_resolution
        self._cache: dict[tuple, np.ndarray] = {}

    def __len__(self):
        return self._pixels.shape[0]

    def _permutation(self, seed: int, epoch: int) -> np.ndarray:
        key = (seed, epoch)
        if key not in self._cache:
            if len(self._cache) > 4:
                self._cache.clear()
            self._cache[key] = np.random.default_rng([seed, epoch]).permutation(len(self))
        return self._cache[key]

    def indices(self, k: int, batch_size: int, seed: int) -> np.ndarray:
        n = len(self)
        flat = np.arange(k * batch_size, (k + 1) * batch_size)
        return np.array([self._permutation(seed, int(i // n))[i % n] for i in flat])

    def images(self, idx) -> torch.Tensor:
        x = self._pixels[torch.as_tensor(idx)].float() / 127.5 - 1
        if self.resolution != self.source_resolution:
            x = F.interpolate(x, size=(self.resolution, self.resolution), mode="area")
        return x

    def batch(self, k: int, batch_size: int, seed: int) -> torch.Tensor:
        return self.images(self.indices(k, batch_size, seed))


def load_training_batches(manifest_path, batch_size: int, seed: int, resolution: int | None = None,
                          start: int = 0) -> Iterator[torch.Tensor]:
    """Endless stream of image batches in [-1, 1] with no pose or depth attached."""
    data = TrainingImages(manifest_path, resolution)
    k = start
    while True:
        yield data.batch(k, batch_size, seed)
        k += 1


class DatasetRecord(NamedTuple):
    index: int
    image_path: Path
    pose: CameraPose
    depth_path: Path
    scene: list

    def load_image(self) -> torch.Tensor:
        try:
            return torch.from_numpy(load_png(self.image_path)).float() / 127.5 - 1
        except Exception as exc:
            raise ValueError(f"record {self.index} ({self.image_path}): cannot read image: {exc}") from exc

    def load_depth(self) -> torch.Tensor:
        try:
            return torch.from_numpy(read_depth(self.depth_path))
        except Exception as exc:
            raise ValueError(f"record {self.index} ({self.depth_path}): cannot read depth: {exc}") from exc


def load_eval_records(manifest_path) -> list[DatasetRecord]:
    """Records with ground-truth pose and depth. For evaluation only."""
    manifest, root = read_manifest(manifest_path)
    return [
        DatasetRecord(r["index"], root / r["image"], CameraPose(r["azimuth"], r["elevation"]), root / r["depth"],
                      r.get("scene", []))
        for r in manifest["records"]
    ]


class AnalyticSceneRenderer:
    """Re-renders dataset subjects at arbitrary poses (a perfectly 3D-consistent model)."""

    def __init__(self, spec: SceneSpec, intrinsics: CameraIntrinsics | None = None):
        self.spec = spec
        self.intrinsics = intrinsics or spec.intrinsics()

    def base_pose(self, index: int) -> CameraPose:
        return sample_record(self.spec, index)[0]

    def render_view(self, index: int, pose: CameraPose):
        _, prims = sample_record(self.spec, index)
        image, depth, alpha = render_scene(prims, pose, self.intrinsics, self.spec.light_direction, self.spec.ambient,
                                           self.spec.supersample)
        return torch.from_numpy(image), torch.from_numpy(depth), torch.from_numpy(alpha)
