"""Orbit cameras, ray generation, mirroring and depth-based warping.

World convention: right-handed, +y up, the canonical front of a subject
faces +z. A pose places the camera on a sphere of radius ``orbit_radius``
around the origin, always looking at the origin::

    center = r * (cos(el) sin(az), sin(el), cos(el) cos(az))

so ``az = el = 0`` puts the camera at ``(0, 0, r)``. Camera axes follow the
OpenGL convention (x right, y up, looking down -z). Image row 0 is the top
row, column 0 the left column.

Everything here is written in torch so gradients reach the pose angles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Union

import torch

Angle = Union[float, torch.Tensor]

_HALF_PI = math.pi / 2


def wrap_angle(a: Angle) -> Angle:
    """Map an angle into [-pi, pi); angles already there are returned unchanged."""
    if isinstance(a, torch.Tensor):
        inside = (a >= -math.pi) & (a < math.pi)
        return torch.where(inside, a, torch.remainder(a + math.pi, 2 * math.pi) - math.pi)
    if -math.pi <= a < math.pi:
        return a
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True)
class CameraPose:
    """Azimuth/elevation pair in radians. Either field may be a batch tensor."""

    azimuth: Angle
    elevation: Angle

    def __post_init__(self):
        el = self.elevation
        if isinstance(el, torch.Tensor):
            bad = bool((el.detach().abs() >= _HALF_PI).any()) or not bool(torch.isfinite(el).all())
        else:
            bad = not math.isfinite(el) or abs(el) >= _HALF_PI
        if bad:
            raise ValueError("elevation must lie strictly inside (-pi/2, pi/2)")
        object.__setattr__(self, "azimuth", wrap_angle(self.azimuth))

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "CameraPose":
        """Build from a ``(..., 2)`` tensor of (azimuth, elevation)."""
        return cls(t[..., 0], t[..., 1])

    def as_tensor(self, dtype=None, device=None) -> torch.Tensor:
        az = torch.as_tensor(self.azimuth, dtype=dtype, device=device)
        el = torch.as_tensor(self.elevation, dtype=dtype, device=device)
        az, el = torch.broadcast_tensors(az, el)
        return torch.stack([az, el], dim=-1)

    def detach(self) -> "CameraPose":
        return CameraPose.from_tensor(self.as_tensor().detach())

    def __len__(self):
        return self.as_tensor().shape[0]

    def __getitem__(self, idx) -> "CameraPose":
        return CameraPose.from_tensor(self.as_tensor()[idx])


@dataclass(frozen=True)
class CameraIntrinsics:
    field_of_view: float = math.radians(30.0)
    image_resolution: int = 64
    near: float = 2.25
    far: float = 3.3
    orbit_radius: float = 2.7

    def __post_init__(self):
        if not 0 < self.field_of_view < math.pi:
            raise ValueError("field_of_view must be in (0, pi)")
        if not 0 <= self.near < self.far:
            raise ValueError("need 0 <= near < far")
        if self.orbit_radius <= 0:
            raise ValueError("orbit_radius must be positive")
        if self.image_resolution < 1:
            raise ValueError("image_resolution must be positive")

    @property
    def focal(self) -> float:
        """Focal length in pixels."""
        return 0.5 * self.image_resolution / math.tan(0.5 * self.field_of_view)

    def with_resolution(self, resolution: int) -> "CameraIntrinsics":
        return CameraIntrinsics(self.field_of_view, resolution, self.near, self.far, self.orbit_radius)


class RayBundle(NamedTuple):
    origins: torch.Tensor  # (..., R, R, 3)
    directions: torch.Tensor  # (..., R, R, 3), unit norm


def _angles(pose: CameraPose, dtype=None, device=None):
    p = pose.as_tensor(dtype=dtype, device=device)
    if not torch.is_floating_point(p):
        p = p.to(torch.get_default_dtype())
    return p[..., 0], p[..., 1]


def camera_frame(pose: CameraPose, intrinsics: CameraIntrinsics, dtype=None, device=None):
    """Return ``(right, up, back, center)``, each of shape ``(..., 3)``."""
    az, el = _angles(pose, dtype, device)
    if bool((el.detach().abs() >= _HALF_PI).any()):
        raise ValueError("elevation of +-pi/2 has no well-defined up vector")
    ca, sa = torch.cos(az), torch.sin(az)
    ce, se = torch.cos(el), torch.sin(el)
    zero = torch.zeros_like(az)
    back = torch.stack([ce * sa, se, ce * ca], dim=-1)
    right = torch.stack([ca, zero, -sa], dim=-1)
    up = torch.stack([-se * sa, ce, -se * ca], dim=-1)
    return right, up, back, intrinsics.orbit_radius * back


def pose_to_extrinsics(pose: CameraPose, intrinsics: CameraIntrinsics, dtype=None, device=None) -> torch.Tensor:
    """World-from-camera 4x4 rigid transform(s)."""
    right, up, back, center = camera_frame(pose, intrinsics, dtype, device)
    rot = torch.stack([right, up, back], dim=-1)
    top = torch.cat([rot, center.unsqueeze(-1)], dim=-1)
    bottom = torch.zeros(top.shape[:-2] + (1, 4), dtype=top.dtype, device=top.device)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], dim=-2)


def pixel_grid(intrinsics: CameraIntrinsics, dtype=None, device=None):
    """Camera-plane offsets ``(x, y)`` of the pixel centers at unit depth."""
    res = intrinsics.image_resolution
    coords = (torch.arange(res, dtype=dtype, device=device) + 0.5 - 0.5 * res) / intrinsics.focal
    ys, xs = torch.meshgrid(-coords, coords, indexing="ij")
    return xs, ys


def generate_rays(pose: CameraPose, intrinsics: CameraIntrinsics, dtype=None, device=None) -> RayBundle:
    """Pinhole rays through every pixel center."""
    right, up, back, center = camera_frame(pose, intrinsics, dtype, device)
    xs, ys = pixel_grid(intrinsics, dtype=right.dtype, device=right.device)
    lead = right.shape[:-1]
    right, up, back = (v.reshape(lead + (1, 1, 3)) for v in (right, up, back))
    dirs = xs[..., None] * right + ys[..., None] * up - back
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = center.reshape(lead + (1, 1, 3)).expand_as(dirs)
    return RayBundle(origins, dirs)


def mirror_pose(pose: CameraPose) -> CameraPose:
    """Reflect the camera across the yz-plane (x -> -x)."""
    return CameraPose(-pose.azimuth, pose.elevation)


def _bilinear(image: torch.Tensor, x: torch.Tensor, y: torch.Tensor):
    """Sample ``image`` (C, H, W) at pixel coordinates; returns values and in-range mask."""
    _, h, w = image.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x = x.clamp(0, w - 1)
    y = y.clamp(0, h - 1)
    x0 = x.floor().clamp(max=w - 2).long() if w > 1 else torch.zeros_like(x, dtype=torch.long)
    y0 = y.floor().clamp(max=h - 2).long() if h > 1 else torch.zeros_like(y, dtype=torch.long)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = (x - x0).to(image.dtype)
    fy = (y - y0).to(image.dtype)
    flat = image.reshape(image.shape[0], -1)

    def tap(yy, xx):
        return flat[:, (yy * w + xx).reshape(-1)].reshape((image.shape[0],) + xx.shape)

    top = tap(y0, x0) * (1 - fx) + tap(y0, x1) * fx
    bot = tap(y1, x0) * (1 - fx) + tap(y1, x1) * fx
    return top * (1 - fy) + bot * fy, inside


def project_points(points: torch.Tensor, pose: CameraPose, intrinsics: CameraIntrinsics):
    """Project world points ``(..., 3)`` to pixel coordinates.

    Returns ``(col, row, distance, in_front)`` where ``distance`` is the
    Euclidean distance to the camera center (the same quantity the renderer
    reports as depth).
    """
    right, up, back, center = camera_frame(pose, intrinsics, dtype=points.dtype, device=points.device)
    rel = points - center
    xc = (rel * right).sum(-1)
    yc = (rel * up).sum(-1)
    zc = (rel * back).sum(-1)
    in_front = zc < 0
    depth = (-zc).clamp(min=1e-12)
    half = 0.5 * intrinsics.image_resolution
    col = intrinsics.focal * xc / depth + half - 0.5
    row = -intrinsics.focal * yc / depth + half - 0.5
    return col, row, rel.norm(dim=-1), in_front


# Geometry runs in float64 and sample coordinates are snapped to a 2^-16
# pixel lattice so round-off cannot perturb an exact pixel-center hit.
_SNAP = float(2 ** 16)


def warp_image(
    source_image: torch.Tensor,
    source_depth: torch.Tensor,
    source_pose: CameraPose,
    target_pose: CameraPose,
    intrinsics: CameraIntrinsics,
    target_depth: torch.Tensor,
    *,
    source_alpha: torch.Tensor | None = None,
    target_alpha: torch.Tensor | None = None,
    depth_tolerance: float = 0.05,
    alpha_threshold: float = 0.5,
):
    """Resample ``source_image`` into the target view by inverse warping.

    Every target pixel is back-projected with ``target_depth``, projected
    into the source camera and the source image is bilinearly sampled there.
    ``source_depth`` drives an occlusion test: the sample is kept only when
    the source depth at the landing spot agrees with the distance of the
    back-projected point within ``depth_tolerance``.

    Images are ``(C, H, W)``; depths and alphas are ``(H, W)``. Pixels with
    alpha below ``alpha_threshold`` (either view), zero depth, landing outside the source frustum
    or behind the source camera are invalid. Returns ``(warped, valid)``,
    with invalid pixels of ``warped`` set to zero.
    """
    res = intrinsics.image_resolution
    for name, t in (("source_image", source_image), ("source_depth", source_depth), ("target_depth", target_depth)):
        if tuple(t.shape[-2:]) != (res, res):
            raise ValueError(f"{name} has resolution {tuple(t.shape[-2:])}, expected {(res, res)}")
    if source_image.dim() != 3:
        raise ValueError("source_image must be (C, H, W)")

    geo = torch.float64
    rays = generate_rays(target_pose, intrinsics, dtype=geo, device=target_depth.device)
    points = rays.origins + rays.directions * target_depth.to(geo)[..., None]
    col, row, dist, in_front = project_points(points, source_pose, intrinsics)
    col = torch.round(col * _SNAP) / _SNAP
    row = torch.round(row * _SNAP) / _SNAP

    warped, inside = _bilinear(source_image, col, row)
    depth_s, _ = _bilinear(source_depth[None].to(geo), col, row)
    depth_s = depth_s[0]

    valid = inside & in_front & (target_depth > 0)
    valid &= (depth_s - dist).abs() <= depth_tolerance
    if target_alpha is not None:
        valid &= target_alpha >= alpha_threshold
    if source_alpha is not None:
        alpha_s, _ = _bilinear(source_alpha[None].to(source_image.dtype), col, row)
        valid &= alpha_s[0] >= alpha_threshold
    warped = torch.where(valid[None], warped, torch.zeros_like(warped))
    return warped, valid
