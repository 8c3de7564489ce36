"""Equirectangular coordinate math, perspective crops and Pluecker ray maps.

Conventions used everywhere in the package:

* camera frame: +X right, +Y down, +Z forward (world frame right-handed,
  world "up" is -Y for a level camera);
* equirect pixel ``(i, j)`` has its center at ``(i + 0.5, j + 0.5)``;
  azimuth ``phi = 2*pi*x/W - pi``, elevation ``theta = pi/2 - pi*y/H``;
* depth maps hold Euclidean distance along the pixel ray.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError

POLE_EPS = 1e-9
ROT_TOL = 1e-9


def _as_rotation(rotation, tol=ROT_TOL):
    R = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(R)):
        raise DomainError("rotation has non-finite entries")
    if np.abs(R.T @ R - np.eye(3)).max() > tol:
        raise DomainError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise DomainError("rotation determinant is not +1")
    return R


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-from-camera rigid transform: ``x_world = rotation @ x_cam + position``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _as_rotation(self.rotation)
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(p)):
            raise DomainError("position has non-finite entries")
        R.setflags(write=False)
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "position", p)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def world_to_camera(self, points):
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.position, other.position
        )

    def __repr__(self):
        return f"CameraPose(rotation={self.rotation.tolist()}, position={self.position.tolist()})"


@dataclass(frozen=True)
class Trajectory:
    poses: tuple

    def __post_init__(self):
        poses = tuple(self.poses)
        if len(poses) < 1:
            raise DomainError("trajectory needs at least one pose")
        if not all(isinstance(p, CameraPose) for p in poses):
            raise DomainError("trajectory entries must be CameraPose")
        object.__setattr__(self, "poses", poses)

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_x(angle: float) -> np.ndarray:
    # positive angle tilts +Z toward -Y (looks up)
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def yaw_pitch_rotation(yaw: float, pitch: float) -> np.ndarray:
    """Rotation taking the view's local frame into its parent: pitch first, then yaw."""
    return rot_y(yaw) @ rot_x(pitch)


@dataclass(frozen=True)
class PerspectiveViewSpec:
    """Square pinhole view looking along ``(yaw, pitch)`` of the parent frame."""

    yaw: float
    pitch: float
    fov: float
    size: int

    def __post_init__(self):
        if not (0.0 < self.fov < math.pi):
            raise DomainError(f"fov must lie in (0, pi), got {self.fov}")
        if int(self.size) != self.size or self.size < 1:
            raise DomainError(f"size must be a positive integer, got {self.size}")
        object.__setattr__(self, "size", int(self.size))

    @property
    def focal(self) -> float:
        return self.size / (2.0 * math.tan(self.fov / 2.0))

    @property
    def rotation(self) -> np.ndarray:
        return yaw_pitch_rotation(self.yaw, self.pitch)

    def camera_rays(self) -> np.ndarray:
        """Unnormalized local rays ``(x, y, 1)`` for every pixel center, shape (S, S, 3)."""
        s = self.size
        c = (np.arange(s) + 0.5 - s / 2.0) / self.focal
        rays = np.ones((s, s, 3))
        rays[..., 0] = c[None, :]
        rays[..., 1] = c[:, None]
        return rays


def _check_dims(W, H):
    if W < 2 or H < 2:
        raise DomainError(f"panorama must be at least 2x2, got {W}x{H}")


def pixel_to_direction(x: float, y: float, W: int, H: int) -> np.ndarray:
    """Unit camera-frame direction of continuous equirect coordinate ``(x, y)``."""
    _check_dims(W, H)
    if not (0.0 <= x <= W and 0.0 <= y <= H):
        raise DomainError(f"pixel coordinate ({x}, {y}) outside [0, {W}] x [0, {H}]")
    phi = 2.0 * math.pi * x / W - math.pi
    theta = math.pi / 2.0 - math.pi * y / H
    ct = math.cos(theta)
    return np.array([ct * math.sin(phi), -math.sin(theta), ct * math.cos(phi)])


def pixels_to_directions(x, y, W: int, H: int) -> np.ndarray:
    """Vectorized :func:`pixel_to_direction` (no range check)."""
    phi = 2.0 * np.pi * np.asarray(x, dtype=np.float64) / W - np.pi
    theta = np.pi / 2.0 - np.pi * np.asarray(y, dtype=np.float64) / H
    ct = np.cos(theta)
    return np.stack(np.broadcast_arrays(ct * np.sin(phi), -np.sin(theta), ct * np.cos(phi)), axis=-1)


def equirect_directions(W: int, H: int) -> np.ndarray:
    """Directions of all pixel centers, shape (H, W, 3)."""
    _check_dims(W, H)
    x = np.arange(W) + 0.5
    y = np.arange(H) + 0.5
    return pixels_to_directions(x[None, :], y[:, None], W, H)


def directions_to_pixels(d, W: int, H: int):
    """Vectorized inverse mapping; returns ``(x, y)`` arrays with ``x`` in ``[0, W)``."""
    d = np.asarray(d, dtype=np.float64)
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    horiz = np.hypot(dx, dz)
    phi = np.arctan2(dx, dz)
    theta = np.arctan2(-dy, horiz)
    x = (phi + np.pi) * (W / (2.0 * np.pi))
    x = np.where(x >= W, x - W, x)
    x = np.where(horiz <= POLE_EPS, W / 2.0, x)
    y = (np.pi / 2.0 - theta) * (H / np.pi)
    return x, y


def direction_to_pixel(d, W: int, H: int):
    x, y = directions_to_pixels(np.asarray(d, dtype=np.float64), W, H)
    return float(x), float(y)


def sample_equirect(image: np.ndarray, x, y) -> np.ndarray:
    """Bilinear lookup at continuous coords; wraps horizontally, clamps vertically."""
    image = np.asarray(image)
    H, W = image.shape[:2]
    u = np.asarray(x, dtype=np.float64) - 0.5
    v = np.asarray(y, dtype=np.float64) - 0.5
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = u - u0
    fv = v - v0
    c0 = u0.astype(np.int64) % W
    c1 = (c0 + 1) % W
    r0 = np.clip(v0.astype(np.int64), 0, H - 1)
    r1 = np.clip(v0.astype(np.int64) + 1, 0, H - 1)
    if image.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    top = image[r0, c0] * (1.0 - fu) + image[r0, c1] * fu
    bot = image[r1, c0] * (1.0 - fu) + image[r1, c1] * fu
    return top * (1.0 - fv) + bot * fv


def pano_to_perspective(pano: np.ndarray, spec: PerspectiveViewSpec) -> np.ndarray:
    """Crop a pinhole view out of an equirect image (H, W, C) in the pano's own frame."""
    pano = np.asarray(pano, dtype=np.float64)
    H, W = pano.shape[:2]
    _check_dims(W, H)
    rays = spec.camera_rays() @ spec.rotation.T
    x, y = directions_to_pixels(rays / np.linalg.norm(rays, axis=-1, keepdims=True), W, H)
    return sample_equirect(pano, x, y)


def mask_to_perspective(mask: np.ndarray, spec: PerspectiveViewSpec) -> np.ndarray:
    """Crop of an equirect validity mask: true where every pixel the bilinear
    color lookup draws on is valid."""
    m = np.asarray(mask, dtype=np.float64)[..., None]
    return pano_to_perspective(m, spec)[..., 0] >= 1.0 - 1e-9


def default_crop_layout(size: int = 512, fov: float = math.radians(100.0)) -> list:
    """Twelve views: six around the horizon, three tilted up and three down."""
    views = [PerspectiveViewSpec(math.radians(60.0 * k), 0.0, fov, size) for k in range(6)]
    up = math.radians(45.0)
    views += [PerspectiveViewSpec(math.radians(120.0 * k), up, fov, size) for k in range(3)]
    views += [PerspectiveViewSpec(math.radians(120.0 * k + 60.0), -up, fov, size) for k in range(3)]
    return views


def in_frustum(spec: PerspectiveViewSpec, directions: np.ndarray) -> np.ndarray:
    local = np.asarray(directions, dtype=np.float64) @ spec.rotation
    z = local[..., 2]
    half = math.tan(spec.fov / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        inside = (np.abs(local[..., 0]) <= half * z) & (np.abs(local[..., 1]) <= half * z)
    return inside & (z > 0.0)


def coverage_map(layout: Sequence[PerspectiveViewSpec], H: int, W: int) -> np.ndarray:
    dirs = equirect_directions(W, H)
    count = np.zeros((H, W), dtype=np.int64)
    for spec in layout:
        count += in_frustum(spec, dirs)
    return count


def pluecker_embedding(pose: CameraPose, W: int, H: int) -> np.ndarray:
    """Per-pixel ``(d, o x d)`` with ``d`` the world ray, shape (H, W, 6)."""
    d = equirect_directions(W, H) @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    m = np.cross(np.broadcast_to(pose.position, d.shape), d)
    return np.concatenate([d, m], axis=-1)
