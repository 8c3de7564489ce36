"""Keyframing, depth-scale registration, point fusion and reference-view sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import AlignmentError, DimensionMismatchError, DomainError
from .mesh import DEFAULT_TAU, SceneMesh, detect_discontinuities, grid_faces, unproject
from .pano import CameraPose, PerspectiveViewSpec, Trajectory
from .raster import raycast_equirect

KEYFRAME_STRIDE = 5
REFERENCE_VIEWS = 32
REFERENCE_SIZE = 512
FOV_RANGE = (math.radians(60.0), math.radians(120.0))


def select_keyframes(frame_count: int, stride: int = KEYFRAME_STRIDE) -> list:
    if frame_count < 1 or stride < 1:
        raise DomainError("frame_count and stride must be >= 1")
    return list(range(0, frame_count, stride))


def _surface(depth, pose, tau):
    """Grid mesh of one frame, without faces that touch a depth discontinuity."""
    H, W = depth.shape
    flags = detect_discontinuities(depth, tau).reshape(-1)
    faces = grid_faces(W, H)
    faces = faces[~flags[faces].any(axis=1)]
    pos = unproject(depth, pose).reshape(-1, 3)
    n = len(pos)
    return SceneMesh(pos, np.zeros((n, 3)), np.ones(n, bool), faces)


def align_depth_scales(depths: Sequence[np.ndarray], poses: Sequence[CameraPose], tau: float = DEFAULT_TAU) -> np.ndarray:
    """Per-keyframe scale factors registering each depth map to its predecessors.

    Frame 0 is the reference. Frame ``k`` casts its pixel rays against the
    surfaces of the already-scaled frames ``0..k-1``; per pixel the earliest
    frame with a hit supplies the expected distance, and the scale is the
    closed-form least-squares fit ``sum(d_exp * d_k) / sum(d_k ** 2)``.
    Pixels on a discontinuity of frame ``k`` are not matched.
    """
    if len(depths) < 1:
        raise DomainError("need at least one keyframe")
    if len(depths) != len(poses):
        raise DimensionMismatchError(f"{len(depths)} depth maps for {len(poses)} poses")
    depths = [np.asarray(d, dtype=np.float64) for d in depths]
    scales = np.ones(len(depths))
    surfaces = [_surface(depths[0], poses[0], tau)]
    for k in range(1, len(depths)):
        d_k = depths[k]
        H, W = d_k.shape
        expected = np.full((H, W), np.nan)
        for surf in surfaces:
            todo = np.isnan(expected)
            if not todo.any():
                break
            hit = raycast_equirect(surf, poses[k], W, H).distance
            fill = todo & np.isfinite(hit)
            expected[fill] = hit[fill]
        use = np.isfinite(expected) & ~detect_discontinuities(d_k, tau)
        if not use.any():
            raise AlignmentError(f"keyframe {k} has no ray matches against frames 0..{k - 1}", frame=k)
        dk = d_k[use]
        scales[k] = float(np.dot(expected[use], dk) / np.dot(dk, dk))
        surfaces.append(_surface(scales[k] * d_k, poses[k], tau))
    return scales


@dataclass(frozen=True, eq=False)
class FusedPoints:
    positions: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3)
    distances: np.ndarray  # (N,) ray distance from the source camera
    frame: np.ndarray  # (N,) source keyframe


def fuse_point_cloud(panos, depths, poses, scales=None, stride: int = 1, tau: float = DEFAULT_TAU, masks=None) -> FusedPoints:
    """World points of every keyframe pixel that is off a discontinuity, on the
    ``stride`` subgrid and, when ``masks`` are given, valid in its mask."""
    if stride < 1:
        raise DomainError("stride must be >= 1")
    if not (len(panos) == len(depths) == len(poses)):
        raise DimensionMismatchError("panos, depths and poses differ in length")
    scales = np.ones(len(depths)) if scales is None else np.asarray(scales, dtype=np.float64)
    out_p, out_c, out_d, out_f = [], [], [], []
    for k, (pano, depth, pose) in enumerate(zip(panos, depths, poses)):
        pano = np.asarray(pano, dtype=np.float64)
        depth = scales[k] * np.asarray(depth, dtype=np.float64)
        if pano.shape[:2] != depth.shape:
            raise DimensionMismatchError(f"keyframe {k}: panorama {pano.shape[:2]} vs depth {depth.shape}")
        keep = ~detect_discontinuities(depth, tau)
        if masks is not None:
            keep &= np.asarray(masks[k], dtype=bool)
        sub = np.zeros_like(keep)
        sub[::stride, ::stride] = True
        keep &= sub
        out_p.append(unproject(depth, pose)[keep])
        out_c.append(pano[keep])
        out_d.append(depth[keep])
        out_f.append(np.full(int(keep.sum()), k))
    return FusedPoints(np.concatenate(out_p), np.concatenate(out_c), np.concatenate(out_d), np.concatenate(out_f))


# --- reference views ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReferenceView:
    pose: CameraPose
    spec: PerspectiveViewSpec
    category: str  # context | interpolated | extrapolated


def interpolate_pose(a: CameraPose, b: CameraPose, t: float) -> CameraPose:
    """Geodesic rotation blend and linear position blend; ``t = 0`` returns ``a`` exactly."""
    rel = Rotation.from_matrix(a.rotation.T @ b.rotation).as_rotvec()
    R = a.rotation @ Rotation.from_rotvec(t * rel).as_matrix()
    return CameraPose(R, a.position + t * (b.position - a.position))


def extrapolate_pose(prev: CameraPose, last: CameraPose, t: float) -> CameraPose:
    """``last`` moved forward by ``t`` times the final segment, same orientation."""
    return CameraPose(last.rotation, last.position + t * (last.position - prev.position))


def _open_unit(rng):
    t = 0.0
    while t == 0.0:
        t = rng.uniform(0.0, 1.0)
    return t


def sample_reference_views(traj: Trajectory, count: int = REFERENCE_VIEWS, seed=0, size: int = REFERENCE_SIZE) -> list:
    """Context, interpolated and extrapolated views split count/2, count/4, rest.

    Each view gets a uniform random yaw, a pitch in [-45, 45] degrees and a
    field of view in [60, 120] degrees.
    """
    if traj.n_frames < 2:
        raise DomainError("reference-view sampling needs at least two trajectory poses")
    rng = np.random.default_rng(seed)
    n_ctx = count // 2
    n_int = count // 4
    n_ext = count - n_ctx - n_int
    poses = traj.poses
    out = []
    for category, n in (("context", n_ctx), ("interpolated", n_int), ("extrapolated", n_ext)):
        for _ in range(n):
            if category == "context":
                pose = poses[int(rng.integers(len(poses)))]
            elif category == "interpolated":
                i = int(rng.integers(len(poses) - 1))
                pose = interpolate_pose(poses[i], poses[i + 1], _open_unit(rng))
            else:
                pose = extrapolate_pose(poses[-2], poses[-1], 0.5 * (1.0 - rng.uniform(0.0, 1.0)))
            spec = PerspectiveViewSpec(
                yaw=rng.uniform(-math.pi, math.pi),
                pitch=rng.uniform(-math.pi / 4, math.pi / 4),
                fov=rng.uniform(*FOV_RANGE),
                size=size,
            )
            out.append(ReferenceView(pose, spec, category))
    return out
