"""Occlusion-aware scene mesh unprojected from a panorama and its ray depth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, DomainError
from .pano import CameraPose, equirect_directions

DEFAULT_TAU = 0.2


@dataclass(frozen=True, eq=False)
class SceneMesh:
    positions: np.ndarray  # (V, 3) world meters
    colors: np.ndarray  # (V, 3) in [0, 1]
    visible: np.ndarray  # (V,) bool
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        col = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)
        vis = np.ascontiguousarray(self.visible, dtype=bool).reshape(-1)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not (len(pos) == len(col) == len(vis)):
            raise DimensionMismatchError("positions, colors and visible differ in length")
        if faces.size and (faces.min() < 0 or faces.max() >= len(pos)):
            raise DomainError("face index out of range")
        if np.any(col[~vis] != 0.0):
            raise DomainError("invisible vertices must be colored black")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "faces", faces)

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, bool), np.zeros((0, 3), np.int64))

    def face_visible(self) -> np.ndarray:
        """True for faces whose three vertices are all visible."""
        if self.n_faces == 0:
            return np.zeros(0, dtype=bool)
        return self.visible[self.faces].all(axis=1)


def _check_depth(depth):
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise DomainError(f"depth map must be 2-D, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0.0):
        raise DomainError("depth values must be finite and positive")
    return depth


def detect_discontinuities(depth, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Flag pixels whose relative depth change to any 8-neighbor exceeds ``tau``.

    Columns wrap around the seam; rows do not wrap across the poles.
    """
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    depth = _check_depth(depth)
    H, W = depth.shape
    # edge padding on rows makes the out-of-image neighbor equal to the pixel itself
    padded = np.pad(depth, ((1, 1), (0, 0)), mode="edge")
    worst = np.zeros_like(depth)
    for dj in (-1, 0, 1):
        rows = padded[1 + dj : 1 + dj + H]
        for di in (-1, 0, 1):
            if dj == 0 and di == 0:
                continue
            nb = np.roll(rows, -di, axis=1)
            rel = np.abs(nb - depth) / np.minimum(nb, depth)
            np.maximum(worst, rel, out=worst)
    return worst > tau


def grid_faces(W: int, H: int) -> np.ndarray:
    """Two triangles per quad, split along the (i, j)-(i+1, j+1) diagonal, seam wrapped."""
    j, i = np.meshgrid(np.arange(H - 1), np.arange(W), indexing="ij")
    i1 = (i + 1) % W
    a = j * W + i
    b = j * W + i1
    c = (j + 1) * W + i
    d = (j + 1) * W + i1
    upper = np.stack([a, b, d], axis=-1).reshape(-1, 3)
    lower = np.stack([a, d, c], axis=-1).reshape(-1, 3)
    faces = np.empty((2 * len(upper), 3), dtype=np.int64)
    faces[0::2] = upper
    faces[1::2] = lower
    return faces


def unproject(depth, pose: CameraPose) -> np.ndarray:
    """World position of every pixel center, shape (H, W, 3)."""
    H, W = depth.shape
    dirs = equirect_directions(W, H) @ pose.rotation.T
    return pose.position + depth[..., None] * dirs


def build_scene_mesh(pano, depth, pose: CameraPose | None = None, tau: float = DEFAULT_TAU) -> SceneMesh:
    pano = np.asarray(pano, dtype=np.float64)
    depth = _check_depth(depth)
    if pano.shape[:2] != depth.shape or pano.ndim != 3 or pano.shape[2] != 3:
        raise DimensionMismatchError(
            f"panorama {pano.shape[:2]} and depth {depth.shape} dimensions differ"
        )
    pose = pose or CameraPose.identity()
    H, W = depth.shape
    flags = detect_discontinuities(depth, tau)
    colors = np.where(flags[..., None], 0.0, pano)
    return SceneMesh(
        positions=unproject(depth, pose).reshape(-1, 3),
        colors=colors.reshape(-1, 3),
        visible=~flags.reshape(-1),
        faces=grid_faces(W, H),
    )


def mesh_bounds(mesh: SceneMesh):
    if mesh.n_vertices == 0:
        raise DomainError("mesh has no vertices")
    return mesh.positions.min(axis=0), mesh.positions.max(axis=0)
