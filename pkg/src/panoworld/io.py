"""Readers and writers: PFM depth, PNG images, trajectory/scene JSON, PLY."""
from __future__ import annotations

import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement, PlyParseError

from .errors import DomainError, FormatError
from .gaussians import GaussianCloud
from .mesh import SceneMesh
from .pano import CameraPose, Trajectory
from .routes import AabbSet, WalkablePointSet

SH_C0 = 0.28209479177387814
ROTATION_READ_TOL = 1e-6


@contextmanager
def atomic_write(path, mode="wb"):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- PFM ---------------------------------------------------------------------

def write_depth_pfm(depth, path):
    d = np.asarray(depth)
    if d.ndim != 2:
        raise DomainError(f"depth map must be 2-D, got {d.shape}")
    H, W = d.shape
    header = f"Pf\n{W} {H}\n-1.0\n".encode("ascii")
    payload = np.ascontiguousarray(d[::-1], dtype="<f4").tobytes()
    with atomic_write(path) as fh:
        fh.write(header)
        fh.write(payload)


def _read_line(buf, pos, path):
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError("truncated PFM header", offset=pos, path=str(path))
    return buf[pos:end].decode("ascii", errors="replace"), end + 1


def read_depth_pfm(path) -> np.ndarray:
    """Read a single-channel little-endian PFM as a (H, W) float64 ray-depth map."""
    buf = Path(path).read_bytes()
    magic, pos = _read_line(buf, 0, path)
    if magic != "Pf":
        raise FormatError(f"expected grayscale PFM magic 'Pf', got {magic!r}", offset=0, path=str(path))
    dims_at = pos
    dims, pos = _read_line(buf, pos, path)
    try:
        W, H = (int(v) for v in dims.split())
    except ValueError:
        raise FormatError(f"bad PFM dimensions {dims!r}", offset=dims_at, path=str(path)) from None
    if W < 1 or H < 1:
        raise FormatError(f"bad PFM dimensions {dims!r}", offset=dims_at, path=str(path))
    scale_at = pos
    scale, pos = _read_line(buf, pos, path)
    try:
        scale_v = float(scale)
    except ValueError:
        raise FormatError(f"bad PFM scale {scale!r}", offset=scale_at, path=str(path)) from None
    if not scale_v < 0:
        raise FormatError("only little-endian PFM (negative scale) is supported", offset=scale_at, path=str(path))
    if len(buf) - pos != 4 * W * H:
        raise FormatError(
            f"PFM payload has {len(buf) - pos} bytes, expected {4 * W * H}", offset=pos, path=str(path)
        )
    flat = np.frombuffer(buf, dtype="<f4", offset=pos)
    bad = np.nonzero(~(np.isfinite(flat) & (flat > 0)))[0]
    if len(bad):
        raise FormatError(
            f"depth value {flat[bad[0]]} is not finite and positive", offset=pos + 4 * int(bad[0]), path=str(path)
        )
    return flat.reshape(H, W)[::-1].astype(np.float64)


# --- PNG ---------------------------------------------------------------------

def read_png_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise FormatError(f"cannot read image: {exc}", path=str(path)) from None
    return arr


def write_png_rgb(image, path):
    arr = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    with atomic_write(path) as fh:
        Image.fromarray(arr, mode="RGB").save(fh, format="PNG")


def write_mask_png(mask, path):
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    with atomic_write(path) as fh:
        Image.fromarray(arr, mode="L").save(fh, format="PNG")


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not np.all((arr == 0) | (arr == 255)):
        raise FormatError("mask PNG must only contain 0 and 255", path=str(path))
    return arr == 255


# --- JSON --------------------------------------------------------------------

_NUM = {"type": "number"}

TRAJECTORY_SCHEMA = {
    "type": "object",
    "properties": {
        "frames": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "rotation": {"type": "array", "items": _NUM, "minItems": 9, "maxItems": 9},
                    "position": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
                },
                "required": ["rotation", "position"],
                "additionalProperties": False,
            },
        }
    },
    "required": ["frames"],
    "additionalProperties": False,
}

SCENE_SCHEMA = {
    "type": "object",
    "properties": {
        "units": {"const": "meters"},
        "plane_height": _NUM,
        "walkable_points": {
            "type": "array",
            "minItems": 3,
            "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        },
        "obstacles": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "min": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
                    "max": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
                },
                "required": ["min", "max"],
                "additionalProperties": False,
            },
        },
    },
    "required": ["units", "plane_height", "walkable_points", "obstacles"],
    "additionalProperties": False,
}


def _load_json(path, schema):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", offset=exc.pos, path=str(path)) from None
    try:
        jsonschema.validate(data, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path)
        raise FormatError(f"schema violation at '{where}': {exc.message}", path=str(path)) from None
    return data


def dump_json(data, path):
    text = json.dumps(data, indent=1, sort_keys=True) + "\n"
    with atomic_write(path, "w") as fh:
        fh.write(text)


def _orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def read_trajectory_json(path) -> Trajectory:
    data = _load_json(path, TRAJECTORY_SCHEMA)
    poses = []
    for k, fr in enumerate(data["frames"]):
        R = np.array(fr["rotation"], dtype=np.float64).reshape(3, 3)
        if np.abs(R.T @ R - np.eye(3)).max() > ROTATION_READ_TOL or abs(np.linalg.det(R) - 1.0) > ROTATION_READ_TOL:
            raise FormatError(f"frame {k}: rotation is not a proper rotation matrix", path=str(path))
        poses.append(CameraPose(_orthonormalize(R), fr["position"]))
    return Trajectory(tuple(poses))


def trajectory_to_dict(traj: Trajectory) -> dict:
    return {
        "frames": [
            {"rotation": [float(v) for v in p.rotation.reshape(-1)], "position": [float(v) for v in p.position]}
            for p in traj
        ]
    }


def write_trajectory_json(traj: Trajectory, path):
    dump_json(trajectory_to_dict(traj), path)


def read_scene_json(path):
    data = _load_json(path, SCENE_SCHEMA)
    walk = WalkablePointSet(np.array(data["walkable_points"], dtype=np.float64), float(data["plane_height"]))
    obs = data["obstacles"]
    try:
        boxes = AabbSet(
            np.array([o["min"] for o in obs], dtype=np.float64).reshape(-1, 3),
            np.array([o["max"] for o in obs], dtype=np.float64).reshape(-1, 3),
        )
    except DomainError as exc:
        raise FormatError(str(exc), path=str(path)) from None
    return walk, boxes


def write_scene_json(walkable: WalkablePointSet, boxes: AabbSet, path):
    dump_json(
        {
            "units": "meters",
            "plane_height": float(walkable.plane_height),
            "walkable_points": walkable.points.tolist(),
            "obstacles": [{"min": lo.tolist(), "max": hi.tolist()} for lo, hi in zip(boxes.mins, boxes.maxs)],
        },
        path,
    )


# --- PLY ---------------------------------------------------------------------

def _write_ply(elements, path):
    try:
        with atomic_write(path) as fh:
            PlyData(elements, text=False, byte_order="<").write(fh)
    except OSError as exc:
        raise OSError(f"{path}: {exc}") from exc


def write_mesh_ply(mesh: SceneMesh, path):
    v = np.empty(
        mesh.n_vertices,
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("visible", "u1")],
    )
    for k, name in enumerate("xyz"):
        v[name] = mesh.positions[:, k]
    rgb = np.round(np.clip(mesh.colors, 0, 1) * 255).astype(np.uint8)
    v["red"], v["green"], v["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    v["visible"] = mesh.visible.astype(np.uint8)
    f = np.empty(mesh.n_faces, dtype=[("vertex_indices", "i4", (3,))])
    f["vertex_indices"] = mesh.faces
    _write_ply([PlyElement.describe(v, "vertex"), PlyElement.describe(f, "face")], path)


GAUSSIAN_PLY_FIELDS = (
    ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
    + [f"scale_{k}" for k in range(3)]
    + [f"rot_{k}" for k in range(4)]
)

_LOGIT_EPS = 1e-7


def write_gaussians_ply(cloud: GaussianCloud, path):
    """3DGS community layout: SH DC color, logit opacity, log scale, wxyz rotation."""
    v = np.zeros(len(cloud), dtype=[(name, "<f4") for name in GAUSSIAN_PLY_FIELDS])
    for k, name in enumerate("xyz"):
        v[name] = cloud.means[:, k]
    for k in range(3):
        v[f"f_dc_{k}"] = (cloud.colors[:, k] - 0.5) / SH_C0
        v[f"scale_{k}"] = np.log(cloud.scales[:, k])
    o = np.clip(cloud.opacities, _LOGIT_EPS, 1 - _LOGIT_EPS)
    v["opacity"] = np.log(o) - np.log1p(-o)
    for k in range(4):
        v[f"rot_{k}"] = cloud.rotations[:, k]
    _write_ply([PlyElement.describe(v, "vertex")], path)


def read_gaussians_ply(path) -> GaussianCloud:
    try:
        ply = PlyData.read(str(path))
        v = ply["vertex"].data
    except (KeyError, ValueError, PlyParseError) as exc:
        raise FormatError(f"cannot read Gaussian PLY: {exc}", path=str(path)) from None
    missing = [n for n in GAUSSIAN_PLY_FIELDS if n not in v.dtype.names]
    if missing:
        raise FormatError(f"Gaussian PLY lacks properties {missing}", path=str(path))
    col = lambda name: np.asarray(v[name], dtype=np.float64)
    rot = np.stack([col(f"rot_{k}") for k in range(4)], axis=1)
    norm = np.linalg.norm(rot, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise FormatError("zero-length rotation quaternion", path=str(path))
    return GaussianCloud(
        means=np.stack([col(n) for n in "xyz"], axis=1),
        scales=np.exp(np.stack([col(f"scale_{k}") for k in range(3)], axis=1)),
        rotations=rot / norm,
        opacities=1.0 / (1.0 + np.exp(-col("opacity"))),
        colors=np.clip(0.5 + SH_C0 * np.stack([col(f"f_dc_{k}") for k in range(3)], axis=1), 0.0, 1.0),
    )
