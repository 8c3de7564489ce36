"""Analytic test scenes, written against the conventions directly rather than
through library helpers so they can serve as oracles.

Camera frame: +x right, +y down, +z forward. Pixel (i, j) has its center at
(i + 0.5, j + 0.5); azimuth phi = 2 pi x / W - pi, elevation
theta = pi / 2 - pi y / H, direction (cos t sin p, -sin t, cos t cos p).
"""
from __future__ import annotations

import numpy as np

ROOM_LO = np.array([-4.0, -3.0, -3.0])
ROOM_HI = np.array([4.0, 3.0, 5.0])
PANEL_Z = 2.0
PANEL_HALF = 0.5


def equirect_dirs(W, H):
    x = np.arange(W) + 0.5
    y = np.arange(H) + 0.5
    phi = 2 * np.pi * x[None, :] / W - np.pi
    theta = np.pi / 2 - np.pi * y[:, None] / H
    phi, theta = np.broadcast_arrays(phi, theta)
    return np.stack([np.cos(theta) * np.sin(phi), -np.sin(theta), np.cos(theta) * np.cos(phi)], axis=-1)


def dirs_to_pixel(d, W, H):
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    phi = np.arctan2(d[..., 0], d[..., 2])
    theta = np.arcsin(np.clip(-d[..., 1], -1, 1))
    return (phi + np.pi) * W / (2 * np.pi), (np.pi / 2 - theta) * H / np.pi


def room_hit(origin, dirs, lo=ROOM_LO, hi=ROOM_HI):
    """Exit distance from inside an axis-aligned box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dirs > 0, (hi - origin) / dirs, np.where(dirs < 0, (lo - origin) / dirs, np.inf))
    return t.min(axis=-1)


def panel_hit(origin, dirs, z=PANEL_Z, half=PANEL_HALF):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z - origin[2]) / dirs[..., 2]
    p = origin + t[..., None] * dirs
    ok = (t > 0) & (np.abs(p[..., 0]) <= half) & (np.abs(p[..., 1]) <= half)
    return np.where(ok, t, np.inf)


def texture(points):
    """Smooth, band-limited color field on world points."""
    p = np.asarray(points)
    r = 0.5 + 0.3 * np.sin(0.9 * p[..., 0] + 0.4 * p[..., 1]) * np.cos(0.5 * p[..., 2])
    g = 0.5 + 0.3 * np.sin(0.7 * p[..., 1] - 0.3 * p[..., 2] + 1.0)
    b = 0.5 + 0.3 * np.cos(0.6 * p[..., 0] + 0.8 * p[..., 2])
    return np.clip(np.stack([r, g, b], axis=-1), 0, 1)


def scene_distance(origin, dirs, panel=True):
    t = room_hit(origin, dirs)
    if panel:
        t = np.minimum(t, panel_hit(origin, dirs))
    return t


def render_panorama(W, H, origin=(0.0, 0.0, 0.0), panel=True):
    """RGB and ray depth of the analytic scene from ``origin`` with identity rotation."""
    o = np.asarray(origin, dtype=np.float64)
    d = equirect_dirs(W, H)
    t = scene_distance(o, d, panel)
    return texture(o + t[..., None] * d), t


def flags_8(depth, tau):
    """8-neighborhood relative depth jump, wrapped in x, edge-padded in y."""
    H, W = depth.shape
    pad = np.concatenate([depth[:1], depth, depth[-1:]], axis=0)
    pad = np.concatenate([pad[:, -1:], pad, pad[:, :1]], axis=1)
    out = np.zeros((H, W), bool)
    for dj in (-1, 0, 1):
        for di in (-1, 0, 1):
            nb = pad[1 + dj : 1 + dj + H, 1 + di : 1 + di + W]
            out |= np.abs(nb - depth) / np.minimum(nb, depth) > tau
    return out


def lateral_hit(origin, dirs, z0=PANEL_Z, half=PANEL_HALF):
    """Distance to the four side faces of the panel's shadow volume as cast
    from the world origin, clipped to depths between the panel and the far wall."""
    best = np.full(dirs.shape[:-1], np.inf)
    edges = []
    c = [(-half, -half), (half, -half), (half, half), (-half, half)]
    for k in range(4):
        a = np.array([c[k][0], c[k][1], z0])
        b = np.array([c[(k + 1) % 4][0], c[(k + 1) % 4][1], z0])
        edges.append((a, b))
    far = ROOM_HI[2]
    for a, b in edges:
        # quad a, b, b * s, a * s with s = far / z0; split into two triangles
        s = far / z0
        for tri in ((a, b, b * s), (a, b * s, a * s)):
            best = np.minimum(best, _tri_hit(origin, dirs, *tri))
    return best


def _tri_hit(o, d, a, b, c, eps=1e-12):
    e1 = b - a
    e2 = c - a
    p = np.cross(d, e2)
    det = p @ e1
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = o - a
        u = (p @ s) * inv
        q = np.cross(s, e1)
        v = (d @ q) * inv
        t = (q @ e2) * inv
    ok = (np.abs(det) > eps) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return np.where(ok, t, np.inf)


def in_panel_shadow(points, z0=PANEL_Z, half=PANEL_HALF):
    """True where the segment from the world origin to the point passes the panel."""
    p = np.asarray(points)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = z0 / p[..., 2]
    q = p * s[..., None]
    return (p[..., 2] > z0) & (np.abs(q[..., 0]) <= half) & (np.abs(q[..., 1]) <= half)


def psnr(a, b, mask=None):
    diff = (np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2
    if mask is not None:
        diff = diff[mask]
    mse = diff.mean()
    return np.inf if mse == 0 else 10 * np.log10(1.0 / mse)


def box_obstacle_floorplan(rng, nx=14, nz=10, spacing=2.0, jitter=0.3):
    """Jittered grid of walkable (x, z) points with a few full-height boxes."""
    gx, gz = np.meshgrid(np.arange(nx) * spacing, np.arange(nz) * spacing)
    pts = np.stack([gx.ravel(), gz.ravel()], axis=1)
    pts = pts + rng.uniform(-jitter, jitter, pts.shape)
    return pts


def ray_mesh_oracle(origin, rays, positions, faces):
    """Brute-force nearest hit of each ray against every triangle.

    Returns (distance along the unit ray, face index, barycentrics); ties go to
    the lower face index. Meant for small meshes only.
    """
    rays = np.asarray(rays, dtype=np.float64)
    shape = rays.shape[:-1]
    d = rays.reshape(-1, 3)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    best = np.full(len(d), np.inf)
    fid = np.full(len(d), -1)
    bary = np.zeros((len(d), 3))
    for k, (ia, ib, ic) in enumerate(faces):
        a, b, c = positions[ia], positions[ib], positions[ic]
        n = np.cross(b - a, c - a)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((a - origin) @ n) / denom
        p = origin + t[:, None] * d
        # barycentrics from signed sub-areas
        area = n @ n
        wa = (np.cross(c - b, p - b) @ n) / area
        wb = (np.cross(a - c, p - c) @ n) / area
        wc = 1 - wa - wb
        ok = (np.abs(denom) > 1e-14) & (t > 0) & (wa >= 0) & (wb >= 0) & (wc >= 0) & (t < best)
        best[ok] = t[ok]
        fid[ok] = k
        bary[ok] = np.stack([wa, wb, wc], axis=1)[ok]
    return best.reshape(shape), fid.reshape(shape), bary.reshape(shape + (3,))


def keyframe_harness(n, W, H, scales, seed=0, noise=0.0):
    """Depth maps of the room mesh from ``n`` nearby poses, each divided by its scale.

    Frame 0 is the mesh's own source view; ``noise`` is a relative per-pixel
    Gaussian perturbation.
    """
    from panoworld.mesh import build_scene_mesh
    from panoworld.pano import CameraPose, rot_y
    from panoworld.raster import raycast_equirect

    rng = np.random.default_rng(seed)
    rgb, depth = render_panorama(W, H, panel=False)
    mesh = build_scene_mesh(rgb, depth)
    poses = [CameraPose.identity()]
    for _ in range(n - 1):
        poses.append(CameraPose(rot_y(rng.uniform(-np.pi, np.pi)), rng.uniform([-1, -0.5, -1], [1, 0.5, 1])))
    depths = []
    for k, pose in enumerate(poses):
        if k == 0:
            d = depth
        else:
            d = raycast_equirect(mesh, pose, W, H).distance
            # rays through the mesh's pole holes see the flat ceiling or floor
            miss = ~np.isfinite(d)
            d[miss] = room_hit(pose.position, equirect_dirs(W, H) @ pose.rotation.T)[miss]
        d = d / scales[k]
        if noise:
            d = d * (1 + noise * rng.standard_normal(d.shape))
        depths.append(d)
    return mesh, poses, depths


def _quat_matrix(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def dense_splat(means, scales, quats, opac, cols, view_rot, origin, fov, size):
    """Every Gaussian evaluated at every pixel, sorted by camera depth, composited
    front to back over black. Returns (rgb, per-Gaussian alpha maps before clamping)."""
    f = size / (2 * np.tan(fov / 2))
    order = []
    fields = []
    for k in range(len(means)):
        t = view_rot.T @ (means[k] - origin)
        if t[2] <= 0.01:
            continue
        R = _quat_matrix(quats[k])
        cov = view_rot.T @ (R @ np.diag(scales[k] ** 2) @ R.T) @ view_rot
        lim = 1.3 * np.tan(fov / 2)
        jx, jy = np.clip(t[:2] / t[2], -lim, lim) * t[2]
        J = np.array([[f / t[2], 0, -f * jx / t[2] ** 2], [0, f / t[2], -f * jy / t[2] ** 2]])
        c2 = J @ cov @ J.T
        if np.linalg.det(c2) <= 1e-12:
            c2 = c2 + 1e-6 * np.eye(2)
        inv = np.linalg.inv(c2)
        mu = np.array([f * t[0] / t[2] + size / 2, f * t[1] / t[2] + size / 2])
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        dx = np.stack([xx - mu[0], yy - mu[1]], -1)
        q = np.einsum("...i,ij,...j->...", dx, inv, dx)
        order.append((t[2], k))
        fields.append(opac[k] * np.exp(-0.5 * q))
    img = np.zeros((size, size, 3))
    trans = np.ones((size, size))
    alphas = {}
    for (_, k), a in sorted(zip(order, fields), key=lambda p: p[0]):
        alphas[k] = a
        a = np.where(a < 1 / 255, 0.0, np.minimum(a, 0.999))
        img += (a * trans)[..., None] * cols[k]
        trans *= 1 - a
    return img, alphas


def random_splat_scene(rng, n=5, size=32):
    """Gaussians scattered in front of a random camera; returns cloud kwargs and view."""
    from panoworld.pano import CameraPose, PerspectiveViewSpec
    from scipy.spatial.transform import Rotation

    R = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
    origin = rng.uniform(-2, 2, 3)
    spec = PerspectiveViewSpec(rng.uniform(-np.pi, np.pi), rng.uniform(-0.5, 0.5), np.radians(60), size)
    pose = CameraPose(R, origin)
    Rv = R @ spec.rotation
    local = np.stack([rng.uniform(-0.4, 0.4, n), rng.uniform(-0.4, 0.4, n), np.ones(n)], 1) * rng.uniform(2, 6, (n, 1))
    cloud = dict(
        means=origin + local @ Rv.T,
        scales=rng.uniform(0.1, 0.8, (n, 3)),
        rotations=Rotation.random(n, random_state=int(rng.integers(2**31))).as_quat(scalar_first=True),
        opacities=rng.uniform(0.05, 1.0, n),
        colors=rng.uniform(0, 1, (n, 3)),
    )
    return cloud, pose, spec
