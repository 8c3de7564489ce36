"""Software rendering of scene meshes: perspective z-buffer rasterizer, cubemap
stitching to equirect guidance frames, and an exact equirect ray caster."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from .errors import DomainError
from .mesh import SceneMesh
from .pano import (
    CameraPose,
    PerspectiveViewSpec,
    Trajectory,
    directions_to_pixels,
    equirect_directions,
)

NEAR = 1e-3
CUBE_SKIRT = 1
MIN_FACE_SIZE = 64

# front, right, back, left, up, down
CUBE_YAW_PITCH = (
    (0.0, 0.0),
    (math.pi / 2, 0.0),
    (math.pi, 0.0),
    (-math.pi / 2, 0.0),
    (0.0, math.pi / 2),
    (0.0, -math.pi / 2),
)


@dataclass(frozen=True, eq=False)
class RasterOutput:
    rgb: np.ndarray  # (S, S, 3)
    mask: np.ndarray  # (S, S) bool
    zbuffer: np.ndarray  # (S, S) ray distance, inf where empty
    face_id: np.ndarray  # (S, S) int64, -1 where empty
    spec: PerspectiveViewSpec


@dataclass(frozen=True, eq=False)
class MaskedFrame:
    rgb: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool
    zbuffer: Optional[np.ndarray] = None
    face_id: Optional[np.ndarray] = None


@numba.njit(cache=True)
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@numba.njit(cache=True)
def _raster_tri(q, c, fid, focal, size, rgb, zbuf, fids, raylen):
    half = size / 2.0
    x0 = focal * q[0, 0] / q[0, 2] + half
    y0 = focal * q[0, 1] / q[0, 2] + half
    x1 = focal * q[1, 0] / q[1, 2] + half
    y1 = focal * q[1, 1] / q[1, 2] + half
    x2 = focal * q[2, 0] / q[2, 2] + half
    y2 = focal * q[2, 1] / q[2, 2] + half
    area = _edge(x0, y0, x1, y1, x2, y2)
    if area == 0.0 or not np.isfinite(area):
        return
    lo_x = max(min(x0, x1, x2), -1.0)
    hi_x = min(max(x0, x1, x2), size + 1.0)
    lo_y = max(min(y0, y1, y2), -1.0)
    hi_y = min(max(y0, y1, y2), size + 1.0)
    i0 = max(int(math.ceil(lo_x - 0.5)), 0)
    i1 = min(int(math.floor(hi_x - 0.5)), size - 1)
    j0 = max(int(math.ceil(lo_y - 0.5)), 0)
    j1 = min(int(math.floor(hi_y - 0.5)), size - 1)
    sgn = 1.0 if area > 0 else -1.0
    iz0 = 1.0 / q[0, 2]
    iz1 = 1.0 / q[1, 2]
    iz2 = 1.0 / q[2, 2]
    for j in range(j0, j1 + 1):
        py = j + 0.5
        for i in range(i0, i1 + 1):
            px = i + 0.5
            w0 = _edge(x1, y1, x2, y2, px, py) * sgn
            w1 = _edge(x2, y2, x0, y0, px, py) * sgn
            w2 = _edge(x0, y0, x1, y1, px, py) * sgn
            if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                continue
            l0 = w0 / (area * sgn)
            l1 = w1 / (area * sgn)
            l2 = w2 / (area * sgn)
            p0 = l0 * iz0
            p1 = l1 * iz1
            p2 = l2 * iz2
            iz = p0 + p1 + p2
            if iz <= 0.0:
                continue
            z = 1.0 / iz
            rd = z * raylen[j, i]
            if rd < zbuf[j, i]:
                zbuf[j, i] = rd
                fids[j, i] = fid
                for ch in range(3):
                    rgb[j, i, ch] = (p0 * c[0, ch] + p1 * c[1, ch] + p2 * c[2, ch]) * z


@numba.njit(cache=True)
def _rasterize(cam, colors, faces, focal, size, near, raylen):
    rgb = np.zeros((size, size, 3))
    zbuf = np.full((size, size), np.inf)
    fids = np.full((size, size), -1, dtype=np.int64)
    lim = size / (2.0 * focal)
    q = np.empty((3, 3))
    c = np.empty((3, 3))
    poly = np.empty((4, 3))
    pcol = np.empty((4, 3))
    for f in range(faces.shape[0]):
        a = faces[f, 0]
        b = faces[f, 1]
        d = faces[f, 2]
        za = cam[a, 2]
        zb = cam[b, 2]
        zd = cam[d, 2]
        if za <= near and zb <= near and zd <= near:
            continue
        # conservative frustum rejection against the four side planes
        if (cam[a, 0] > lim * za and cam[b, 0] > lim * zb and cam[d, 0] > lim * zd) or (
            cam[a, 0] < -lim * za and cam[b, 0] < -lim * zb and cam[d, 0] < -lim * zd
        ):
            continue
        if (cam[a, 1] > lim * za and cam[b, 1] > lim * zb and cam[d, 1] > lim * zd) or (
            cam[a, 1] < -lim * za and cam[b, 1] < -lim * zb and cam[d, 1] < -lim * zd
        ):
            continue
        idx = (a, b, d)
        if za > near and zb > near and zd > near:
            for k in range(3):
                for ch in range(3):
                    q[k, ch] = cam[idx[k], ch]
                    c[k, ch] = colors[idx[k], ch]
            _raster_tri(q, c, f, focal, size, rgb, zbuf, fids, raylen)
            continue
        # clip against z = near (Sutherland-Hodgman), at most 4 output vertices
        n = 0
        for k in range(3):
            cur = idx[k]
            nxt = idx[(k + 1) % 3]
            zc = cam[cur, 2]
            zn = cam[nxt, 2]
            if zc > near:
                for ch in range(3):
                    poly[n, ch] = cam[cur, ch]
                    pcol[n, ch] = colors[cur, ch]
                n += 1
            if (zc > near) != (zn > near):
                t = (near - zc) / (zn - zc)
                for ch in range(3):
                    poly[n, ch] = cam[cur, ch] + t * (cam[nxt, ch] - cam[cur, ch])
                    pcol[n, ch] = colors[cur, ch] + t * (colors[nxt, ch] - colors[cur, ch])
                poly[n, 2] = near
                n += 1
        for k in range(1, n - 1):
            for ch in range(3):
                q[0, ch] = poly[0, ch]
                q[1, ch] = poly[k, ch]
                q[2, ch] = poly[k + 1, ch]
                c[0, ch] = pcol[0, ch]
                c[1, ch] = pcol[k, ch]
                c[2, ch] = pcol[k + 1, ch]
            _raster_tri(q, c, f, focal, size, rgb, zbuf, fids, raylen)
    return rgb, zbuf, fids


def view_rotation(pose: CameraPose, spec: PerspectiveViewSpec) -> np.ndarray:
    """World-from-view rotation of a crop ``spec`` taken in the frame of ``pose``."""
    return pose.rotation @ spec.rotation


def rasterize_perspective(mesh: SceneMesh, pose: CameraPose, spec: PerspectiveViewSpec) -> RasterOutput:
    """Z-buffered, perspective-correct rasterization of ``mesh`` into one pinhole view.

    No backface culling. Ties in ray distance keep the lower face index.
    """
    s = spec.size
    rays = spec.camera_rays()
    raylen = np.linalg.norm(rays, axis=-1)
    if mesh.n_faces == 0:
        rgb = np.zeros((s, s, 3))
        zbuf = np.full((s, s), np.inf)
        fids = np.full((s, s), -1, dtype=np.int64)
    else:
        cam = np.ascontiguousarray((mesh.positions - pose.position) @ view_rotation(pose, spec))
        rgb, zbuf, fids = _rasterize(cam, mesh.colors, mesh.faces, spec.focal, s, NEAR, raylen)
    mask = np.zeros((s, s), dtype=bool)
    hit = fids >= 0
    if hit.any():
        mask[hit] = mesh.face_visible()[fids[hit]]
    return RasterOutput(rgb=rgb, mask=mask, zbuffer=zbuf, face_id=fids, spec=spec)


def cube_face_specs(face_size: int) -> list:
    """Six 90-degree faces, each padded with a ``CUBE_SKIRT`` pixel border."""
    if face_size < 1:
        raise DomainError("face_size must be >= 1")
    padded = face_size + 2 * CUBE_SKIRT
    fov = 2.0 * math.atan(padded / face_size)
    return [PerspectiveViewSpec(yaw, pitch, fov, padded) for yaw, pitch in CUBE_YAW_PITCH]


def render_cubemap(mesh: SceneMesh, pose: CameraPose, face_size: int) -> list:
    """Render front, right, back, left, up, down faces around ``pose``.

    Each face is ``face_size + 2`` pixels wide; its central ``face_size`` square
    is exactly the 90-degree cube face, the border is the stitching skirt.
    """
    return [rasterize_perspective(mesh, pose, spec) for spec in cube_face_specs(face_size)]


def _select_faces(d):
    ax = np.abs(d)
    major = np.argmax(ax[..., [2, 0, 1]], axis=-1)  # ties resolved z, x, y
    comp = np.choose(major, [d[..., 2], d[..., 0], d[..., 1]])
    neg = comp < 0
    # z: front(0)/back(2); x: right(1)/left(3); y: down(5)/up(4)
    return np.choose(major, [np.where(neg, 2, 0), np.where(neg, 3, 1), np.where(neg, 4, 5)])


def _bilinear_clamped(img, u, v):
    S = img.shape[0]
    u = u - 0.5
    v = v - 0.5
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    c0 = np.clip(u0.astype(np.int64), 0, S - 1)
    c1 = np.clip(u0.astype(np.int64) + 1, 0, S - 1)
    r0 = np.clip(v0.astype(np.int64), 0, S - 1)
    r1 = np.clip(v0.astype(np.int64) + 1, 0, S - 1)
    top = img[r0, c0] * (1 - fu) + img[r0, c1] * fu
    bot = img[r1, c0] * (1 - fu) + img[r1, c1] * fu
    return top * (1 - fv) + bot * fv


@numba.njit(cache=True)
def _resolve(cam, faces, dirs, cand, eps):
    # nearest hit among each ray's candidate faces; ties go to the lower face id
    n = dirs.shape[0]
    dist = np.full(n, np.inf)
    fids = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 3))
    for k in range(n):
        for c in range(cand.shape[1]):
            f = cand[k, c]
            if f < 0:
                continue
            a = cam[faces[f, 0]]
            t, u, v = _ray_tri(dirs[k], a, cam[faces[f, 1]] - a, cam[faces[f, 2]] - a, eps)
            if t > 0.0 and (t < dist[k] or (t == dist[k] and f < fids[k])):
                dist[k] = t
                fids[k] = f
                bary[k, 0] = 1.0 - u - v
                bary[k, 1] = u
                bary[k, 2] = v
    return dist, fids, bary


def cubemap_to_equirect(
    faces: Sequence[RasterOutput], W: int, H: int, mesh: SceneMesh | None = None, pose: CameraPose | None = None
) -> MaskedFrame:
    """Stitch six cube faces into an equirect frame.

    Without ``mesh`` colors are bilinear and mask, depth and face id come from
    the nearest texel. With ``mesh`` and ``pose`` each pixel ray is intersected
    with the faces seen by the 3x3 texels around it and shaded from the nearest
    hit, so the mask edge does not inherit the cube texel size. Rays that hit
    none of their candidates, e.g. through slivers no texel center landed on,
    are cast against the whole mesh.
    """
    if W != 2 * H:
        raise DomainError(f"equirect output must have W = 2H, got {W}x{H}")
    if len(faces) != 6:
        raise DomainError("need exactly six cube faces")
    d = equirect_directions(W, H)
    sel = _select_faces(d)
    rgb = np.zeros((H, W, 3))
    mask = np.zeros((H, W), dtype=bool)
    zbuf = np.full((H, W), np.inf)
    fids = np.full((H, W), -1, dtype=np.int64)
    refine = mesh is not None and pose is not None and mesh.n_faces > 0
    resolved = np.zeros((H, W), dtype=bool)
    if refine:
        cam = np.ascontiguousarray((mesh.positions - pose.position) @ pose.rotation)
        visible = mesh.face_visible()
    for k, face in enumerate(faces):
        m = sel == k
        if not m.any():
            continue
        spec = face.spec
        local = d[m] @ spec.rotation
        u = spec.focal * local[:, 0] / local[:, 2] + spec.size / 2.0
        v = spec.focal * local[:, 1] / local[:, 2] + spec.size / 2.0
        iu = np.clip(np.floor(u).astype(np.int64), 0, spec.size - 1)
        iv = np.clip(np.floor(v).astype(np.int64), 0, spec.size - 1)
        f_rgb = _bilinear_clamped(face.rgb, u, v)
        f_mask = face.mask[iv, iu]
        f_z = face.zbuffer[iv, iu]
        f_id = face.face_id[iv, iu]
        if refine:
            cand = np.stack(
                [
                    face.face_id[np.clip(iv + dv, 0, spec.size - 1), np.clip(iu + du, 0, spec.size - 1)]
                    for dv in (-1, 0, 1)
                    for du in (-1, 0, 1)
                ],
                axis=1,
            )
            t, fid, bary = _resolve(cam, mesh.faces, np.ascontiguousarray(d[m]), cand, 1e-12)
            hit = fid >= 0
            tri = mesh.faces[fid[hit]]
            f_rgb[hit] = np.einsum("nk,nkc->nc", bary[hit], mesh.colors[tri])
            f_mask[hit] = visible[fid[hit]]
            f_z[hit] = t[hit]
            f_id[hit] = fid[hit]
            resolved[m] = hit
        rgb[m] = f_rgb
        mask[m] = f_mask
        zbuf[m] = f_z
        fids[m] = f_id
    if refine and not resolved.all():
        rest = ~resolved
        rgb[rest] = 0.0
        mask[rest] = False
        zbuf[rest] = np.inf
        fids[rest] = -1
        _shade(mesh, raycast_equirect(mesh, pose, W, H, pixels=rest), rgb, mask, zbuf, fids)
    return MaskedFrame(rgb=rgb, mask=mask, zbuffer=zbuf, face_id=fids)


def _shade(mesh, hit, rgb, mask, zbuf, fids):
    ok = hit.face_id >= 0
    if ok.any():
        tri = mesh.faces[hit.face_id[ok]]
        rgb[ok] = np.einsum("nk,nkc->nc", hit.barycentric[ok], mesh.colors[tri])
        mask[ok] = mesh.face_visible()[hit.face_id[ok]]
        zbuf[ok] = hit.distance[ok]
        fids[ok] = hit.face_id[ok]


def guidance_face_size(H: int) -> int:
    return max(MIN_FACE_SIZE, math.ceil(H / 2))


def render_equirect(mesh: SceneMesh, pose: CameraPose, W: int, H: int) -> MaskedFrame:
    return cubemap_to_equirect(render_cubemap(mesh, pose, guidance_face_size(H)), W, H, mesh, pose)


def render_guidance_video(mesh: SceneMesh, traj: Trajectory, W: int, H: int) -> list:
    if W != 2 * H:
        raise DomainError(f"guidance frames must have W = 2H, got {W}x{H}")
    return [render_equirect(mesh, pose, W, H) for pose in traj]


# --- exact ray casting on the equirect grid ---------------------------------

_UP = np.array([0.0, -1.0, 0.0])


@numba.njit(cache=True)
def _cross(a, b):
    return np.array(
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    )


@numba.njit(cache=True)
def _ray_tri(d, a, e1, e2, eps):
    """Moeller-Trumbore from the origin, inclusive edges; returns (t, u, v), t<0 on miss."""
    p = _cross(d, e2)
    det = e1[0] * p[0] + e1[1] * p[1] + e1[2] * p[2]
    if det == 0.0:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    tv = -a
    u = (tv[0] * p[0] + tv[1] * p[1] + tv[2] * p[2]) * inv
    if u < -eps or u > 1.0 + eps:
        return -1.0, 0.0, 0.0
    qv = _cross(tv, e1)
    v = (d[0] * qv[0] + d[1] * qv[1] + d[2] * qv[2]) * inv
    if v < -eps or u + v > 1.0 + eps:
        return -1.0, 0.0, 0.0
    t = (e2[0] * qv[0] + e2[1] * qv[1] + e2[2] * qv[2]) * inv
    return t, u, v


@numba.njit(cache=True)
def _elev(p):
    return math.atan2(-p[1], math.sqrt(p[0] * p[0] + p[2] * p[2]))


@numba.njit(cache=True)
def _arc_extreme(p, q, target):
    """Elevation of ``target``'s projection onto the great circle p-q if it lies on the arc."""
    n = _cross(p, q)
    nn = math.sqrt(n[0] ** 2 + n[1] ** 2 + n[2] ** 2)
    if nn < 1e-15:
        return np.nan
    n = n / nn
    k = target[0] * n[0] + target[1] * n[1] + target[2] * n[2]
    e = target - k * n
    en = math.sqrt(e[0] ** 2 + e[1] ** 2 + e[2] ** 2)
    if en < 1e-15:
        return np.nan
    e = e / en
    s1 = _cross(p, e)
    s2 = _cross(e, q)
    if s1[0] * n[0] + s1[1] * n[1] + s1[2] * n[2] >= 0.0 and s2[0] * n[0] + s2[1] * n[1] + s2[2] * n[2] >= 0.0:
        return _elev(e)
    return np.nan


@numba.njit(cache=True)
def _wrap(a):
    while a > math.pi:
        a -= 2.0 * math.pi
    while a <= -math.pi:
        a += 2.0 * math.pi
    return a


@numba.njit(cache=True)
def _raycast(cam, faces, dirs, W, H, eps, need):
    dist = np.full((H, W), np.inf)
    fids = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    up = np.array([0.0, -1.0, 0.0])
    down = np.array([0.0, 1.0, 0.0])
    pad = 1e-6
    for f in range(faces.shape[0]):
        a = cam[faces[f, 0]]
        b = cam[faces[f, 1]]
        c = cam[faces[f, 2]]
        na = math.sqrt(a[0] ** 2 + a[1] ** 2 + a[2] ** 2)
        nb = math.sqrt(b[0] ** 2 + b[1] ** 2 + b[2] ** 2)
        nc = math.sqrt(c[0] ** 2 + c[1] ** 2 + c[2] ** 2)
        if na == 0.0 or nb == 0.0 or nc == 0.0:
            continue
        e1 = b - a
        e2 = c - a
        ua = a / na
        ub = b / nb
        uc = c / nc
        hi = max(_elev(ua), _elev(ub), _elev(uc))
        lo = min(_elev(ua), _elev(ub), _elev(uc))
        full = False
        for p, q in ((ua, ub), (ub, uc), (uc, ua)):
            x = _arc_extreme(p, q, up)
            if not np.isnan(x):
                hi = max(hi, x)
            x = _arc_extreme(p, q, down)
            if not np.isnan(x):
                lo = min(lo, x)
        t, _, _ = _ray_tri(up, a, e1, e2, eps)
        if t > 0.0:
            hi = math.pi / 2
            full = True
        t, _, _ = _ray_tri(down, a, e1, e2, eps)
        if t > 0.0:
            lo = -math.pi / 2
            full = True
        ha = math.sqrt(ua[0] ** 2 + ua[2] ** 2)
        hb = math.sqrt(ub[0] ** 2 + ub[2] ** 2)
        hc = math.sqrt(uc[0] ** 2 + uc[2] ** 2)
        if ha < 1e-12 or hb < 1e-12 or hc < 1e-12:
            full = True
        if full:
            x_lo = 0.0
            x_hi = float(W)
        else:
            pa = math.atan2(ua[0], ua[2])
            pb = pa + _wrap(math.atan2(ub[0], ub[2]) - pa)
            pc = pa + _wrap(math.atan2(uc[0], uc[2]) - pa)
            plo = min(pa, pb, pc)
            phi_hi = max(pa, pb, pc)
            if phi_hi - plo >= math.pi:
                x_lo = 0.0
                x_hi = float(W)
            else:
                x_lo = (plo + math.pi) * W / (2.0 * math.pi) - pad
                x_hi = (phi_hi + math.pi) * W / (2.0 * math.pi) + pad
        y_lo = (math.pi / 2 - hi) * H / math.pi - pad
        y_hi = (math.pi / 2 - lo) * H / math.pi + pad
        j0 = max(int(math.ceil(y_lo - 0.5)), 0)
        j1 = min(int(math.floor(y_hi - 0.5)), H - 1)
        i0 = int(math.ceil(x_lo - 0.5))
        i1 = int(math.floor(x_hi - 0.5))
        if full:
            i0 = 0
            i1 = W - 1
        for j in range(j0, j1 + 1):
            for ii in range(i0, i1 + 1):
                i = ii % W
                if not need[j, i]:
                    continue
                t, u, v = _ray_tri(dirs[j, i], a, e1, e2, eps)
                if t > 0.0 and t < dist[j, i]:
                    dist[j, i] = t
                    fids[j, i] = f
                    bary[j, i, 0] = 1.0 - u - v
                    bary[j, i, 1] = u
                    bary[j, i, 2] = v
    return dist, fids, bary


@dataclass(frozen=True, eq=False)
class RaycastResult:
    distance: np.ndarray  # (H, W), inf on miss
    face_id: np.ndarray  # (H, W), -1 on miss
    barycentric: np.ndarray  # (H, W, 3)


def raycast_equirect(
    mesh: SceneMesh, pose: CameraPose, W: int, H: int, faces=None, eps: float = 1e-12, pixels=None
) -> RaycastResult:
    """Cast every equirect pixel-center ray of ``pose`` against the mesh triangles.

    ``faces`` optionally restricts the test to a subset of face rows and
    ``pixels`` (an (H, W) bool array) to a subset of rays.
    """
    faces = mesh.faces if faces is None else np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
    cam = np.ascontiguousarray((mesh.positions - pose.position) @ pose.rotation)
    dirs = np.ascontiguousarray(equirect_directions(W, H))
    need = np.ones((H, W), dtype=bool) if pixels is None else np.ascontiguousarray(pixels, dtype=bool)
    if need.shape != (H, W):
        raise DomainError(f"pixel selection must be {H}x{W}, got {need.shape}")
    dist, fids, bary = _raycast(cam, faces, dirs, W, H, eps, need)
    return RaycastResult(dist, fids, bary)


def render_equirect_raycast(mesh: SceneMesh, pose: CameraPose, W: int, H: int) -> MaskedFrame:
    """Direct per-pixel equirect rendering; the reference path for the cubemap renderer."""
    hit = raycast_equirect(mesh, pose, W, H)
    rgb = np.zeros((H, W, 3))
    mask = np.zeros((H, W), dtype=bool)
    zbuf = np.full((H, W), np.inf)
    fids = np.full((H, W), -1, dtype=np.int64)
    _shade(mesh, hit, rgb, mask, zbuf, fids)
    return MaskedFrame(rgb=rgb, mask=mask, zbuffer=zbuf, face_id=fids)
