"""3D Gaussian clouds: initialization, attribute-grid decoding, perspective
splatting, L1 gradients for color/opacity, and the optimization loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numba
import numpy as np

from .errors import DecodeError, DimensionMismatchError, DomainError
from .pano import CameraPose, PerspectiveViewSpec, pixels_to_directions

NEAR_PLANE = 0.01
JACOBIAN_MARGIN = 1.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999
INIT_OPACITY = 0.8
COV_REG = 1e-6
GRID_CHANNELS = 12


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    means: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 3), > 0
    rotations: np.ndarray  # (N, 4) unit quaternions (w, x, y, z)
    opacities: np.ndarray  # (N,) in [0, 1]
    colors: np.ndarray  # (N, 3) in [0, 1]

    def __post_init__(self):
        means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(means)
        scales = np.ascontiguousarray(self.scales, dtype=np.float64).reshape(n, 3)
        rots = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        opac = np.ascontiguousarray(self.opacities, dtype=np.float64).reshape(n)
        cols = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, 3)
        if np.any(~(scales > 0)):
            raise DomainError("scales must be positive")
        if n and np.abs(np.linalg.norm(rots, axis=1) - 1.0).max() > 1e-9:
            raise DomainError("rotations must be unit quaternions")
        if np.any((opac < 0) | (opac > 1)) or np.any((cols < 0) | (cols > 1)):
            raise DomainError("opacity and color must lie in [0, 1]")
        for name, v in (("means", means), ("scales", scales), ("rotations", rots), ("opacities", opac), ("colors", cols)):
            object.__setattr__(self, name, v)

    def __len__(self):
        return len(self.means)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    def subset(self, idx):
        return GaussianCloud(self.means[idx], self.scales[idx], self.rotations[idx], self.opacities[idx], self.colors[idx])


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def init_gaussians(points, colors, distances, width: int) -> GaussianCloud:
    """One isotropic Gaussian per point sized to a one-pixel angular footprint
    of a ``width``-pixel panorama at the point's source ray distance."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise DomainError("cannot initialize from an empty point set")
    dist = np.asarray(distances, dtype=np.float64).reshape(-1)
    n = len(pts)
    scale = dist * (2.0 * math.pi / width)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        means=pts,
        scales=np.repeat(scale[:, None], 3, axis=1),
        rotations=rot,
        opacities=np.full(n, INIT_OPACITY),
        colors=np.clip(np.asarray(colors, dtype=np.float64).reshape(n, 3), 0.0, 1.0),
    )


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p):
    return np.log(p) - np.log1p(-p)


def decode_attribute_grid(grid, poses: Sequence[CameraPose]) -> GaussianCloud:
    """Decode a (T, H, W, 12) raw attribute tensor into world-space Gaussians.

    Channel layout: color x3, scale x3, rotation x4 (w, x, y, z), opacity,
    depth. Means are placed by sphere projection along each cell's equirect ray.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 4 or g.shape[-1] != GRID_CHANNELS:
        raise DecodeError(f"expected (T, H, W, 12) grid, got {g.shape}")
    T, H, W, _ = g.shape
    if len(poses) != T:
        raise DecodeError(f"{len(poses)} poses for {T} grid frames")
    bad = ~np.isfinite(g).all(axis=-1)
    if bad.any():
        t, j, i = (int(v) for v in np.argwhere(bad)[0])
        raise DecodeError(f"non-finite attribute at cell (t={t}, j={j}, i={i})", cell=(t, j, i))
    qn = np.linalg.norm(g[..., 6:10], axis=-1)
    if np.any(qn == 0):
        t, j, i = (int(v) for v in np.argwhere(qn == 0)[0])
        raise DecodeError(f"zero rotation quaternion at cell (t={t}, j={j}, i={i})", cell=(t, j, i))
    x = np.arange(W) + 0.5
    y = np.arange(H) + 0.5
    dirs = pixels_to_directions(x[None, :], y[:, None], W, H)
    depth = np.exp(g[..., 11])
    means = np.empty((T, H, W, 3))
    for t, pose in enumerate(poses):
        means[t] = pose.position + depth[t][..., None] * (dirs @ pose.rotation.T)
    return GaussianCloud(
        means=means.reshape(-1, 3),
        scales=np.exp(g[..., 3:6]).reshape(-1, 3),
        rotations=(g[..., 6:10] / qn[..., None]).reshape(-1, 4),
        opacities=_sigmoid(g[..., 10]).reshape(-1),
        colors=_sigmoid(g[..., 0:3]).reshape(-1, 3),
    )


def encode_attribute_grid(cloud: GaussianCloud, poses: Sequence[CameraPose], H: int, W: int) -> np.ndarray:
    """Inverse of :func:`decode_attribute_grid` for a cloud laid out cell by cell.

    Only the distance of each mean from its frame's camera is stored, so means
    off their cell ray are not representable.
    """
    T = len(poses)
    if len(cloud) != T * H * W:
        raise DimensionMismatchError(f"cloud of {len(cloud)} Gaussians does not fill a {T}x{H}x{W} grid")
    eps = 1e-12
    g = np.empty((T, H, W, GRID_CHANNELS))
    means = cloud.means.reshape(T, H, W, 3)
    for t, pose in enumerate(poses):
        g[t, ..., 11] = np.log(np.linalg.norm(means[t] - pose.position, axis=-1))
    g[..., 0:3] = _logit(np.clip(cloud.colors, eps, 1 - eps)).reshape(T, H, W, 3)
    g[..., 3:6] = np.log(cloud.scales).reshape(T, H, W, 3)
    g[..., 6:10] = cloud.rotations.reshape(T, H, W, 4)
    g[..., 10] = _logit(np.clip(cloud.opacities, eps, 1 - eps)).reshape(T, H, W)
    return g


# --- splatting ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Projection:
    """Screen-space footprint of the Gaussians that can touch the image."""

    index: np.ndarray  # (M,) cloud indices, front-to-back
    uv: np.ndarray  # (M, 2) continuous pixel coords of the mean
    conic: np.ndarray  # (M, 3) inverse 2-D covariance (a, b, c)
    radius: np.ndarray  # (M,) pixel radius outside which alpha < ALPHA_MIN
    depth: np.ndarray  # (M,) camera-space z


def project_gaussians(cloud: GaussianCloud, pose: CameraPose, spec: PerspectiveViewSpec) -> Projection:
    Rv = pose.rotation @ spec.rotation
    t = (cloud.means - pose.position) @ Rv
    f = spec.focal
    half = spec.size / 2.0
    keep = (t[:, 2] > NEAR_PLANE) & (cloud.opacities * 255.0 > 1.0)
    idx = np.nonzero(keep)[0]
    t = t[idx]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    Rq = quat_to_matrix(cloud.rotations[idx])
    M = Rq * cloud.scales[idx][:, None, :]
    cov = M @ np.swapaxes(M, 1, 2)
    cov_cam = Rv.T[None] @ cov @ Rv[None]
    # the affine approximation degrades far off-axis; evaluate the Jacobian with
    # the direction clamped to a margin around the frustum
    lim = JACOBIAN_MARGIN * half / f
    jx = np.clip(tx / tz, -lim, lim) * tz
    jy = np.clip(ty / tz, -lim, lim) * tz
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = f / tz
    J[:, 0, 2] = -f * jx / tz**2
    J[:, 1, 1] = f / tz
    J[:, 1, 2] = -f * jy / tz**2
    cov2 = J @ cov_cam @ np.swapaxes(J, 1, 2)
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    sing = ~(det > 1e-12)
    a = np.where(sing, a + COV_REG, a)
    c = np.where(sing, c + COV_REG, c)
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = np.sqrt(2.0 * lam_max * np.log(255.0 * cloud.opacities[idx]))
    uv = np.stack([f * tx / tz + half, f * ty / tz + half], axis=1)
    ok = (
        np.isfinite(radius)
        & (det > 0)
        & (uv[:, 0] + radius > 0)
        & (uv[:, 0] - radius < spec.size)
        & (uv[:, 1] + radius > 0)
        & (uv[:, 1] - radius < spec.size)
    )
    order = np.argsort(tz[ok], kind="stable")
    sel = np.nonzero(ok)[0][order]
    return Projection(idx[sel], uv[sel], conic[sel], radius[sel], tz[sel])


@numba.njit(cache=True)
def _bounds(u, r, size):
    lo = max(int(math.ceil(u - r - 0.5)), 0)
    hi = min(int(math.floor(u + r - 0.5)), size - 1)
    return lo, hi


@numba.njit(cache=True)
def _alpha(o, conic, dx, dy):
    power = -0.5 * (conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy)
    g = math.exp(power)
    a = o * g
    return a, g


@numba.njit(cache=True)
def _splat_forward(uv, conic, radius, opac, cols, size):
    img = np.zeros((size, size, 3))
    trans = np.ones((size, size))
    for k in range(uv.shape[0]):
        i0, i1 = _bounds(uv[k, 0], radius[k], size)
        j0, j1 = _bounds(uv[k, 1], radius[k], size)
        for j in range(j0, j1 + 1):
            dy = j + 0.5 - uv[k, 1]
            for i in range(i0, i1 + 1):
                a, _ = _alpha(opac[k], conic[k], i + 0.5 - uv[k, 0], dy)
                if a < ALPHA_MIN:
                    continue
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                w = a * trans[j, i]
                for ch in range(3):
                    img[j, i, ch] += cols[k, ch] * w
                trans[j, i] *= 1.0 - a
    return img, trans


@numba.njit(cache=True)
def _splat_backward(uv, conic, radius, opac, cols, size, final, dimg):
    # second front-to-back pass; the color still to come behind Gaussian k is
    # final - accumulated, so no transmittance division chain is needed
    acc = np.zeros((size, size, 3))
    trans = np.ones((size, size))
    dcol = np.zeros((uv.shape[0], 3))
    dop = np.zeros(uv.shape[0])
    for k in range(uv.shape[0]):
        i0, i1 = _bounds(uv[k, 0], radius[k], size)
        j0, j1 = _bounds(uv[k, 1], radius[k], size)
        for j in range(j0, j1 + 1):
            dy = j + 0.5 - uv[k, 1]
            for i in range(i0, i1 + 1):
                a, g = _alpha(opac[k], conic[k], i + 0.5 - uv[k, 0], dy)
                if a < ALPHA_MIN:
                    continue
                clamped = a > ALPHA_MAX
                if clamped:
                    a = ALPHA_MAX
                T = trans[j, i]
                w = a * T
                dalpha = 0.0
                for ch in range(3):
                    acc[j, i, ch] += cols[k, ch] * w
                    behind = final[j, i, ch] - acc[j, i, ch]
                    dcol[k, ch] += dimg[j, i, ch] * w
                    dalpha += dimg[j, i, ch] * (cols[k, ch] * T - behind / (1.0 - a))
                if not clamped:
                    dop[k] += dalpha * g
                trans[j, i] = T * (1.0 - a)
    return dcol, dop


@dataclass(frozen=True, eq=False)
class SplatImage:
    rgb: np.ndarray  # (S, S, 3)
    alpha: np.ndarray  # (S, S) accumulated opacity


def render_gaussians(cloud: GaussianCloud, pose: CameraPose, spec: PerspectiveViewSpec) -> SplatImage:
    """Front-to-back alpha compositing of the cloud over a black background."""
    s = spec.size
    if len(cloud) == 0:
        return SplatImage(np.zeros((s, s, 3)), np.zeros((s, s)))
    proj = project_gaussians(cloud, pose, spec)
    img, trans = _splat_forward(
        proj.uv, proj.conic, proj.radius, cloud.opacities[proj.index], cloud.colors[proj.index], s
    )
    return SplatImage(img, 1.0 - trans)


def _l1_weights(shape, mask):
    # per-element weight of the masked mean absolute error
    if mask is None:
        return np.full(shape, 1.0 / np.prod(shape))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape[:2]:
        raise DimensionMismatchError(f"mask {mask.shape} vs image {shape[:2]}")
    n = int(mask.sum()) * shape[2]
    w = np.zeros(shape)
    if n:
        w[mask] = 1.0 / n
    return w


def l1_loss(render, target, mask=None) -> float:
    """Mean absolute error, over the pixels where ``mask`` is true when given."""
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if render.shape != target.shape:
        raise DimensionMismatchError(f"render {render.shape} vs target {target.shape}")
    if mask is None:
        return float(np.abs(render - target).mean())
    return float((np.abs(render - target) * _l1_weights(render.shape, mask)).sum())


@dataclass(frozen=True, eq=False)
class TrainingView:
    pose: CameraPose
    spec: PerspectiveViewSpec
    target: np.ndarray  # (S, S, 3)
    mask: Optional[np.ndarray] = None  # (S, S) bool; pixels outside it carry no loss


@dataclass(frozen=True, eq=False)
class LossGradients:
    loss: float
    colors: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)


def loss_gradients(cloud: GaussianCloud, view: TrainingView) -> LossGradients:
    """L1 loss of one view and its exact gradients w.r.t. color and opacity.

    Geometry (means, scales, rotations) is treated as fixed.
    """
    s = view.spec.size
    target = np.asarray(view.target, dtype=np.float64)
    if target.shape != (s, s, 3):
        raise DimensionMismatchError(f"target {target.shape} does not match view size {s}")
    n = len(cloud)
    dcol = np.zeros((n, 3))
    dop = np.zeros(n)
    if n == 0:
        return LossGradients(l1_loss(np.zeros_like(target), target, view.mask), dcol, dop)
    proj = project_gaussians(cloud, view.pose, view.spec)
    op = cloud.opacities[proj.index]
    cols = cloud.colors[proj.index]
    img, _ = _splat_forward(proj.uv, proj.conic, proj.radius, op, cols, s)
    dimg = np.sign(img - target) * _l1_weights(img.shape, view.mask)
    gc, go = _splat_backward(proj.uv, proj.conic, proj.radius, op, cols, s, img, dimg)
    dcol[proj.index] = gc
    dop[proj.index] = go
    return LossGradients(l1_loss(img, target, view.mask), dcol, dop)


@dataclass(frozen=True)
class OptimConfig:
    iters: int = 500
    lr: float = 0.1
    seed: int = 0
    final_lr_ratio: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15


@dataclass(frozen=True, eq=False)
class OptimState:
    cloud: GaussianCloud
    iteration: int
    loss_history: tuple


def optimize_gaussians(cloud: GaussianCloud, views: Sequence[TrainingView], config: OptimConfig = OptimConfig()) -> OptimState:
    """Adam descent on color and opacity, one randomly drawn view per step.

    The step size decays exponentially from ``lr`` to ``lr * final_lr_ratio``;
    parameters are clipped back to [0, 1] after each update.
    """
    if len(views) < 1:
        raise DomainError("need at least one training view")
    if not config.lr > 0:
        raise DomainError("learning rate must be positive")
    rng = np.random.default_rng(config.seed)
    params = np.concatenate([cloud.colors, cloud.opacities[:, None]], axis=1)
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    history = []
    current = cloud
    for step in range(config.iters):
        view = views[int(rng.integers(len(views)))]
        grads = loss_gradients(current, view)
        history.append(grads.loss)
        g = np.concatenate([grads.colors, grads.opacities[:, None]], axis=1)
        m = config.beta1 * m + (1 - config.beta1) * g
        v = config.beta2 * v + (1 - config.beta2) * g * g
        mhat = m / (1 - config.beta1 ** (step + 1))
        vhat = v / (1 - config.beta2 ** (step + 1))
        frac = step / max(config.iters - 1, 1)
        lr = config.lr * config.final_lr_ratio**frac
        params = np.clip(params - lr * mhat / (np.sqrt(vhat) + config.eps), 0.0, 1.0)
        current = replace(current, colors=params[:, :3], opacities=params[:, 3])
    return OptimState(current, config.iters, tuple(history))
