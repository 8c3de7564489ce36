"""Camera route sampling over walkable floor points.

Delaunay triangulation of the walkable points gives a path graph; routes are
Dijkstra shortest paths between random vertex pairs, Laplacian-smoothed,
length-filtered and collision-checked against axis-aligned boxes.

World layout: the walk plane is spanned by world X and Z, world up is -Y, so a
floor point ``(x, z)`` at plane height ``h`` sits at ``(x, -h, z)``.
"""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, DomainError, NoPathError
from .pano import CameraPose, Trajectory, rot_y

INF = -1  # the symbolic vertex at infinity


# --- exact predicates ----------------------------------------------------------

def orient2d(a, b, c) -> int:
    """Sign of the signed area of (a, b, c): +1 counter-clockwise."""
    l = (b[0] - a[0]) * (c[1] - a[1])
    r = (b[1] - a[1]) * (c[0] - a[0])
    det = l - r
    if abs(det) > 1e-15 * (abs(l) + abs(r)):
        return 1 if det > 0 else -1
    ax, ay, bx, by, cx, cy = (Fraction(v) for v in (a[0], a[1], b[0], b[1], c[0], c[1]))
    exact = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    return (exact > 0) - (exact < 0)


def incircle(a, b, c, d) -> int:
    """+1 if d lies strictly inside the circumcircle of counter-clockwise (a, b, c)."""
    adx, ady = a[0] - d[0], a[1] - d[1]
    bdx, bdy = b[0] - d[0], b[1] - d[1]
    cdx, cdy = c[0] - d[0], c[1] - d[1]
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    t1 = bdx * cdy - bdy * cdx
    t2 = cdx * ady - cdy * adx
    t3 = adx * bdy - ady * bdx
    det = alift * t1 + blift * t2 + clift * t3
    perm = (
        alift * (abs(bdx * cdy) + abs(bdy * cdx))
        + blift * (abs(cdx * ady) + abs(cdy * adx))
        + clift * (abs(adx * bdy) + abs(ady * bdx))
    )
    if abs(det) > 1e-14 * perm:
        return 1 if det > 0 else -1
    A, B, C, D = ([Fraction(p[0]), Fraction(p[1])] for p in (a, b, c, d))
    adx, ady = A[0] - D[0], A[1] - D[1]
    bdx, bdy = B[0] - D[0], B[1] - D[1]
    cdx, cdy = C[0] - D[0], C[1] - D[1]
    exact = (
        (adx * adx + ady * ady) * (bdx * cdy - bdy * cdx)
        + (bdx * bdx + bdy * bdy) * (cdx * ady - cdy * adx)
        + (cdx * cdx + cdy * cdy) * (adx * bdy - ady * bdx)
    )
    return (exact > 0) - (exact < 0)


# --- Delaunay triangulation --------------------------------------------------

def _check_points(points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DomainError(f"expected (N, 2) points, got shape {pts.shape}")
    if len(pts) < 3:
        raise DegenerateInputError("need at least 3 points")
    if not np.all(np.isfinite(pts)):
        raise DomainError("points must be finite")
    if len(np.unique(pts, axis=0)) != len(pts):
        raise DegenerateInputError("duplicate points")
    return pts


class _Triangulation:
    """Bowyer-Watson insertion with a single symbolic vertex at infinity."""

    def __init__(self, pts):
        self.pts = [tuple(p) for p in pts.tolist()]
        self.tris = {}
        self.edges = {}
        self._next = 0

    def add(self, tri):
        tid = self._next
        self._next += 1
        self.tris[tid] = tri
        a, b, c = tri
        self.edges[(a, b)] = tid
        self.edges[(b, c)] = tid
        self.edges[(c, a)] = tid
        return tid

    def remove(self, tid):
        a, b, c = self.tris.pop(tid)
        for e in ((a, b), (b, c), (c, a)):
            if self.edges.get(e) == tid:
                del self.edges[e]

    def conflicts(self, tid, p):
        a, b, c = self.tris[tid]
        P = self.pts
        if c != INF:
            return incircle(P[a], P[b], P[c], P[p]) > 0
        o = orient2d(P[a], P[b], P[p])
        if o > 0:
            return True
        if o < 0:
            return False
        pa, pb, pp = P[a], P[b], P[p]
        dot = (pp[0] - pa[0]) * (pb[0] - pa[0]) + (pp[1] - pa[1]) * (pb[1] - pa[1])
        len2 = (pb[0] - pa[0]) ** 2 + (pb[1] - pa[1]) ** 2
        return 0 < dot < len2

    def insert(self, p):
        seed = None
        for tid in reversed(list(self.tris)):
            if self.conflicts(tid, p):
                seed = tid
                break
        if seed is None:  # pragma: no cover - a new point always conflicts with something
            raise DegenerateInputError(f"point {p} could not be inserted")
        cavity = {seed}
        queue = deque([seed])
        while queue:
            tid = queue.popleft()
            a, b, c = self.tris[tid]
            for u, v in ((a, b), (b, c), (c, a)):
                nb = self.edges.get((v, u))
                if nb is not None and nb not in cavity and self.conflicts(nb, p):
                    cavity.add(nb)
                    queue.append(nb)
        boundary = []
        for tid in sorted(cavity):
            a, b, c = self.tris[tid]
            for u, v in ((a, b), (b, c), (c, a)):
                if self.edges.get((v, u)) not in cavity:
                    boundary.append((u, v))
        for tid in cavity:
            self.remove(tid)
        for u, v in boundary:
            if u == INF:
                self.add((v, p, INF))
            elif v == INF:
                self.add((p, u, INF))
            else:
                self.add((u, v, p))

    def finite(self):
        return [t for t in self.tris.values() if INF not in t]


def _lexkey(pts, i):
    return (pts[i][0], pts[i][1], i)


def _flip_cocircular(tris, pts):
    """Make every exactly cocircular quad use the diagonal through its
    lexicographically smallest vertex."""
    tris = [tuple(t) for t in tris]
    edges = {}

    def register(k):
        a, b, c = tris[k]
        edges[(a, b)] = k
        edges[(b, c)] = k
        edges[(c, a)] = k

    for k in range(len(tris)):
        register(k)
    work = sorted(edges)
    budget = 20 * len(work) + 10
    while work and budget > 0:
        budget -= 1
        u, v = work.pop()
        k = edges.get((u, v))
        m = edges.get((v, u))
        if k is None or m is None:
            continue
        w = next(q for q in tris[k] if q != u and q != v)
        x = next(q for q in tris[m] if q != u and q != v)
        r = tris[k].index(u)
        if tris[k][(r + 1) % 3] != v:  # pragma: no cover - edge map is oriented
            continue
        if incircle(pts[u], pts[v], pts[w], pts[x]) != 0:
            continue
        smallest = min((u, v, w, x), key=lambda i: _lexkey(pts, i))
        if smallest in (u, v):
            continue
        del edges[(u, v)], edges[(v, u)]
        tris[k] = (u, x, w)
        tris[m] = (x, v, w)
        register(k)
        register(m)
        work.extend([(u, x), (x, v), (v, w), (w, u)])
    return tris


def delaunay_triangulate(points) -> np.ndarray:
    """Delaunay triangles of 2-D ``points`` as counter-clockwise index triples.

    Cocircular ties are resolved deterministically, so the output does not
    depend on insertion order.
    """
    pts = _check_points(points)
    T = _Triangulation(pts)
    P = T.pts
    i0, i1 = 0, 1
    i2 = next((k for k in range(2, len(P)) if orient2d(P[i0], P[i1], P[k]) != 0), None)
    if i2 is None:
        raise DegenerateInputError("all points are collinear")
    if orient2d(P[i0], P[i1], P[i2]) < 0:
        i1, i2 = i2, i1
    T.add((i0, i1, i2))
    T.add((i1, i0, INF))
    T.add((i2, i1, INF))
    T.add((i0, i2, INF))
    for k in range(len(P)):
        if k not in (i0, i1, i2):
            T.insert(k)
    tris = _flip_cocircular(T.finite(), P)
    out = []
    for t in tris:
        r = t.index(min(t))
        out.append(t[r:] + t[:r])
    return np.array(sorted(out), dtype=np.int64).reshape(-1, 3)


# --- graph search ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathGraph:
    nodes: np.ndarray  # (N, 2) or (N, 3)
    edges: np.ndarray  # (E, 2) with i < j
    weights: np.ndarray  # (E,)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(w) != len(edges):
            raise DomainError("one weight per edge required")
        if edges.size and (edges.min() < 0 or edges.max() >= len(nodes)):
            raise DomainError("edge endpoint out of range")
        if np.any(~(w > 0)):
            raise DomainError("edge weights must be positive")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", w)
        adj = [[] for _ in range(len(nodes))]
        for (i, j), wt in zip(edges.tolist(), w.tolist()):
            adj[i].append((j, wt))
            adj[j].append((i, wt))
        for lst in adj:
            lst.sort()
        object.__setattr__(self, "_adj", adj)

    @property
    def n_nodes(self):
        return len(self.nodes)

    def neighbors(self, i):
        return self._adj[i]


def build_path_graph(triangles, points) -> PathGraph:
    pts = np.asarray(points, dtype=np.float64)
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    sides = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    sides = np.unique(np.sort(sides, axis=1), axis=0)
    w = np.linalg.norm(pts[sides[:, 0]] - pts[sides[:, 1]], axis=1)
    return PathGraph(pts, sides, w)


@dataclass(frozen=True, eq=False)
class PolylinePath:
    waypoints: np.ndarray
    nodes: Optional[tuple] = None

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=np.float64)
        if wp.ndim != 2 or len(wp) < 2:
            raise DomainError("a path needs at least two waypoints")
        if np.any(np.all(wp[1:] == wp[:-1], axis=1)):
            raise DomainError("consecutive waypoints must differ")
        object.__setattr__(self, "waypoints", wp)

    def __len__(self):
        return len(self.waypoints)


def shortest_path(graph: PathGraph, a: int, b: int) -> PolylinePath:
    """Dijkstra from ``a`` to ``b``; equal-length alternatives prefer the
    smaller predecessor index."""
    n = graph.n_nodes
    if not (0 <= a < n and 0 <= b < n):
        raise DomainError(f"node index out of range: {a}, {b}")
    if a == b:
        raise DomainError("start and goal coincide")
    dist = [math.inf] * n
    pred = [-1] * n
    done = [False] * n
    dist[a] = 0.0
    heap = [(0.0, a)]
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        if u == b:
            break
        for v, w in graph.neighbors(u):
            if done[v]:
                continue
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, v))
            elif nd == dist[v] and u < pred[v]:
                pred[v] = u
    if not done[b]:
        raise NoPathError(f"nodes {a} and {b} are disconnected")
    seq = [b]
    while seq[-1] != a:
        seq.append(pred[seq[-1]])
    seq.reverse()
    return PolylinePath(graph.nodes[seq], nodes=tuple(seq))


def path_length(path) -> float:
    wp = path.waypoints if isinstance(path, PolylinePath) else np.asarray(path, dtype=np.float64)
    return float(np.linalg.norm(np.diff(wp, axis=0), axis=1).sum())


def turning_angles(path) -> np.ndarray:
    """Absolute heading change at every interior waypoint, radians."""
    wp = path.waypoints if isinstance(path, PolylinePath) else np.asarray(path, dtype=np.float64)
    seg = np.diff(wp, axis=0)
    if len(seg) < 2:
        return np.zeros(0)
    u, v = seg[:-1], seg[1:]
    cos = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
    return np.arccos(np.clip(cos, -1.0, 1.0))


def laplacian_smooth(path: PolylinePath, lam: float = 0.5, iters: int = 10) -> PolylinePath:
    if not (0.0 < lam <= 1.0):
        raise DomainError(f"lambda must lie in (0, 1], got {lam}")
    p = path.waypoints.copy()
    for _ in range(int(iters)):
        mid = 0.5 * (p[:-2] + p[2:])
        p[1:-1] += lam * (mid - p[1:-1])
    return PolylinePath(p, nodes=path.nodes)


# --- collision checking ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AabbSet:
    mins: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    maxs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        lo = np.asarray(self.mins, dtype=np.float64).reshape(-1, 3)
        hi = np.asarray(self.maxs, dtype=np.float64).reshape(-1, 3)
        if lo.shape != hi.shape:
            raise DomainError("mins and maxs differ in shape")
        if np.any(lo > hi):
            raise DomainError("box min exceeds max")
        object.__setattr__(self, "mins", lo)
        object.__setattr__(self, "maxs", hi)

    def __len__(self):
        return len(self.mins)

    def distance(self, points) -> np.ndarray:
        """Distance of each point (M, 3) to the nearest box, shape (M,)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self) == 0:
            return np.full(len(pts), np.inf)
        gap = np.maximum(np.maximum(self.mins[None] - pts[:, None], pts[:, None] - self.maxs[None]), 0.0)
        return np.sqrt((gap**2).sum(axis=-1)).min(axis=1)


def walk_samples(waypoints, step: float) -> np.ndarray:
    """Points along the polyline spaced at most ``step`` apart, endpoints included."""
    wp = np.asarray(waypoints, dtype=np.float64)
    out = [wp[:1]]
    for a, b in zip(wp[:-1], wp[1:]):
        n = max(1, math.ceil(np.linalg.norm(b - a) / step))
        t = np.arange(1, n + 1)[:, None] / n
        out.append(a + t * (b - a))
    return np.concatenate(out)


def check_collision(path, boxes: AabbSet, step: float = 0.1, margin: float = 0.3):
    """First walked sample within ``margin`` of a box (boundary inclusive), else None."""
    if not step > 0:
        raise DomainError("step must be positive")
    if margin < 0:
        raise DomainError("margin must be non-negative")
    wp = path.waypoints if isinstance(path, PolylinePath) else np.asarray(path, dtype=np.float64)
    if wp.shape[1] != 3:
        raise DomainError("collision checks need 3-D waypoints")
    if len(boxes) == 0:
        return None
    samples = walk_samples(wp, step)
    hit = np.nonzero(boxes.distance(samples) <= margin)[0]
    return samples[hit[0]] if len(hit) else None


# --- route sampling ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WalkablePointSet:
    points: np.ndarray  # (N, 2) as (x, z)
    plane_height: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64).reshape(-1, 2))


@dataclass(frozen=True)
class RouteParams:
    min_len: float = 18.0
    n_frames: int = 81
    lam: float = 0.5
    iters: int = 10
    step: float = 0.1
    margin: float = 0.3
    camera_height: float = 1.6
    max_attempts: int = 1000


@dataclass(frozen=True, eq=False)
class Route:
    raw: PolylinePath
    smooth: PolylinePath
    trajectory: Trajectory
    attempts: int


_STAGES = ("disconnected", "too-short", "collision")


@dataclass(frozen=True)
class RouteRejection:
    """No route accepted. ``reason`` is the deepest pipeline stage any attempt reached."""

    reason: str
    attempts: int
    counts: dict


def lift(points2d, plane_height: float, camera_height: float) -> np.ndarray:
    p = np.asarray(points2d, dtype=np.float64)
    y = np.full((len(p), 1), -(plane_height + camera_height))
    return np.concatenate([p[:, :1], y, p[:, 1:2]], axis=1)


def resample_poses(waypoints3d, n_frames: int) -> Trajectory:
    """``n_frames`` poses at equal arc length; level camera facing along the path."""
    wp = np.asarray(waypoints3d, dtype=np.float64)
    seg = np.diff(wp, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(seg, axis=1))])
    s = np.linspace(0.0, cum[-1], n_frames)
    pos = np.stack([np.interp(s, cum, wp[:, k]) for k in range(3)], axis=1)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    poses = []
    for p, k in zip(pos, idx):
        t = seg[k]
        poses.append(CameraPose(rot_y(math.atan2(t[0], t[2])), p))
    return Trajectory(tuple(poses))


class RouteSampler:
    """Holds the triangulated path graph of a scene; draws seeded routes."""

    def __init__(self, walkable: WalkablePointSet, boxes: AabbSet, params: RouteParams = RouteParams()):
        self.walkable = walkable
        self.boxes = boxes
        self.params = params
        self.triangles = delaunay_triangulate(walkable.points)
        self.graph = build_path_graph(self.triangles, walkable.points)

    def _attempt(self, rng):
        prm = self.params
        a, b = (int(v) for v in rng.choice(self.graph.n_nodes, size=2, replace=False))
        try:
            raw = shortest_path(self.graph, a, b)
        except NoPathError:
            return "disconnected", None
        smooth = laplacian_smooth(raw, prm.lam, prm.iters)
        if path_length(smooth) < prm.min_len:
            return "too-short", None
        smooth3 = lift(smooth.waypoints, self.walkable.plane_height, prm.camera_height)
        traj = resample_poses(smooth3, prm.n_frames)
        traj_path = np.array([p.position for p in traj])
        if path_length(traj_path) < prm.min_len:
            return "too-short", None
        if (
            check_collision(smooth3, self.boxes, prm.step, prm.margin) is not None
            or check_collision(traj_path, self.boxes, prm.step, prm.margin) is not None
        ):
            return "collision", None
        return None, (raw, smooth, traj)

    def draw(self, seed):
        rng = np.random.default_rng(seed)
        counts = {k: 0 for k in _STAGES}
        for attempt in range(1, self.params.max_attempts + 1):
            reason, result = self._attempt(rng)
            if result is not None:
                return Route(result[0], result[1], result[2], attempt)
            counts[reason] += 1
        deepest = max((k for k in _STAGES if counts[k]), key=_STAGES.index)
        return RouteRejection(deepest, self.params.max_attempts, counts)


def sample_route(points: WalkablePointSet, boxes: AabbSet, params: RouteParams = RouteParams(), seed=0):
    """Trajectory for the first accepted route, or a :class:`RouteRejection`."""
    out = RouteSampler(points, boxes, params).draw(seed)
    return out.trajectory if isinstance(out, Route) else out
