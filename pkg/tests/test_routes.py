import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull, Delaunay

from panoworld.errors import DegenerateInputError, DomainError, NoPathError
from panoworld.routes import (
    AabbSet,
    PathGraph,
    PolylinePath,
    Route,
    RouteParams,
    RouteRejection,
    RouteSampler,
    WalkablePointSet,
    build_path_graph,
    check_collision,
    delaunay_triangulate,
    incircle,
    laplacian_smooth,
    lift,
    orient2d,
    path_length,
    resample_poses,
    sample_route,
    shortest_path,
    turning_angles,
    walk_samples,
)


def _orient_exact(a, b, c):
    a, b, c = ([Fraction(v) for v in p] for p in (a, b, c))
    det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    return (det > 0) - (det < 0)


def _incircle_exact(a, b, c, d):
    rows = []
    for p in (a, b, c):
        x, y = Fraction(p[0]) - Fraction(d[0]), Fraction(p[1]) - Fraction(d[1])
        rows.append((x, y, x * x + y * y))
    (a1, a2, a3), (b1, b2, b3), (c1, c2, c3) = rows
    det = a1 * (b2 * c3 - b3 * c2) - a2 * (b1 * c3 - b3 * c1) + a3 * (b1 * c2 - b2 * c1)
    return (det > 0) - (det < 0)


coord = st.floats(-1e3, 1e3, allow_nan=False).map(lambda v: round(v, 3))
point = st.tuples(coord, coord)


@given(point, point, point)
def test_orient2d_exact(a, b, c):
    assert orient2d(a, b, c) == _orient_exact(a, b, c)


@given(point, point, point, point)
def test_incircle_exact(a, b, c, d):
    if _orient_exact(a, b, c) <= 0:
        return
    assert incircle(a, b, c, d) == _incircle_exact(a, b, c, d)


def test_predicates_near_degenerate():
    # points nearly on a line through large offsets; naive float evaluation misjudges these
    eps = 2.0**-45
    for k in range(-3, 4):
        a, b, c = (0.5 + k * eps, 0.5), (12.0, 12.0), (24.0, 24.0)
        assert orient2d(a, b, c) == _orient_exact(a, b, c)
    a, b, c = (0.0, 0.0), (1.0, 0.0), (0.0, 1.0)
    assert incircle(a, b, c, (1.0, 1.0)) == 0
    assert incircle(a, b, c, (1.0, 1.0 - 2.0**-52)) == 1
    assert incircle(a, b, c, (1.0, 1.0 + 2.0**-52)) == -1


def _empty_circle(tris, pts):
    for t in tris:
        a, b, c = (tuple(pts[i]) for i in t)
        assert _orient_exact(a, b, c) > 0
        for k in range(len(pts)):
            if k in t:
                continue
            assert _incircle_exact(a, b, c, tuple(pts[k])) <= 0


def test_unit_square_diagonal_is_stable():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    for perm in itertools.permutations(range(4)):
        tris = delaunay_triangulate(sq[list(perm)])
        names = {tuple(sorted(map(tuple, sq[list(perm)][t]))) for t in tris}
        # the shared diagonal runs through the lexicographically smallest corner (0, 0)
        assert all((0.0, 0.0) in n and (1.0, 1.0) in n for n in names)


def test_regular_grid_is_delaunay():
    g = np.stack(np.meshgrid(np.arange(6.0), np.arange(5.0)), -1).reshape(-1, 2)
    tris = delaunay_triangulate(g)
    assert len(tris) == 2 * 5 * 4
    _empty_circle(tris, g)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_delaunay_matches_scipy_in_general_position(seed):
    pts = np.random.default_rng(seed).uniform(0, 10, (40, 2))
    ours = {tuple(sorted(t)) for t in delaunay_triangulate(pts).tolist()}
    ref = {tuple(sorted(t)) for t in Delaunay(pts).simplices.tolist()}
    assert ours == ref


def test_delaunay_covers_hull():
    pts = np.random.default_rng(9).uniform(-5, 5, (60, 2))
    tris = delaunay_triangulate(pts)
    p = pts[tris]
    u, v = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    area = 0.5 * np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]).sum()
    assert area == pytest.approx(ConvexHull(pts).volume)
    assert set(np.unique(tris)) == set(range(60))


def test_delaunay_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        delaunay_triangulate([[0, 0], [1, 1], [2, 2], [3, 3]])
    with pytest.raises(DegenerateInputError):
        delaunay_triangulate([[0, 0], [1, 0], [0, 1], [1, 0]])
    with pytest.raises(DegenerateInputError):
        delaunay_triangulate([[0, 0], [1, 0]])
    with pytest.raises(DomainError):
        delaunay_triangulate(np.zeros((4, 3)))


def test_collinear_plus_one():
    pts = np.array([[0, 0], [1, 0], [2, 0], [3, 0], [1.5, 1]], float)
    tris = delaunay_triangulate(pts)
    assert len(tris) == 3
    _empty_circle(tris, pts)


def _nodes(n):
    # distinct positions; weights below are given explicitly
    return np.stack([np.arange(n, dtype=float), np.zeros(n)], 1)


def _enumerate_shortest(n, edges, a, b):
    w = {}
    for (i, j), c in edges.items():
        w[(i, j)] = w[(j, i)] = c
    best = math.inf
    others = [k for k in range(n) if k not in (a, b)]
    for r in range(len(others) + 1):
        for mid in itertools.permutations(others, r):
            seq = (a,) + mid + (b,)
            if all((seq[k], seq[k + 1]) in w for k in range(len(seq) - 1)):
                best = min(best, sum(w[(seq[k], seq[k + 1])] for k in range(len(seq) - 1)))
    return best


def test_dijkstra_small_oracle():
    rng = np.random.default_rng(11)
    for _ in range(15):
        n = int(rng.integers(3, 7))
        pairs = [p for p in itertools.combinations(range(n), 2) if rng.uniform() < 0.6]
        edges = {p: float(rng.integers(1, 6)) for p in pairs}
        g = PathGraph(_nodes(n), list(edges) or np.zeros((0, 2)), list(edges.values()))
        want = _enumerate_shortest(n, edges, 0, n - 1)
        if math.isinf(want):
            with pytest.raises(NoPathError):
                shortest_path(g, 0, n - 1)
            continue
        path = shortest_path(g, 0, n - 1)
        got = sum(edges[tuple(sorted(e))] for e in zip(path.nodes[:-1], path.nodes[1:]))
        assert got == want


def test_dijkstra_tie_prefers_smaller_predecessor():
    # two equal routes 0-1-3 and 0-2-3
    g = PathGraph(_nodes(4), [[0, 2], [2, 3], [0, 1], [1, 3]], [1, 1, 1, 1])
    assert shortest_path(g, 0, 3).nodes == (0, 1, 3)


def test_shortest_path_errors():
    g = PathGraph(_nodes(3), [[0, 1]], [1.0])
    with pytest.raises(NoPathError):
        shortest_path(g, 0, 2)
    with pytest.raises(DomainError):
        shortest_path(g, 0, 0)
    with pytest.raises(DomainError):
        shortest_path(g, 0, 5)
    with pytest.raises(DomainError):
        PathGraph(np.zeros((2, 2)), [[0, 1]], [0.0])


def test_graph_from_triangulation():
    pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    g = build_path_graph(delaunay_triangulate(pts), pts)
    assert len(g.edges) == 5
    assert shortest_path(g, 0, 2).nodes == (0, 2)
    assert path_length(shortest_path(g, 1, 3)) == pytest.approx(2.0)


def test_smoothing_fixes_endpoints_and_lines():
    line = PolylinePath(np.stack([np.arange(6.0), 2 * np.arange(6.0)], 1))
    out = laplacian_smooth(line, 0.5, 10)
    assert np.allclose(out.waypoints, line.waypoints)
    zig = PolylinePath(np.array([[0, 0], [1, 1], [2, 0], [3, 1], [4, 0]], float))
    sm = laplacian_smooth(zig, 0.5, 10)
    assert np.array_equal(sm.waypoints[[0, -1]], zig.waypoints[[0, -1]])
    assert turning_angles(sm).max() < turning_angles(zig).max()
    with pytest.raises(DomainError):
        laplacian_smooth(zig, 0.0)


def test_smoothing_is_one_jacobi_step_per_iteration():
    p = np.array([[0, 0], [1, 2], [3, 1], [4, 4]], float)
    out = laplacian_smooth(PolylinePath(p), 0.25, 1).waypoints
    want = p.copy()
    want[1:-1] = p[1:-1] + 0.25 * (0.5 * (p[:-2] + p[2:]) - p[1:-1])
    assert np.allclose(out, want)


def test_path_validation():
    with pytest.raises(DomainError):
        PolylinePath(np.zeros((1, 2)))
    with pytest.raises(DomainError):
        PolylinePath(np.array([[0, 0], [0, 0], [1, 0]], float))


def test_box_distance_and_margin_boundary():
    boxes = AabbSet([[0, 0, 0]], [[1, 1, 1]])
    assert boxes.distance([[2, 0.5, 0.5]])[0] == pytest.approx(1.0)
    assert boxes.distance([[0.5, 0.5, 0.5]])[0] == 0.0
    # sample exactly at margin distance counts as a collision
    path = np.array([[1.25, 0.5, -1.0], [1.25, 0.5, 2.0]])
    assert check_collision(path, boxes, step=0.1, margin=0.25) is not None
    assert check_collision(path, boxes, step=0.1, margin=0.2499) is None
    assert check_collision(path, AabbSet(), 0.1, 0.3) is None
    with pytest.raises(DomainError):
        check_collision(path[:, :2], boxes)
    with pytest.raises(DomainError):
        AabbSet([[1, 0, 0]], [[0, 1, 1]])


@given(st.floats(0.01, 1.0))
def test_walk_samples_spacing(step):
    wp = np.array([[0, 0, 0], [1.3, 0, 0], [1.3, 0, 2.05]])
    s = walk_samples(wp, step)
    gaps = np.linalg.norm(np.diff(s, axis=0), axis=1)
    assert gaps.max() <= step + 1e-12
    assert np.allclose(s[0], wp[0]) and np.allclose(s[-1], wp[-1])


def test_lift_and_resample():
    p3 = lift(np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]), 0.5, 1.6)
    assert np.allclose(p3[:, 1], -2.1)
    traj = resample_poses(p3, 81)
    assert traj.n_frames == 81
    pos = np.array([p.position for p in traj])
    assert np.allclose(pos[0], p3[0]) and np.allclose(pos[-1], p3[-1])
    arc = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    # equal arc-length spacing, except the step that cuts the corner
    assert np.allclose(np.median(arc), 0.25)
    fwd = traj[0].rotation @ [0, 0, 1]
    assert np.allclose(fwd, [1, 0, 0], atol=1e-12)
    assert np.allclose(traj[-1].rotation @ [0, 0, 1], [0, 0, 1], atol=1e-12)
    assert np.allclose(traj[0].rotation @ [0, -1, 0], [0, -1, 0])


def _plan(seed=0):
    rng = np.random.default_rng(seed)
    g = np.stack(np.meshgrid(np.arange(12) * 2.0, np.arange(8) * 2.0), -1).reshape(-1, 2)
    return WalkablePointSet(g + rng.uniform(-0.3, 0.3, g.shape), plane_height=0.0)


def test_route_sampler_accepts_and_is_deterministic():
    params = RouteParams(min_len=10.0, n_frames=21)
    sampler = RouteSampler(_plan(), AabbSet(), params)
    a, b = sampler.draw(3), sampler.draw(3)
    assert isinstance(a, Route) and a.trajectory.n_frames == 21
    assert np.array_equal(a.raw.waypoints, b.raw.waypoints)
    assert path_length(a.smooth) >= 10.0
    traj = sample_route(_plan(), AabbSet(), params, seed=3)
    assert all(p == q for p, q in zip(traj, a.trajectory))


def test_route_rejection_reasons():
    short = RouteSampler(_plan(), AabbSet(), RouteParams(min_len=1e3, max_attempts=5)).draw(0)
    assert isinstance(short, RouteRejection) and short.reason == "too-short"
    assert short.counts["too-short"] == 5
    wall = AabbSet([[-10, -10, -10]], [[40, 10, 40]])
    blocked = RouteSampler(_plan(), wall, RouteParams(min_len=1.0, max_attempts=5)).draw(0)
    assert blocked.reason == "collision"
