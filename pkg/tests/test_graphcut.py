import itertools

import numpy as np
import pytest

from coropve.core_io import CylindricalGrid, ScalarVolume, default_radii
from coropve.graphcut import (
    LumenSurface,
    SegmentationGraph,
    _pairs,
    build_graph,
    cross_section_area,
    extract_surface,
    graph_energy,
    pairwise_weight,
    rasterize_surface,
    solve_min_cut,
    star_edges,
    unary_cost,
)


def random_graph(rng, shape, dyadic=True, lam=None):
    n = int(np.prod(shape))
    p, q = _pairs(shape)
    outer, inner = star_edges(shape)
    if dyadic:
        # multiples of 1/8: every energy sum is exact in floating point
        unary = rng.integers(0, 40, size=(n, 2)) / 8.0
        w = rng.integers(0, 16, size=len(p)) / 8.0
        lam = 1.0 if lam is None else lam
    else:
        unary = rng.uniform(0, 5, size=(n, 2))
        w = rng.uniform(0, 2, size=len(p))
        lam = rng.uniform(0.1, 3.0) if lam is None else lam
    return SegmentationGraph(unary, p, q, w, outer, inner, lam, shape)


def brute_force(graph):
    """Minimum energy over all star-feasible labelings, computed independently."""
    n = graph.n_vertices
    best = np.inf
    best_x = None
    for bits in itertools.product((0, 1), repeat=n):
        x = np.array(bits, dtype=bool)
        if any(x[o] and not x[i] for o, i in zip(graph.star_outer, graph.star_inner)):
            continue
        e = 0.0
        for v in range(n):
            e += graph.unary[v, 0] if x[v] else graph.unary[v, 1]
        for a, b, w in zip(graph.edge_p, graph.edge_q, graph.edge_w):
            if x[a] != x[b]:
                e += graph.graph_lambda * w
        if e < best:
            best, best_x = e, x
    return best, best_x


SHAPES = [(1, 1, 4), (1, 2, 3), (2, 1, 5), (1, 3, 3), (2, 2, 3), (1, 4, 3), (3, 2, 2), (1, 1, 12)]


@pytest.mark.parametrize("seed", range(200))
def test_min_cut_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    shape = SHAPES[seed % len(SHAPES)]
    graph = random_graph(rng, shape)
    labels, energy = solve_min_cut(graph)
    best, _ = brute_force(graph)
    assert energy == best
    assert graph_energy(graph, labels) == best


@pytest.mark.parametrize("seed", range(10))
def test_min_cut_real_weights(seed):
    rng = np.random.default_rng(1000 + seed)
    graph = random_graph(rng, (2, 2, 3), dyadic=False)
    _, energy = solve_min_cut(graph)
    best, _ = brute_force(graph)
    assert energy == pytest.approx(best, rel=0, abs=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_min_cut_beats_random_feasible(seed):
    rng = np.random.default_rng(500 + seed)
    shape = (4, 8, 10)
    graph = random_graph(rng, shape, dyadic=False)
    labels, energy = solve_min_cut(graph)
    assert np.all(labels[:, :, 1:] <= labels[:, :, :-1])
    cuts = rng.integers(0, shape[2] + 1, size=(1000, shape[0], shape[1]))
    for cut in cuts:
        x = np.arange(shape[2])[None, None, :] < cut[:, :, None]
        assert energy <= graph_energy(graph, x) + 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_scaling_preserves_argmin(seed):
    rng = np.random.default_rng(seed)
    graph = random_graph(rng, (1, 3, 3))
    scaled = SegmentationGraph(
        graph.unary * 4.0, graph.edge_p, graph.edge_q, graph.edge_w * 4.0,
        graph.star_outer, graph.star_inner, graph.graph_lambda, graph.shape,
    )
    a, ea = solve_min_cut(graph)
    b, eb = solve_min_cut(scaled)
    assert eb == 4.0 * ea
    # the minimizer may be non-unique; both must be optimal for both problems
    assert graph_energy(graph, b) == ea and graph_energy(scaled, a) == eb


def test_unanimous_lumen():
    rng = np.random.default_rng(0)
    shape = (2, 4, 5)
    g = random_graph(rng, shape)
    unary = np.zeros((g.n_vertices, 2))
    unary[:, 1] = 10.0
    g = SegmentationGraph(unary, g.edge_p, g.edge_q, g.edge_w, g.star_outer, g.star_inner, 1.75, shape)
    labels, _ = solve_min_cut(g)
    assert labels.all()


def test_two_vertex_ray():
    unary = np.array([[0.1, 5.0], [5.0, 0.1]])
    g = SegmentationGraph(unary, np.array([0]), np.array([1]), np.array([0.01]), np.array([1]), np.array([0]), 1.0, (1, 1, 2))
    labels, _ = solve_min_cut(g)
    assert labels.ravel().tolist() == [True, False]


def test_star_violation_is_infinite():
    g = SegmentationGraph(np.zeros((2, 2)), np.array([0]), np.array([1]), np.array([1.0]), np.array([1]), np.array([0]), 1.0)
    assert graph_energy(g, [False, True]) == np.inf


def test_unary_cost_values():
    np.testing.assert_allclose(unary_cost(1.0), [0.0, -np.log(1e-6)], atol=1e-12)
    np.testing.assert_allclose(unary_cost(0.5), [0.693147180559945, 0.693147180559945], atol=1e-12)
    np.testing.assert_allclose(unary_cost(0.0), [-np.log(1e-6), 0.0], atol=1e-12)
    assert -np.log(1e-6) == pytest.approx(13.8155, abs=1e-4)


def test_pairwise_weight_values():
    assert pairwise_weight(100.0, 100.0, 50.0, 1.0) == pytest.approx(0.367879441171, abs=1e-12)
    assert pairwise_weight(10.0, 0.0, 100.0, 0.5) == pytest.approx(np.exp(-1.25), abs=1e-12)
    assert pairwise_weight(10.0, 0.0, 100.0, 0.5) == pytest.approx(0.286504796860, abs=1e-12)
    w = pairwise_weight(np.array([0.0, 10.0, 100.0, 1000.0]), 0.0, 100.0, 0.5)
    assert np.all(np.diff(w) < 0) and w[-1] < 1e-300
    # degenerate variance falls back to 1 HU^2
    assert pairwise_weight(1.0, 0.0, 0.0, 0.0) == pytest.approx(np.exp(-1.0))


def make_grid(P=3, A=8, radii=None):
    radii = default_radii() if radii is None else np.asarray(radii)
    axes = np.tile(np.array([[1.0, 0, 0], [0, 1.0, 0]]), (P, 1, 1))
    centers = np.stack([np.zeros(P), np.zeros(P), 0.5 * np.arange(P)], axis=1)
    return CylindricalGrid(0.5, radii, np.zeros((P, A, len(radii))), centers, axes)


def test_build_graph_sizes():
    grid = make_grid(P=3, A=8, radii=[0.5, 1.0, 1.5, 2.0])
    g = build_graph(np.full(grid.intensities.shape, 0.5), grid)
    V = 3 * 8 * 4
    assert g.n_vertices == V
    assert len(g.edge_p) == 3 * 8 * 3 + 3 * 8 * 4 + 2 * 8 * 4
    assert len(g.star_outer) == 3 * 8 * 3


def test_extract_cylinder_labels():
    grid = make_grid()
    labels = np.broadcast_to(grid.radii <= 2.0 + 1e-9, grid.intensities.shape)
    surface = extract_surface(labels, grid)
    assert np.all(np.abs(surface.r_star - 2.0) <= 0.1)


def test_all_background_plane_area():
    grid = make_grid()
    surface = extract_surface(np.zeros(grid.intensities.shape, dtype=bool), grid)
    np.testing.assert_allclose(surface.area, np.pi * 0.1**2, rtol=0, atol=1e-12)


def test_half_plane_area():
    grid = make_grid(A=16)
    labels = np.zeros(grid.intensities.shape, dtype=bool)
    labels[:, :8, :20] = True  # r* = 2.05 on half the angles
    labels[:, 8:, :10] = True  # r* = 1.05 on the other half
    surface = extract_surface(labels, grid)
    expected = 0.5 * np.pi * 2.05**2 + 0.5 * np.pi * 1.05**2
    np.testing.assert_allclose(surface.area, expected, rtol=0, atol=1e-9)
    np.testing.assert_allclose(cross_section_area(surface.r_star), surface.area, rtol=0, atol=0)


def test_rasterize_surface():
    h = 0.2
    ax = np.arange(-15, 16) * h
    ref = ScalarVolume(np.zeros((31, 31, 21)), (h, h, h), (ax[0], ax[0], 0.0))
    P, A = 9, 32
    axes = np.tile(np.array([[1.0, 0, 0], [0, 1.0, 0]]), (P, 1, 1))
    centers = np.stack([np.zeros(P), np.zeros(P), 0.5 * np.arange(P)], axis=1)
    surface = LumenSurface(np.full((P, A), 1.5), centers, axes, 0.5)
    mask = rasterize_surface(surface, ref)
    pos = ref.voxel_positions()
    rho = np.hypot(pos[..., 0], pos[..., 1])
    inner = (rho < 1.45) & (pos[..., 2] <= 4.0)
    assert mask[inner].all()
    assert not mask[rho > 1.55].any()
    assert not mask[pos[..., 2] > 4.3].any()
