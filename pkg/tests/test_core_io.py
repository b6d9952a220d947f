import json

import numpy as np
import pytest

from coropve.core_io import (
    Centerline,
    CenterlineTree,
    CylindricalGrid,
    ScalarVolume,
    plane_count,
    sample_points,
    sample_trilinear,
    transport_frames,
    warp_to_cylindrical,
)
from coropve.errors import DataError, DegenerateTangent, FormatError, TopologyError
from coropve.formats import (
    load_centerline_tree,
    load_grid,
    load_volume,
    save_centerline_tree,
    save_grid,
    save_volume,
)


def ramp_volume(shape=(6, 7, 8), spacing=(0.5, 0.7, 1.1), origin=(-1.0, 2.0, 0.5)):
    vol_pos = ScalarVolume(np.zeros(shape), spacing, origin).voxel_positions()
    coef = np.array([3.0, -2.0, 0.5])
    values = 10.0 + vol_pos @ coef
    return ScalarVolume(values, spacing, origin), coef


def test_constant_volume_at_voxel_center():
    vol = ScalarVolume(np.full((4, 4, 4), 400.0))
    assert sample_trilinear(vol, (1.0, 2.0, 3.0)) == 400.0


def test_midpoint_between_voxels():
    values = np.zeros((2, 1, 1))
    values[1] = 100.0
    vol = ScalarVolume(values)
    assert sample_trilinear(vol, (0.5, 0.0, 0.0)) == pytest.approx(50.0, abs=1e-12)


def test_ramp_exact_inside_grid():
    vol, coef = ramp_volume()
    rng = np.random.default_rng(3)
    lo = np.array(vol.origin)
    hi = lo + (np.array(vol.dims) - 1) * np.array(vol.spacing)
    pts = rng.uniform(lo, hi, size=(500, 3))
    got, clamped = sample_points(vol, pts)
    assert clamped == 0
    np.testing.assert_allclose(got, 10.0 + pts @ coef, rtol=0, atol=1e-9)


def test_out_of_grid_clamps_to_face():
    vol, coef = ramp_volume()
    got, clamped = sample_points(vol, np.array([[-100.0, 2.0, 0.5]]))
    assert clamped == 1
    assert got[0] == pytest.approx(10.0 + np.array([vol.origin[0], 2.0, 0.5]) @ coef)


def test_volume_rejects_bad_shape():
    with pytest.raises(DataError):
        ScalarVolume(np.zeros((3, 3)))
    with pytest.raises(DataError):
        ScalarVolume(np.zeros((3, 3, 3)), spacing=(1.0, 0.0, 1.0))


def test_centerline_densified():
    cl = Centerline(np.array([[0, 0, 0], [0, 0, 3.2]], dtype=float))
    assert np.max(np.diff(cl.arc_length)) <= 0.5 + 1e-12
    assert cl.length == pytest.approx(3.2)


def test_centerline_coincident_points():
    with pytest.raises(DegenerateTangent):
        Centerline(np.array([[0, 0, 0], [0, 0, 0], [0, 0, 1]], dtype=float))


def test_tree_validation():
    a = Centerline(np.array([[0, 0, 0], [0, 0, 10]], dtype=float))
    b = Centerline(np.array([[0, 0, 5], [5, 0, 5]], dtype=float))
    tree = CenterlineTree((a, b), (None, (0, 5.0)))
    assert tree.root == 0 and tree.children(0) == [(1, 5.0)]
    with pytest.raises(TopologyError):
        CenterlineTree((a, b), (None, None))
    with pytest.raises(TopologyError):
        CenterlineTree((a, b), (None, (0, 50.0)))
    with pytest.raises(TopologyError):
        CenterlineTree((a, b), ((1, 1.0), (0, 1.0)))


def test_plane_count_and_constant_warp():
    cl = Centerline(np.array([[5, 5, 1], [5, 5, 8.3]], dtype=float))
    vol = ScalarVolume(np.full((11, 11, 11), 300.0))
    grid = warp_to_cylindrical(vol, cl, n_angles=8, radii=[0.5, 1.0, 2.0], plane_spacing=0.5)
    assert grid.n_planes == plane_count(7.3, 0.5) == 15
    np.testing.assert_allclose(grid.intensities, 300.0, rtol=0, atol=1e-9)


def test_frames_orthonormal_and_transverse():
    s = np.linspace(0, np.pi, 40)
    tang = np.stack([np.cos(s), np.sin(s), np.full_like(s, 0.5)], axis=1)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    frames = transport_frames(tang)
    for t, (u, v) in zip(tang, frames):
        assert abs(u @ v) < 1e-10 and abs(u @ t) < 1e-10 and abs(v @ t) < 1e-10
        assert abs(np.linalg.norm(u) - 1) < 1e-10 and abs(np.linalg.norm(v) - 1) < 1e-10


def analytic_cylinder(radius=2.0, lumen=400.0, bg=50.0, spacing=0.1):
    ax = np.arange(-40, 41) * spacing
    zs = np.arange(0, 61) * spacing
    rho = np.hypot(ax[:, None], ax[None, :])
    values = np.where(rho <= radius, lumen, bg)[:, :, None] * np.ones(len(zs))
    return ScalarVolume(values, (spacing,) * 3, (ax[0], ax[0], 0.0))


def test_straight_cylinder_radial_classification():
    vol = analytic_cylinder()
    cl = Centerline(np.array([[0, 0, 1.0], [0, 0, 5.0]]))
    radii = np.array([0.5, 1.0, 1.5, 1.85, 2.15, 2.5, 3.0, 3.5])
    grid = warp_to_cylindrical(vol, cl, n_angles=16, radii=radii, plane_spacing=0.5)
    inside = radii < 1.9
    outside = radii > 2.1
    np.testing.assert_allclose(grid.intensities[:, :, inside], 400.0, rtol=0, atol=1e-9)
    np.testing.assert_allclose(grid.intensities[:, :, outside], 50.0, rtol=0, atol=1e-9)


def test_torus_segment_radial_classification():
    # quarter-circle centerline (bend radius 8 mm) inside a torus of tube radius 2 mm
    R, a, h = 8.0, 2.0, 0.1
    xs = np.arange(-1.0, 11.5, h)
    ys = np.arange(-1.0, 11.5, h)
    zs = np.arange(-3.5, 3.6, h)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    dist = np.hypot(np.hypot(X, Y) - R, Z)
    vol = ScalarVolume(np.where(dist <= a, 400.0, 50.0), (h, h, h), (xs[0], ys[0], zs[0]))
    th = np.linspace(0.15, np.pi / 2 - 0.15, 60)
    cl = Centerline(np.stack([R * np.cos(th), R * np.sin(th), np.zeros_like(th)], axis=1))
    radii = np.array([0.5, 1.0, 1.6, 2.4, 3.0])
    grid = warp_to_cylindrical(vol, cl, n_angles=16, radii=radii, plane_spacing=0.5)
    # the polyline chord sits slightly off the true circle; keep 0.4 mm clear of the wall
    np.testing.assert_allclose(grid.intensities[:, :, :3], 400.0, rtol=0, atol=1e-9)
    np.testing.assert_allclose(grid.intensities[:, :, 3:], 50.0, rtol=0, atol=1e-9)


def test_volume_round_trip(tmp_path):
    values = np.arange(27, dtype=np.int16).reshape(3, 3, 3) - 13
    vol = ScalarVolume(values, (0.4, 0.5, 0.6), (1.0, -2.0, 3.5))
    save_volume(vol, tmp_path / "v.vol.json")
    back = load_volume(tmp_path / "v.vol.json")
    assert np.array_equal(back.values, values)
    assert back.spacing == vol.spacing and back.origin == vol.origin


def test_volume_raw_layout_x_fastest(tmp_path):
    values = np.zeros((2, 3, 4), dtype=np.int16)
    values[1, 0, 0] = 7
    save_volume(ScalarVolume(values), tmp_path / "v.vol.json")
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), "<i2")
    assert raw[1] == 7 and raw.sum() == 7


def test_truncated_raw(tmp_path):
    save_volume(ScalarVolume(np.ones((3, 3, 3), dtype=np.int16)), tmp_path / "v.vol.json")
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(FormatError, match="expected 54 bytes, found 50"):
        load_volume(tmp_path / "v.vol.json")


def test_centerline_round_trip_and_missing_field(tmp_path):
    a = Centerline(np.array([[0, 0, 0], [0, 0, 10]], dtype=float))
    b = Centerline(np.array([[0, 0, 5], [5, 0, 5]], dtype=float))
    tree = CenterlineTree((a, b), (None, (0, 5.0)), "right")
    path = tmp_path / "t.cl.json"
    save_centerline_tree(tree, path)
    back = load_centerline_tree(path)
    assert back.tree_side == "right" and back.parent == tree.parent
    for x, y in zip(back.branches, tree.branches):
        np.testing.assert_allclose(x.points, y.points, rtol=0, atol=1e-12)
    d = json.loads(path.read_text())
    del d["branches"][1]["ostium_index"]
    path.write_text(json.dumps(d))
    with pytest.raises(FormatError, match="ostium_index"):
        load_centerline_tree(path)


def test_grid_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    grid = CylindricalGrid(
        plane_spacing=0.5,
        radii=np.array([0.1, 0.2, 0.3]),
        intensities=rng.normal(size=(4, 5, 3)),
        plane_center=rng.normal(size=(4, 3)),
        plane_axes=rng.normal(size=(4, 2, 3)),
    )
    save_grid(grid, tmp_path / "g.cyl.json")
    back = load_grid(tmp_path / "g.cyl.json")
    assert np.array_equal(back.intensities, grid.intensities)
    np.testing.assert_allclose(back.plane_axes, grid.plane_axes, rtol=0, atol=1e-12)
