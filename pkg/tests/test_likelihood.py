import numpy as np
import pytest

from coropve.core_io import default_radii
from coropve.errors import DataError, EmptyDatabase, LengthMismatch
from coropve.formats import load_raydb, save_raydb
from coropve.likelihood import (
    SOURCE_CALCIUM,
    SOURCE_DATA,
    SOURCE_PVE,
    RayDatabase,
    build_ray_database,
    combine_probability,
    knn_lumen_probability,
    lumen_probability_field,
    nearest_rays,
    pve_probability,
    ray_weight,
)
from coropve.phantom import cylinder_spec, generate_phantom, stenosis_spec


def random_db(seed, n=50, n_radii=12, k=10):
    rng = np.random.default_rng(seed)
    radii = 0.25 * np.arange(1, n_radii + 1)
    cut = rng.integers(0, n_radii + 1, size=n)
    labels = (np.arange(n_radii)[None, :] < cut[:, None]).astype(np.uint8)
    inten = rng.normal(200.0, 120.0, size=(n, n_radii)).astype(np.float32)
    return RayDatabase(radii, inten, labels, kernel_lambda=1.0 / (n_radii * 80.0**2), k_neighbors=k), rng


def oracle_probability(db, query, k):
    """Exhaustive scan, stable (distance, index) order, literal weighted vote."""
    train = db.intensity_rays.astype(float)
    d2 = np.array([sum((float(a) - float(b)) ** 2 for a, b in zip(row, query)) for row in train])
    order = sorted(range(len(d2)), key=lambda i: (d2[i], i))[:k]
    num = np.zeros(db.n_radii)
    den = 0.0
    for i in order:
        w = np.exp(-db.kernel_lambda * d2[i])
        num += w * db.label_rays[i]
        den += w
    return num / den


@pytest.mark.parametrize("seed", range(100))
def test_knn_matches_exhaustive_oracle(seed):
    db, rng = random_db(seed)
    query = rng.normal(200.0, 120.0, size=db.n_radii)
    got = knn_lumen_probability(db, query, k=10)
    np.testing.assert_allclose(got, oracle_probability(db, query, 10), rtol=0, atol=1e-12)


def test_k1_self_query():
    db, _ = random_db(1)
    for i in (0, 7, 33):
        got = knn_lumen_probability(db, db.intensity_rays[i], k=1)
        assert np.array_equal(got, db.label_rays[i].astype(float))


def test_k2_equidistant_half():
    radii = [0.5, 1.0]
    db = RayDatabase(radii, [[100.0, 0.0], [300.0, 0.0]], [[1, 0], [0, 0]], kernel_lambda=1e-4)
    np.testing.assert_allclose(knn_lumen_probability(db, [200.0, 0.0], k=2), [0.5, 0.0])


def test_ties_broken_by_lower_index():
    db = RayDatabase([1.0], [[5.0], [3.0], [5.0], [3.0]], [[1], [0], [1], [0]], kernel_lambda=1e-3)
    idx, d2 = nearest_rays(db, [4.0], k=3)
    assert idx[0].tolist() == [0, 1, 2] and d2[0].tolist() == [1.0, 1.0, 1.0]


def test_exclude_exact():
    db, _ = random_db(2)
    idx, d2 = nearest_rays(db, db.intensity_rays[4], k=3, exclude_exact=True)
    assert 4 not in idx[0] and np.all(d2[0] > 0)


def test_duplicated_database_with_doubled_k():
    db, rng = random_db(5)
    dup = RayDatabase(
        db.radii,
        np.concatenate([db.intensity_rays, db.intensity_rays]),
        np.concatenate([db.label_rays, db.label_rays]),
        db.kernel_lambda,
    )
    q = rng.normal(200.0, 120.0, size=(20, db.n_radii))
    a = lumen_probability_field(db, q[:, None, :], k=10)
    b = lumen_probability_field(dup, q[:, None, :], k=20)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_probability_bounds_and_unanimity():
    db, rng = random_db(9)
    p = lumen_probability_field(db, rng.normal(200.0, 120.0, size=(30, 1, db.n_radii)), k=10)
    assert p.min() >= 0.0 and p.max() <= 1.0
    ones = RayDatabase([1.0, 2.0], [[0.0, 0.0], [10.0, 10.0]], [[1, 1], [1, 0]], kernel_lambda=1e-3)
    assert knn_lumen_probability(ones, [3.0, 3.0], k=2)[0] == 1.0


def test_underflow_safe_weights():
    db = RayDatabase([1.0], [[0.0], [0.001]], [[1], [0]], kernel_lambda=1.0)
    got = knn_lumen_probability(db, [1e4], k=2)
    # exp(-lambda d^2) underflows for both rays; the ratio is still defined
    far = float(np.float32(0.001))
    gap = 1e8 - (1e4 - far) ** 2
    assert got[0] == pytest.approx(1.0 / (1.0 + np.exp(gap)), rel=1e-6)


def test_ray_weight():
    assert ray_weight([1.0, 2.0], [1.0, 2.0], 1e-4) == 1.0
    assert ray_weight([100.0], [0.0], 1e-4) == pytest.approx(np.exp(-1.0), rel=1e-15)
    w = [ray_weight([d], [0.0], 1e-4) for d in (0.0, 10.0, 50.0, 100.0)]
    assert all(a > b for a, b in zip(w, w[1:]))
    with pytest.raises(LengthMismatch):
        ray_weight([1.0], [1.0, 2.0], 1e-4)


def test_database_validation():
    with pytest.raises(EmptyDatabase):
        RayDatabase([1.0], np.zeros((0, 1)), np.zeros((0, 1)), 1e-3)
    with pytest.raises(DataError):
        RayDatabase([1.0, 2.0], [[0.0, 0.0]], [[0, 1]], 1e-3)
    with pytest.raises(DataError):
        RayDatabase([1.0], [[0.0]], [[1]], 0.0)


def test_cylinder_labels_exact():
    radii = 0.25 * np.arange(1, 17)
    truth = generate_phantom(cylinder_spec(2.0, length=6.0), seed=0)
    db = build_ray_database([truth], n_angles=16, radii=radii)
    assert np.all(db.label_rays[:, radii <= 2.0] == 1)
    assert np.all(db.label_rays[:, radii > 2.0] == 0)


def test_database_ray_count():
    a = generate_phantom(cylinder_spec(1.0, length=4.0), seed=0)
    b = generate_phantom(cylinder_spec(2.0, length=6.0), seed=1)
    db = build_ray_database([a, b], n_angles=8, radii=default_radii())
    assert db.n_rays == (9 + 13) * 8


def test_stenosis_label_prefix_tracks_radius():
    spec = stenosis_spec(1.5, 0.5, length=20.0)
    truth = generate_phantom(spec, seed=0)
    radii = default_radii()
    db = build_ray_database([truth], n_angles=16, radii=radii)
    prefix = db.label_rays.sum(axis=1).reshape(-1, 16)
    s = np.arange(prefix.shape[0]) * 0.5
    outer = np.where(prefix > 0, radii[np.maximum(prefix - 1, 0)], 0.0)
    assert np.max(np.abs(outer - spec.radius(s)[:, None])) <= 0.1 + 1e-9


def test_monotone_on_cylinder_database():
    radii = default_radii()
    train = [generate_phantom(cylinder_spec(r, length=4.0), seed=0) for r in (1.0, 1.5, 2.5)]
    db = build_ray_database(train, n_angles=8, radii=radii)
    probe = build_ray_database([generate_phantom(cylinder_spec(2.0, length=4.0), seed=0)], n_angles=8, radii=radii)
    p = lumen_probability_field(db, probe.intensity_rays[:, None, :], k=20)
    assert np.all(np.diff(p, axis=-1) <= 1e-15)


def test_pve_probability():
    assert pve_probability([0.3], 0.5)[0] == 1.0
    assert pve_probability([0.6], 0.5)[0] == 0.0
    assert pve_probability([0.5], 0.5)[0] == 1.0
    with pytest.raises(DataError):
        pve_probability([0.5], 0.0)


def test_combine_probability():
    rng = np.random.default_rng(0)
    pr_d = rng.uniform(size=(4, 3, 5))
    radii = np.linspace(0.2, 1.0, 5)
    pr_pv = np.stack([pve_probability(radii, 0.5)] * 4)
    none = combine_probability(pr_d, pr_pv, np.zeros(4, dtype=bool))
    assert np.array_equal(none.prob, pr_d) and np.all(none.source == SOURCE_DATA)
    mask = np.array([False, True, False, False])
    one = combine_probability(pr_d, pr_pv, mask)
    assert np.array_equal(one.prob[1], np.broadcast_to(pr_pv[1], (3, 5)))
    assert np.all(one.source[1] == SOURCE_PVE)
    assert np.array_equal(one.prob[[0, 2, 3]], pr_d[[0, 2, 3]])
    calc = np.zeros(pr_d.shape, dtype=bool)
    calc[2, 1, 3] = True
    c = combine_probability(pr_d, pr_pv, mask, calc, p_calcium=0.01)
    assert c.prob[2, 1, 3] == 0.01 and c.source[2, 1, 3] == SOURCE_CALCIUM


def test_raydb_round_trip(tmp_path):
    db, _ = random_db(3)
    save_raydb(db, tmp_path / "t.raydb")
    back = load_raydb(tmp_path / "t.raydb")
    assert np.array_equal(back.intensity_rays, db.intensity_rays)
    assert np.array_equal(back.label_rays, db.label_rays)
    assert back.kernel_lambda == db.kernel_lambda and back.k_neighbors == db.k_neighbors
    assert (tmp_path / "t.raydb").read_bytes()[:8] == b"CRAYDB1\0"
