import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roofadv.mesh import TriangleMesh, icosphere
from roofadv.raycast import (
    Ray,
    RayBundle,
    SensorConfig,
    compose_scene,
    hit_point_jacobian,
    load_sensor_config,
    moller_trumbore,
    ray_triangle_intersect,
    render_hits,
    sample_rays,
)


def plane_barycentric(o, d, a, b, c):
    """Intersect the supporting plane, then test the barycentric signs of the point."""
    n = np.cross(b - a, c - a)
    denom = n @ d
    if abs(denom) < 1e-12 * np.linalg.norm(n):
        return False, np.nan
    t = n @ (a - o) / denom
    p = o + t * d
    area = n @ n
    w0 = np.cross(b - p, c - p) @ n / area
    w1 = np.cross(c - p, a - p) @ n / area
    w2 = np.cross(a - p, b - p) @ n / area
    return bool(t > 1e-6 and w0 >= 0 and w1 >= 0 and w2 >= 0), t


def random_pairs(rng, n):
    o = rng.normal(0, 1, (n, 3))
    tri = rng.normal(0, 1, (n, 3, 3)) + rng.normal(0, 3, (n, 1, 3))
    target = tri.mean(axis=1) + rng.normal(0, 0.6, (n, 3))
    d = target - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return o, d, tri


def test_moller_trumbore_agrees_with_barycentric_oracle(rng):
    o, d, tri = random_pairs(rng, 2000)
    hit, t, u, v = moller_trumbore(o, d, tri[:, 0], tri[:, 1], tri[:, 2])
    for i in range(len(o)):
        ref_hit, ref_t = plane_barycentric(o[i], d[i], *tri[i])
        # skip samples on the boundary where the two tests may legitimately round differently
        if abs(u[i]) < 1e-9 or abs(v[i]) < 1e-9 or abs(1 - u[i] - v[i]) < 1e-9:
            continue
        assert hit[i] == ref_hit
        if ref_hit:
            assert t[i] == pytest.approx(ref_t, rel=1e-9)


def test_hit_point_lies_on_triangle_and_ray(rng):
    o, d, tri = random_pairs(rng, 500)
    hit, t, u, v = moller_trumbore(o, d, tri[:, 0], tri[:, 1], tri[:, 2])
    p_ray = o + t[:, None] * d
    p_bar = (1 - u - v)[:, None] * tri[:, 0] + u[:, None] * tri[:, 1] + v[:, None] * tri[:, 2]
    assert np.allclose(p_ray[hit], p_bar[hit], atol=1e-9)


def test_parallel_and_behind_rays_miss():
    a, b, c = np.array([0, 0, 1.0]), np.array([1, 0, 1.0]), np.array([0, 1, 1.0])
    assert ray_triangle_intersect(Ray([0, 0, 0], [1, 0, 0]), a, b, c) is None
    assert ray_triangle_intersect(Ray([0.2, 0.2, 2], [0, 0, 1]), a, b, c) is None
    h = ray_triangle_intersect(Ray([0.2, 0.2, 0], [0, 0, 1]), a, b, c)
    assert h.t == pytest.approx(1.0) and h.barycentric == pytest.approx((0.2, 0.2))


def test_zero_direction_rejected():
    with pytest.raises(ValueError):
        Ray([0, 0, 0], [0, 0, 0])


def test_sample_rays_are_exactly_the_lattice_rays_through_the_box():
    cfg = SensorConfig()
    step = cfg.azimuth_step
    lo, hi = np.array([10.0, -0.5 * 10 * step * 10, -2.0]), np.array([11.0, 0.5 * 10 * step * 10, 1.0])
    rays = sample_rays(cfg, (lo, hi))
    # direct enumeration of every lattice ray in a generous azimuth window
    k = np.arange(-200, 201)
    el = cfg.elevations
    E, K = np.meshgrid(el, k * step, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(K), np.cos(E) * np.sin(K), np.sin(E)], axis=-1).reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1, t2 = lo / dirs, hi / dirs
    tmin = np.nanmax(np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2)), axis=1)
    tmax = np.nanmin(np.where(np.isnan(t2), np.inf, np.maximum(t1, t2)), axis=1)
    expected = np.count_nonzero((tmin <= tmax) & (tmax > 0))
    assert len(rays) == expected
    assert len(rays) >= 10
    assert set(np.unique(rays.beam)) <= set(range(64))


def test_sample_rays_rejects_box_around_sensor():
    with pytest.raises(ValueError):
        sample_rays(SensorConfig(), (np.array([-1, -1, -1.0]), np.array([1, 1, 1.0])))


def wall(x, size=2.0):
    v = np.array([[x, -size, -size], [x, size, -size], [x, size, size], [x, -size, size]])
    return TriangleMesh(v, [[0, 1, 2], [0, 2, 3]])


def test_nearest_wall_wins():
    from roofadv.mesh import merge_meshes

    cfg = SensorConfig()
    mesh = merge_meshes([wall(12.0), wall(8.0)])
    rays = sample_rays(cfg, (np.array([7.5, -1.0, -1.0]), np.array([12.5, 1.0, 1.0])))
    hits = render_hits(mesh, rays)
    assert hits.t.size > 0
    assert np.allclose(hits.points[:, 0], 8.0)
    # exhaustive per-face oracle
    tri = mesh.vertices[mesh.faces]
    for i, r in enumerate(hits.ray_index[:50]):
        d = rays.directions[r]
        ok, t, _, _ = moller_trumbore(np.zeros(3), d, tri[:, 0], tri[:, 1], tri[:, 2])
        assert hits.t[i] == pytest.approx(t[ok].min(), rel=1e-12)


def test_lattice_and_generic_rendering_agree(rng):
    cfg = SensorConfig()
    mesh = icosphere(2).scaled((0.7, 0.7, 0.5)).transformed(np.array(
        [[1, 0, 0, 14.0], [0, 1, 0, 3.0], [0, 0, 1, -0.5], [0, 0, 0, 1]]))
    rays = sample_rays(cfg, mesh.aabb())
    lattice = render_hits(mesh, rays)
    plain = render_hits(mesh, RayBundle(rays.origin, rays.directions))
    assert np.array_equal(lattice.ray_index, plain.ray_index)
    assert np.array_equal(lattice.points, plain.points)


def test_closed_mesh_hit_points_lie_on_surface():
    cfg = SensorConfig()
    mesh = icosphere(3).transformed(np.array([[1, 0, 0, 9.0], [0, 1, 0, -2.0], [0, 0, 1, 0.0], [0, 0, 0, 1]]))
    hits = render_hits(mesh, sample_rays(cfg, mesh.aabb()))
    r = np.linalg.norm(hits.points - [9, -2, 0], axis=1)
    assert np.all((r > 0.99) & (r <= 1 + 1e-9))
    # front-facing only: the hit is on the sensor side of the sphere
    outward = hits.points - [9, -2, 0]
    cos = np.einsum("ij,ij->i", outward, hits.points) / np.linalg.norm(hits.points, axis=1)
    # facets near the silhouette may lean slightly away from the sensor
    assert np.all(cos < 0.1) and np.median(cos) < -0.5


def test_occlude_removes_point_behind_mesh():
    mesh = wall(10.0)
    near = np.array([[5.0, 0.1, 0.0]])
    behind = np.array([[20.0, 0.2, 0.1]])
    aside = np.array([[20.0, 15.0, 0.0]])
    cloud = np.vstack([near, behind, aside])
    out = compose_scene(cloud, np.array([[10.0, 0.0, 0.0]]), mesh, "occlude")
    assert out.shape[0] == 3
    assert not any(np.allclose(p, behind[0]) for p in out)
    union = compose_scene(cloud, np.array([[10.0, 0.0, 0.0]]))
    assert union.shape[0] == 4


def test_compose_rejects_unknown_mode():
    with pytest.raises(ValueError):
        compose_scene(np.zeros((1, 3)) + 5, np.ones((1, 3)), wall(3.0), "merge")


def test_hit_point_jacobian_matches_finite_differences(rng):
    cfg = SensorConfig()
    mesh = icosphere(1).scaled((0.7, 0.7, 0.5)).transformed(np.array(
        [[1, 0, 0, 12.0], [0, 1, 0, 1.0], [0, 0, 1, 0.0], [0, 0, 0, 1]]))
    rays = sample_rays(cfg, mesh.aabb())
    hits = render_hits(mesh, rays)
    w, d, n_scaled = hit_point_jacobian(mesh, rays, hits)
    i = hits.t.size // 2
    f = hits.face_index[i]
    k = 1
    vid = mesh.faces[f, k]
    h = 1e-6
    for axis in range(3):
        e = np.zeros_like(mesh.vertices)
        e[vid, axis] = h
        tp = render_hits(TriangleMesh(mesh.vertices + e, mesh.faces), rays.subset([hits.ray_index[i]]))
        tm = render_hits(TriangleMesh(mesh.vertices - e, mesh.faces), rays.subset([hits.ray_index[i]]))
        fd = (tp.points[0] - tm.points[0]) / (2 * h)
        analytic = w[i, k] * d[i] * n_scaled[i, axis]
        assert np.allclose(analytic, fd, atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(8, 128), st.floats(0.05, 0.4))
def test_sensor_config_round_trips_through_dict(n, step):
    cfg = SensorConfig.from_dict({"n_beams": n, "azimuth_step_deg": step})
    back = SensorConfig.from_dict(cfg.to_dict())
    assert np.allclose(back.elevations, cfg.elevations) and back.azimuth_step == pytest.approx(cfg.azimuth_step)


def test_sensor_config_file_and_errors(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("n_beams: 32\nazimuth_step_deg: 0.2\n")
    assert len(load_sensor_config(p).elevations) == 32
    with pytest.raises(ValueError):
        SensorConfig.from_dict({"beams": 3})
    with pytest.raises(ValueError):
        SensorConfig(beam_elevations=(0.0, 0.1))
