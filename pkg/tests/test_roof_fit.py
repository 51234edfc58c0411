import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

from roofadv.data import SyntheticParams, generate_synthetic_dataset
from roofadv.scene_core import BoxBEV, points_in_box
from roofadv.mesh import TriangleMesh
from roofadv.roof_fit import (
    CarShape,
    LatentShapePrior,
    PriorFormatError,
    RoofFitter,
    VehicleShapeBank,
    build_prior,
    extract_mesh,
    fit_latent,
    from_canonical,
    grid_axes,
    latent_objective,
    load_prior,
    placement_transform,
    roof_region,
    save_prior,
    sdf_eval,
    to_canonical,
)

SMALL = (24, 24, 18)


@pytest.fixture(scope="module")
def small_bank():
    return VehicleShapeBank.procedural(6, rng=3, grid_shape=SMALL)


def test_identical_bank_has_zero_variance():
    bank = VehicleShapeBank.from_shapes([CarShape()] * 4, SMALL)
    prior = build_prior(bank, 3)
    assert np.allclose(prior.mean, bank.grids[0])
    assert np.all(prior.variances == 0) and not np.any(prior.basis)


def test_full_span_reconstructs_every_member(small_bank):
    prior = build_prior(small_bank, len(small_bank) - 1)
    for g in small_bank.grids:
        rec = prior.decode(prior.project(g))
        assert np.sqrt(np.mean((rec - g) ** 2)) < 1e-9


def test_two_shape_component_is_half_the_difference():
    bank = VehicleShapeBank.from_shapes([CarShape(), CarShape(length=4.6, height=1.4, body_height=0.8)], SMALL)
    prior = build_prior(bank, 1)
    d = bank.grids[1] - bank.grids[0]
    b = prior.basis[0]
    # two-point PCA: centered samples are +-d/2, the one component is d/|d| with variance |d|^2/4
    assert np.allclose(np.abs(b), np.abs(d) / 2, atol=1e-12)
    assert prior.variances[0] == pytest.approx(np.sum(d**2) / 4, rel=1e-12)
    assert np.allclose(prior.mean, (bank.grids[0] + bank.grids[1]) / 2)


def test_basis_is_orthogonal(small_bank):
    prior = build_prior(small_bank, 5)
    flat = prior.basis.reshape(5, -1)
    gram = flat @ flat.T
    assert np.allclose(gram - np.diag(np.diag(gram)), 0.0, atol=1e-9 * np.abs(gram).max())


def test_k_exceeding_bank_raises(small_bank):
    with pytest.raises(ValueError):
        build_prior(small_bank, len(small_bank) + 1)


def test_sdf_eval_nodes_and_midpoints(small_bank):
    prior = build_prior(small_bank, 3)
    axes = grid_axes(SMALL)
    i, j, k = 5, 7, 9
    node = np.array([axes[0][i], axes[1][j], axes[2][k]])
    assert sdf_eval(prior, np.zeros(3), node) == pytest.approx(prior.mean[i, j, k], abs=1e-12)
    mid = np.array([(axes[0][i] + axes[0][i + 1]) / 2, axes[1][j], axes[2][k]])
    assert sdf_eval(prior, np.zeros(3), mid) == pytest.approx((prior.mean[i, j, k] + prior.mean[i + 1, j, k]) / 2,
                                                              abs=1e-12)


def test_sdf_eval_matches_regular_grid_interpolator(small_bank, rng):
    prior = build_prior(small_bank, 4)
    z = rng.normal(size=4)
    p = rng.uniform(-1.19, 1.19, (500, 3))
    oracle = RegularGridInterpolator(grid_axes(SMALL), prior.decode(z), method="linear")
    assert np.allclose(sdf_eval(prior, z, p), oracle(p), atol=1e-9)


def test_sdf_eval_outside_grid_raises(small_bank):
    prior = build_prior(small_bank, 2)
    with pytest.raises(ValueError):
        sdf_eval(prior, np.zeros(2), np.array([1.3, 0.0, 0.0]))
    with pytest.raises(ValueError):
        sdf_eval(prior, np.zeros(3), np.zeros(3))


BOX = BoxBEV(12.0, -3.0, 4.2, 1.75, 0.4, -1.73, -0.23)


def surface_points(prior, z, box=BOX):
    mesh = extract_mesh(prior, z)
    u = mesh.vertices[np.all(np.abs(mesh.vertices) < 0.999, axis=1)]
    return from_canonical(u, box)


def test_fit_dominates_true_code_on_level_set_samples(small_bank):
    prior = build_prior(small_bank, 5)
    z_true = prior.project(small_bank.grids[2])
    pts = surface_points(prior, z_true)
    fit = fit_latent(prior, pts, BOX, return_details=True)
    u = to_canonical(points_in_box(pts, BOX), BOX)
    assert latent_objective(prior, fit.z, u) <= latent_objective(prior, z_true, u) + 1e-8
    assert np.all(np.diff(fit.objective_history) <= 0)


def test_fit_recovers_bank_member_surface(small_bank):
    prior = build_prior(small_bank, len(small_bank) - 1)
    member = small_bank.grids[4]
    pts = surface_points(prior, prior.project(member))
    z = fit_latent(prior, pts, BOX, max_iter=5000, tol=1e-12)
    truth = extract_mesh(prior, prior.project(member)).vertices
    got = extract_mesh(prior, z).vertices
    d1, _ = cKDTree(truth).query(got)
    d2, _ = cKDTree(got).query(truth)
    chamfer = 0.5 * (d1.mean() + d2.mean())
    assert chamfer < 0.5 * prior.spacing.min()


def test_empty_basis_returns_empty_code(small_bank):
    prior = build_prior(small_bank, 0)
    pts = surface_points(build_prior(small_bank, 1), np.zeros(1))
    fit = fit_latent(prior, pts, BOX, return_details=True)
    assert fit.z.size == 0
    u = to_canonical(points_in_box(pts, BOX), BOX)
    assert fit.objective_history[0] == pytest.approx(np.sum(sdf_eval(prior, np.zeros(0), u) ** 2), rel=1e-12)


def test_fit_needs_ten_points(small_bank):
    prior = build_prior(small_bank, 2)
    pts = from_canonical(np.zeros((9, 3)), BOX)
    with pytest.raises(ValueError):
        fit_latent(prior, pts, BOX)


def sphere_prior(radius=0.6, n=41):
    axes = grid_axes((n, n, n))
    u = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    grid = np.linalg.norm(u, axis=-1) - radius
    lo = np.full(3, -1.2)
    spacing = np.full(3, 2.4 / (n - 1))
    return LatentShapePrior(grid, np.zeros((0, n, n, n)), lo, spacing), grid


def test_sphere_mesh_radius_and_watertight():
    prior, _ = sphere_prior()
    mesh = extract_mesh(prior, np.zeros(0))
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.all(np.abs(r - 0.6) < prior.spacing[0])
    assert mesh.is_watertight() and mesh.signed_volume() > 0


def test_flipped_or_empty_level_set_raises():
    prior, grid = sphere_prior()
    flipped = LatentShapePrior(-grid, prior.basis, prior.lo, prior.spacing)
    with pytest.raises(ValueError):
        extract_mesh(flipped, np.zeros(0))
    empty = LatentShapePrior(np.ones_like(grid), prior.basis, prior.lo, prior.spacing)
    with pytest.raises(ValueError):
        extract_mesh(empty, np.zeros(0))


def box_mesh(length=4.0, width=2.0, height=1.5):
    v = np.array([[x, y, z] for x in (-length / 2, length / 2) for y in (-width / 2, width / 2) for z in (0.0, height)])
    faces = [[0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3], [0, 1, 3], [0, 3, 2],
             [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6]]
    return TriangleMesh(v, faces)


def test_roof_of_box_is_top_face():
    region = roof_region(box_mesh())
    assert region.vertices.shape == (4, 3)
    assert np.all(region.vertices[:, 2] == 1.5)
    assert np.allclose(region.center, [0, 0, 1.5])


def test_roof_of_apex_has_one_vertex():
    v = np.array([[0, 0, 2.0], [1, 0, 0], [0, 1, 0], [-1, -1, 0]])
    region = roof_region(TriangleMesh(v, [[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]]))
    assert region.vertices.shape[0] >= 1 and np.allclose(region.center, [0, 0, 2])


def test_sedan_roof_center_near_cabin_top():
    shape = CarShape()
    region = roof_region(shape.mesh())
    assert np.linalg.norm(region.center[:2] - shape.roof_center[:2]) < 0.1
    assert region.center[2] == pytest.approx(region.vertices[:, 2].max())
    assert np.all(region.vertices[:, 2] >= region.vertices[:, 2].max() - 0.2)


def test_placement_transform_cases():
    c = np.array([3.0, -2.0, 0.7])
    T0 = placement_transform(BoxBEV(0, 0, 4, 2, 0.0, 0, 1), c)
    assert np.allclose(T0[:3, :3], np.eye(3)) and np.allclose(T0[:3, 3], c)
    T = placement_transform(BoxBEV(0, 0, 4, 2, np.pi / 2, 0, 1), c)
    assert np.allclose(T @ [1, 0, 0, 1], [3.0, -1.0, 0.7, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.floats(-np.pi, np.pi), st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_placement_is_rigid_and_maps_origin(alpha, center):
    T = placement_transform(BoxBEV(0, 0, 4, 2, alpha, 0, 1), center)
    R = T[:3, :3]
    assert np.allclose(R.T @ R, np.eye(3)) and np.linalg.det(R) == pytest.approx(1.0)
    assert np.array_equal(T @ [0, 0, 0, 1.0], np.array([*center, 1.0]))


def test_fitter_locates_synthetic_roofs(prior):
    shapes = VehicleShapeBank.procedural(grid_shape=SMALL).shapes
    frames, vehicles = generate_synthetic_dataset(SyntheticParams(n_frames=4, vehicles=(3, 4)), rng=5, shapes=shapes,
                                                  return_vehicles=True)
    fitter = RoofFitter(prior)
    errs = []
    for frame, recs in zip(frames, vehicles):
        for box, rec in zip(frame.labels, recs):
            pts = points_in_box(frame.cloud, box)
            if pts.shape[0] < 10:
                continue
            c = fitter.predict(pts, box)
            errs.append((np.linalg.norm(c[:2] - rec.roof_center[:2]), abs(c[2] - rec.roof_center[2])))
    errs = np.array(errs)
    assert len(errs) >= 8
    assert np.mean((errs[:, 0] < 0.1) & (errs[:, 1] < 0.05)) >= 0.75


def test_fitter_is_deterministic_and_sklearn_shaped(prior, small_frames):
    frame = small_frames[0]
    box = frame.labels[0]
    pts = points_in_box(frame.cloud, box)
    a = RoofFitter(prior).fit(pts, box)
    b = RoofFitter(prior).fit(pts, box)
    assert np.array_equal(a.transform_, b.transform_)
    assert set(a.get_params()) == {"prior", "max_iter", "tol", "band"}
    with pytest.raises(ValueError):
        RoofFitter().fit(pts, box)


def test_prior_round_trip(tmp_path, small_bank):
    prior = build_prior(small_bank, 3)
    path = save_prior(prior, tmp_path / "p.rfsp")
    back = load_prior(path)
    assert back.dims == prior.dims and back.k == 3
    assert np.allclose(back.mean, prior.mean, atol=1e-6)
    assert np.allclose(back.basis, prior.basis, atol=1e-6)
    data = path.read_bytes()
    (tmp_path / "short").write_bytes(data[:-4])
    with pytest.raises(PriorFormatError):
        load_prior(tmp_path / "short")
    (tmp_path / "magic").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(PriorFormatError):
        load_prior(tmp_path / "magic")
