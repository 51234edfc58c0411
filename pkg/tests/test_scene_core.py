import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import Polygon

from roofadv.scene_core import (
    BoxBEV,
    Proposal,
    SceneFrame,
    as_cloud,
    bev_iou,
    bev_iou_many,
    box_corners,
    points_in_box_mask,
    wrap_angle,
)

coord = st.floats(-20, 20, allow_nan=False)
extent = st.floats(0.3, 6.0, allow_nan=False)
angle = st.floats(-4 * np.pi, 4 * np.pi, allow_nan=False)
boxes = st.builds(lambda x, y, w, h, a: BoxBEV(x, y, w, h, a, -1.7, -0.2), coord, coord, extent, extent, angle)


def shapely_iou(a: BoxBEV, b: BoxBEV) -> float:
    pa, pb = Polygon(a.corners()), Polygon(b.corners())
    inter = pa.intersection(pb).area
    return inter / (pa.area + pb.area - inter)


@given(angle)
def test_wrap_angle_lands_in_half_open_interval(a):
    w = wrap_angle(a)
    assert -np.pi < w <= np.pi
    assert np.isclose(np.cos(w), np.cos(a), atol=1e-9) and np.isclose(np.sin(w), np.sin(a), atol=1e-9)


def test_box_rejects_bad_extents():
    with pytest.raises(ValueError):
        BoxBEV(0, 0, 0.0, 1, 0, 0, 1)
    with pytest.raises(ValueError):
        BoxBEV(0, 0, 1, 1, 0, 1, 1)
    with pytest.raises(ValueError):
        BoxBEV(0, float("nan"), 1, 1, 0, 0, 1)


def test_proposal_score_range():
    b = BoxBEV(0, 0, 4, 2, 0, 0, 1)
    with pytest.raises(ValueError):
        Proposal(b, 1.5)
    assert Proposal(b, 1).score == 1.0


def test_as_cloud_validates_shape_and_finiteness():
    assert as_cloud([]).shape == (0, 3)
    with pytest.raises(ValueError):
        as_cloud(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        as_cloud([[0, 0, np.inf]])


def test_corners_counter_clockwise():
    c = box_corners(BoxBEV(1, 2, 4, 2, 0.3, 0, 1).to_array()[None])[0]
    x, y = c[:, 0], c[:, 1]
    assert 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) == pytest.approx(8.0)


def test_points_in_rotated_box_match_inverse_rotation_oracle(rng):
    box = BoxBEV(3.0, -1.0, 4.0, 2.0, np.pi / 4, -1.0, 1.0)
    pts = rng.uniform([-1, -5, -1.5], [7, 3, 1.5], size=(1000, 3))
    c, s = np.cos(box.alpha), np.sin(box.alpha)
    d = pts[:, :2] - [box.x, box.y]
    local = np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]])
    oracle = (np.abs(local[:, 0]) <= 2.0) & (np.abs(local[:, 1]) <= 1.0) & (pts[:, 2] >= -1) & (pts[:, 2] <= 1)
    assert np.array_equal(points_in_box_mask(pts, box), oracle)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_matches_polygon_clipping_oracle(a, b):
    assert bev_iou(a, b) == pytest.approx(shapely_iou(a, b), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(boxes, boxes, angle, coord, coord)
def test_iou_symmetric_and_rigid_invariant(a, b, rot, tx, ty):
    v = bev_iou(a, b)
    assert bev_iou(b, a) == pytest.approx(v, abs=1e-12)
    moved = bev_iou(a.moved(rot, (tx, ty, 0)), b.moved(rot, (tx, ty, 0)))
    assert moved == pytest.approx(v, abs=1e-9)
    assert 0.0 <= v <= 1.0


def test_iou_of_identical_and_disjoint_boxes():
    a = BoxBEV(0, 0, 4, 2, 0.4, 0, 1)
    assert bev_iou(a, a) == pytest.approx(1.0)
    assert bev_iou(a, BoxBEV(50, 0, 4, 2, 0, 0, 1)) == 0.0


def test_iou_matches_monte_carlo_area_estimate():
    rng = np.random.default_rng(7)
    for _ in range(5):
        a = BoxBEV(*rng.uniform(-1, 1, 2), *rng.uniform(1, 4, 2), rng.uniform(-np.pi, np.pi), 0, 1)
        b = BoxBEV(*rng.uniform(-1, 1, 2), *rng.uniform(1, 4, 2), rng.uniform(-np.pi, np.pi), 0, 1)
        pts = np.column_stack([rng.uniform(-5, 5, size=(10**6, 2)), np.full(10**6, 0.5)])
        ia, ib = points_in_box_mask(pts, a), points_in_box_mask(pts, b)
        mc = np.count_nonzero(ia & ib) / max(np.count_nonzero(ia | ib), 1)
        assert bev_iou(a, b) == pytest.approx(mc, abs=0.01)


def test_iou_frozen_values():
    # reference values from shapely polygon clipping
    a = BoxBEV(0.0, 0.0, 4.0, 2.0, 0.0, 0, 1)
    assert bev_iou(a, BoxBEV(1.0, 0.0, 4.0, 2.0, 0.0, 0, 1)) == pytest.approx(0.6, abs=1e-12)
    assert bev_iou(a, BoxBEV(0.0, 0.0, 4.0, 2.0, np.pi / 2, 0, 1)) == pytest.approx(1 / 3, abs=1e-12)
    assert bev_iou(a, BoxBEV(0.5, 0.3, 3.5, 1.8, 0.3, 0, 1)) == pytest.approx(0.5645343748287767, abs=1e-12)


def test_iou_many_matches_scalar(rng):
    ref = BoxBEV(0, 0, 4, 2, 0.2, 0, 1)
    arr = np.column_stack([rng.uniform(-3, 3, (50, 2)), rng.uniform(1, 4, (50, 2)), rng.uniform(-3, 3, 50),
                           np.zeros(50), np.ones(50)])
    many = bev_iou_many(arr, ref)
    assert np.allclose(many, [bev_iou(BoxBEV.from_array(r), ref) for r in arr], atol=1e-12)


def test_scene_frame_point_counts():
    box = BoxBEV(10, 0, 4, 2, 0, -1.7, -0.2)
    f = SceneFrame("a", [[10, 0, -1], [10.5, 0.2, -0.5], [30, 0, 0]], [box])
    assert f.label_point_counts().tolist() == [2]
    assert f.with_cloud(np.zeros((0, 3))).labels == (box,)
