import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lt3d.geometry import (Box2D, Box3D, Camera, CameraIntrinsics, Pose, bev_center_distance,
                           bev_iou, corners_of_box3d, is_rotation, iou_2d, load_cameras,
                           look_at_pose, perturb_extrinsics, project_box3d_to_image, project_to_rig,
                           save_cameras, wrap_angle)

coord = st.floats(-50, 50, allow_nan=False)
dim = st.floats(0.2, 10, allow_nan=False)
yaw = st.floats(-math.pi, math.pi, allow_nan=False).map(wrap_angle)


@st.composite
def boxes3d(draw):
    return Box3D((draw(coord), draw(coord), draw(coord)), draw(dim), draw(dim), draw(dim), draw(yaw))


@st.composite
def boxes2d(draw):
    x1, y1 = draw(st.floats(0, 100)), draw(st.floats(0, 100))
    return Box2D(x1, y1, x1 + draw(st.floats(0.5, 50)), y1 + draw(st.floats(0.5, 50)))


K = CameraIntrinsics(1000.0, 1000.0, 800.0, 450.0, 1600, 900)


class TestBevDistance:
    def test_identical_centers(self):
        b = Box3D((1, 2, 3), 1, 1, 1)
        assert bev_center_distance(b, b) == 0.0

    def test_three_four_five(self):
        assert bev_center_distance(Box3D((0, 0, 9), 1, 1, 1), Box3D((3, 4, -2), 1, 1, 1)) == 5.0

    @given(boxes3d(), boxes3d())
    def test_matches_componentwise_arithmetic(self, a, b):
        dx = a.center[0] - b.center[0]
        dy = a.center[1] - b.center[1]
        assert bev_center_distance(a, b) == pytest.approx(math.sqrt(dx * dx + dy * dy), rel=1e-12, abs=1e-12)

    @given(boxes3d(), boxes3d(), boxes3d())
    def test_metric_properties(self, a, b, c):
        assert bev_center_distance(a, b) == bev_center_distance(b, a) >= 0
        assert bev_center_distance(a, c) <= bev_center_distance(a, b) + bev_center_distance(b, c) + 1e-9
        same_xy = a.center[:2] == b.center[:2]
        assert (bev_center_distance(a, b) == 0) == same_xy


class TestCorners:
    def test_axis_aligned_cube(self):
        corners = corners_of_box3d(Box3D((0, 0, 0), 2, 2, 2, 0.0))
        expected = [(1, 1, -1), (-1, 1, -1), (-1, -1, -1), (1, -1, -1),
                    (1, 1, 1), (-1, 1, 1), (-1, -1, 1), (1, -1, 1)]
        np.testing.assert_allclose(corners, expected)

    def test_quarter_turn_swaps_footprint(self):
        corners = corners_of_box3d(Box3D((0, 0, 0), 4, 2, 1, math.pi / 2))
        extent = corners.max(axis=0) - corners.min(axis=0)
        np.testing.assert_allclose(extent, [2, 4, 1], atol=1e-12)

    @given(boxes3d())
    def test_pairwise_distances_preserved(self, b):
        ref = corners_of_box3d(Box3D(b.center, b.length, b.width, b.height, 0.0))
        rot = corners_of_box3d(b)
        for i, j in itertools.combinations(range(8), 2):
            assert np.linalg.norm(rot[i] - rot[j]) == pytest.approx(np.linalg.norm(ref[i] - ref[j]), abs=1e-9)

    def test_rejects_bad_boxes(self):
        with pytest.raises(ValueError):
            Box3D((0, 0, 0), 0.0, 1, 1)
        with pytest.raises(ValueError):
            Box3D((0, 0, 0), 1, 1, 1, yaw=-math.pi)
        with pytest.raises(ValueError):
            Box2D(1, 0, 1, 2)


class TestProjection:
    def test_on_axis_box_is_symmetric(self):
        # camera frame == ego frame here, so +z is forward
        box = Box3D((0, 0, 10), 2, 2, 2)
        proj = project_box3d_to_image(box, Pose.identity(), K)
        assert (proj.x1 + proj.x2) / 2 == pytest.approx(K.cx)
        assert (proj.y1 + proj.y2) / 2 == pytest.approx(K.cy)

    def test_behind_camera(self):
        assert project_box3d_to_image(Box3D((0, 0, -10), 2, 2, 2), Pose.identity(), K) is None

    def test_outside_image(self):
        assert project_box3d_to_image(Box3D((500, 0, 10), 2, 2, 2), Pose.identity(), K) is None

    def test_general_pose_matches_per_corner_projection(self):
        pose = look_at_pose((0.3, -0.2, 1.5), yaw=0.4, pitch=0.05)
        for b in [Box3D((12, 3, 0.8), 4, 2, 1.6, 0.7), Box3D((8, 5, 1), 1, 1, 2, -2.0)]:
            pts = []
            for c in corners_of_box3d(b):
                xc, yc, zc = pose.rotation @ c + pose.translation
                assert zc > 0
                pts.append((K.fx * xc / zc + K.cx, K.fy * yc / zc + K.cy))
            pts = np.array(pts)
            proj = project_box3d_to_image(b, pose, K)
            assert proj.x1 == pytest.approx(max(pts[:, 0].min(), 0))
            assert proj.x2 == pytest.approx(min(pts[:, 0].max(), K.width))
            assert proj.y1 == pytest.approx(max(pts[:, 1].min(), 0))
            assert proj.y2 == pytest.approx(min(pts[:, 1].max(), K.height))

    def test_moves_right_when_box_moves_right(self):
        pose = Pose.identity()
        prev = None
        for x in np.linspace(-3, 3, 13):
            proj = project_box3d_to_image(Box3D((x, 0, 15), 1, 1, 1), pose, K)
            if prev is not None:
                assert proj.x1 > prev.x1 and proj.x2 > prev.x2
            prev = proj

    def test_look_at_pose_forward_axis(self):
        pose = look_at_pose((0, 0, 1.6), yaw=math.pi / 2)
        # a point straight ahead (+y in ego) lands on the optical axis
        p = pose.apply(np.array([[0.0, 10.0, 1.6]]))[0]
        np.testing.assert_allclose(p, [0, 0, 10], atol=1e-12)

    def test_rig_projection_reports_camera_ids(self):
        cams = [Camera("front", K, look_at_pose((0, 0, 1.5), 0.0)),
                Camera("back", K, look_at_pose((0, 0, 1.5), math.pi))]
        hits = project_to_rig(Box3D((10, 0, 1), 2, 2, 2), cams)
        assert [cid for cid, _ in hits] == ["front"]


class TestIoU:
    def test_identity_and_disjoint(self):
        a = Box2D(0, 0, 2, 2)
        assert iou_2d(a, a) == 1.0
        assert iou_2d(a, Box2D(5, 5, 6, 6)) == 0.0

    def test_half_overlap(self):
        assert iou_2d(Box2D(0, 0, 2, 2), Box2D(1, 0, 3, 2)) == pytest.approx(1 / 3)

    @given(boxes2d(), boxes2d())
    def test_properties(self, a, b):
        v = iou_2d(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou_2d(b, a)
        assert iou_2d(a, a) == 1.0

    def test_bev_iou_of_identical_boxes(self):
        b = Box3D((3, 4, 0), 4, 2, 1, 0.3)
        assert bev_iou(b, b) == 1.0
        assert bev_iou(b, b.translated(dx=100)) == 0.0


class TestPerturb:
    def test_zero_noise_is_identity(self):
        p = look_at_pose((1, 2, 1.5), 0.3)
        assert perturb_extrinsics(p, 0.0, 0.0, 5) == p

    def test_deterministic(self):
        p = look_at_pose((1, 2, 1.5), 0.3)
        assert perturb_extrinsics(p, 0.1, 0.05, 11) == perturb_extrinsics(p, 0.1, 0.05, 11)
        assert perturb_extrinsics(p, 0.1, 0.05, 11) != perturb_extrinsics(p, 0.1, 0.05, 12)

    @settings(max_examples=200)
    @given(st.floats(0, 1), st.floats(0, math.pi), st.integers(0, 2**31))
    def test_output_is_rotation(self, sigma_t, sigma_r, seed):
        out = perturb_extrinsics(look_at_pose((0, 0, 1.6), 1.0), sigma_t, sigma_r, seed)
        assert is_rotation(out.rotation, 1e-9)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            perturb_extrinsics(Pose.identity(), -1.0, 0.0, 0)


def test_camera_file_round_trip(tmp_path):
    cams = [Camera("c0", K, look_at_pose((0, 0, 1.6), 0.5)), Camera("c1", K, Pose.identity())]
    save_cameras(cams, tmp_path / "cams.json")
    assert load_cameras(tmp_path / "cams.json") == cams


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
