import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cqdet.errors import ConfigurationError, RejectionError
from cqdet.geometry import (CameraModel, Detection2D, EgoMotion, RefState, apply_ego,
                            compose_ego, lift_detection, project_many, project_point,
                            wrap_angle, yaw_rotation)
from cqdet.oracles import pinhole_project
from cqdet.verify import random_camera, random_rotation

from conftest import identity_camera


def _det(u, v, w, h, depth, camera_id=0):
    return Detection2D(camera_id, u, v, w, h, np.zeros(3), 0.9, depth)


class TestProjection:
    def test_optical_axis(self):
        p = project_point(identity_camera(), (0, 0, 5))
        assert (p.u, p.v, p.depth, p.visible) == (0.0, 0.0, 5.0, True)

    def test_hand_value(self):
        cam = identity_camera(500, 500, 320, 240)
        p = project_point(cam, (1, 0, 10))
        np.testing.assert_allclose([p.u, p.v, p.depth], [370.0, 240.0, 10.0], rtol=0, atol=1e-12)

    def test_behind_camera(self):
        p = project_point(identity_camera(), (0, 0, -1))
        assert not p.visible
        assert math.isnan(p.u) and math.isnan(p.v)

    def test_vectorized_agrees(self, rng):
        cam = random_camera(rng)
        pts = rng.normal(0, 10, size=(200, 3))
        uv, depth, front = project_many(cam, pts)
        for i, p in enumerate(pts):
            ref = project_point(cam, p)
            assert ref.visible == front[i]
            if ref.visible:
                np.testing.assert_allclose(uv[i], [ref.u, ref.v], rtol=1e-12)

    def test_scalar_oracle(self, rng):
        cam = random_camera(rng)
        for _ in range(50):
            p = cam.to_world(np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(1, 30)]))
            u, v, z = pinhole_project(cam.fx, cam.fy, cam.cx, cam.cy, cam.rotation,
                                      cam.translation, p)
            got = project_point(cam, p)
            np.testing.assert_allclose([got.u, got.v, got.depth], [u, v, z], rtol=1e-12)


class TestCamera:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ConfigurationError):
            CameraModel(1, 1, 0, 0, np.diag([1.0, 1.0, 1.1]), np.zeros(3), 10, 10)

    def test_rejects_reflection(self):
        with pytest.raises(ConfigurationError):
            CameraModel(1, 1, 0, 0, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 10, 10)

    def test_rejects_bad_focal(self):
        with pytest.raises(ConfigurationError):
            CameraModel(0, 1, 0, 0, np.eye(3), np.zeros(3), 10, 10)

    def test_inverse_extrinsic(self, rng):
        cam = random_camera(rng)
        np.testing.assert_allclose(cam.world_to_cam @ cam.cam_to_world, np.eye(4), atol=1e-12)


class TestLift:
    def test_hand_value(self):
        s = lift_detection(identity_camera(), _det(0, 0, 2, 2, 5))
        np.testing.assert_array_equal(s.as_array(), [0, 0, 5, 10, 10, 10, 0, 0, 0])

    def test_metric_width(self):
        cam = identity_camera(500, 500, 320, 240)
        s = lift_detection(cam, _det(320, 240, 100, 50, 10))
        assert s.w == pytest.approx(2.0, abs=1e-15)
        assert s.l == s.w
        assert s.h == pytest.approx(1.0, abs=1e-15)

    def test_round_trip(self, rng):
        for _ in range(200):
            cam = random_camera(rng)
            det = _det(rng.uniform(0, cam.width), rng.uniform(0, cam.height),
                       rng.uniform(1, 200), rng.uniform(1, 200), rng.uniform(0.5, 80))
            s = lift_detection(cam, det)
            p = project_point(cam, s.center)
            np.testing.assert_allclose([p.u, p.v, p.depth], [det.u, det.v, det.depth],
                                       rtol=1e-9, atol=1e-9)
            assert s.theta == 0.0 and s.vx == 0.0 and s.vy == 0.0

    def test_rejects_nonpositive_depth(self):
        with pytest.raises(RejectionError):
            _det(0, 0, 1, 1, 0.0)

    def test_depth_distribution(self):
        det = Detection2D.from_distribution(0, 1, 1, 2, 2, [1.0], 0.8, [4, 5, 6], [0.2, 0.6, 0.2])
        assert det.depth == pytest.approx(5.0)
        assert det.depth_confidence == pytest.approx(0.6)
        with pytest.raises(RejectionError):
            Detection2D.from_distribution(0, 1, 1, 2, 2, [1.0], 0.8, [4, 5], [0.5, 0.6])


class TestRefState:
    def test_wraps_yaw(self):
        s = RefState(0, 0, 0, 1, 1, 1, 3 * math.pi, 0, 0)
        assert -math.pi < s.theta <= math.pi
        assert math.cos(s.theta) == pytest.approx(-1.0)

    def test_rejects_negative_size(self):
        with pytest.raises(RejectionError):
            RefState(0, 0, 0, -1, 1, 1, 0, 0, 0)

    def test_array_round_trip(self):
        a = np.arange(9, dtype=float) * 0.1
        assert RefState.from_array(a) == RefState(*a)


class TestEgo:
    def test_identity(self):
        np.testing.assert_array_equal(apply_ego(EgoMotion.identity(), (1, 2, 3)), [1, 2, 3])

    def test_translation(self):
        e = EgoMotion(np.eye(3), (1, 0, 0))
        np.testing.assert_array_equal(apply_ego(e, (0, 0, 0)), [1, 0, 0])

    def test_quarter_turn(self):
        e = EgoMotion.from_yaw(math.pi / 2)
        np.testing.assert_allclose(apply_ego(e, (1, 0, 0)), [0, 1, 0], atol=1e-15)

    def test_compose_identity(self, rng):
        e = EgoMotion(random_rotation(rng), rng.normal(size=3))
        assert compose_ego(EgoMotion.identity(), e) == e

    def test_compose_translations(self):
        c = compose_ego(EgoMotion(np.eye(3), (1, 0, 0)), EgoMotion(np.eye(3), (0, 2, 0)))
        np.testing.assert_array_equal(c.translation, [1, 2, 0])

    def test_compose_sequential(self, rng):
        a = EgoMotion(random_rotation(rng), rng.normal(size=3))
        b = EgoMotion(random_rotation(rng), rng.normal(size=3))
        ab = compose_ego(a, b)
        for p in rng.normal(size=(100, 3)):
            np.testing.assert_allclose(ab.apply(p), a.apply(b.apply(p)), rtol=0, atol=1e-12)

    def test_yaw_accessor(self):
        assert EgoMotion.from_yaw(0.3).yaw == pytest.approx(0.3, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_angle_range(theta):
    w = wrap_angle(theta)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.sin(w), math.sin(theta), abs_tol=1e-8)
    assert math.isclose(math.cos(w), math.cos(theta), abs_tol=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.floats(-math.pi, math.pi))
def test_yaw_rotation_orthonormal(yaw):
    r = yaw_rotation(yaw)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-14)
    assert np.linalg.det(r) == pytest.approx(1.0)
