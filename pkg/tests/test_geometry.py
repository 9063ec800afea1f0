from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from vision_inspect.errors import BehindCamera, InvalidDepth, LimitViolation
from vision_inspect.geometry import (
    CAMERA_AXES_IN_CCF,
    DEFAULT_INTRINSICS,
    CameraIntrinsics,
    GimbalState,
    RigConfig,
    RigidTransform,
    backproject,
    camera2_to_ccf,
    compose,
    inverse,
    project,
    rot_y,
    rot_z,
    transform_point,
)

K = DEFAULT_INTRINSICS


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_transform(rng) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-5, 5, 3))


seeds = st.integers(min_value=0, max_value=2**32 - 1)


# --- compose / inverse --------------------------------------------------------


def test_compose_identity_left():
    T = random_transform(np.random.default_rng(0))
    out = compose(RigidTransform.identity(), T)
    np.testing.assert_array_equal(out.rotation, T.rotation)
    np.testing.assert_array_equal(out.translation, T.translation)


def test_compose_with_inverse_is_identity():
    T = random_transform(np.random.default_rng(1))
    out = compose(T, inverse(T))
    np.testing.assert_allclose(out.matrix(), np.eye(4), atol=1e-9)


def test_compose_rz_ry_chain_matches_matrix_product():
    a = RigidTransform(rot_z(math.pi / 2))
    b = RigidTransform(rot_y(math.pi / 2))
    out = transform_point(compose(a, b), [0.0, 0.0, 1.0])
    expected = oracles.apply4(oracles.matmul4(oracles.rz4(math.pi / 2), oracles.ry4(math.pi / 2)), [0, 0, 1])
    np.testing.assert_allclose(out, expected, atol=1e-12)
    # Ry first sends +z to +x, Rz then sends +x to +y
    np.testing.assert_allclose(out, [0.0, 1.0, 0.0], atol=1e-12)
    # applying the yaw first instead lands on +x
    np.testing.assert_allclose(transform_point(compose(b, a), [0, 0, 1]), [1.0, 0.0, 0.0], atol=1e-12)


def test_compose_formula():
    rng = np.random.default_rng(2)
    a, b = random_transform(rng), random_transform(rng)
    c = compose(a, b)
    np.testing.assert_allclose(c.rotation, a.rotation @ b.rotation, atol=1e-12)
    np.testing.assert_allclose(c.translation, a.rotation @ b.translation + a.translation, atol=1e-12)
    np.testing.assert_allclose((a @ b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)


@given(seeds)
def test_composition_is_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_transform(rng) for _ in range(3))
    np.testing.assert_allclose(compose(compose(a, b), c).matrix(), compose(a, compose(b, c)).matrix(), atol=1e-9)


@given(seeds)
def test_random_transforms_satisfy_invariants(seed):
    T = random_transform(np.random.default_rng(seed))
    assert T.is_valid()
    np.testing.assert_allclose(compose(T, inverse(T)).matrix(), np.eye(4), atol=1e-9)


def test_transforms_are_immutable():
    T = RigidTransform.identity()
    with pytest.raises(ValueError):
        T.rotation[0, 0] = 2.0


def test_is_valid_rejects_reflection():
    assert not RigidTransform(np.diag([1.0, 1.0, -1.0])).is_valid()
    assert not RigidTransform(np.diag([2.0, 1.0, 1.0])).is_valid()


def test_camera_axis_remap_is_proper_rotation():
    T = RigidTransform(CAMERA_AXES_IN_CCF)
    assert T.is_valid()
    # optical axis -> +x, image right -> -y, image down -> -z
    np.testing.assert_array_equal(CAMERA_AXES_IN_CCF @ [0, 0, 1], [1, 0, 0])
    np.testing.assert_array_equal(CAMERA_AXES_IN_CCF @ [1, 0, 0], [0, -1, 0])
    np.testing.assert_array_equal(CAMERA_AXES_IN_CCF @ [0, 1, 0], [0, 0, -1])


# --- transform_point ----------------------------------------------------------


def test_transform_point_identity():
    p = np.array([0.3, -1.2, 4.0])
    np.testing.assert_array_equal(transform_point(RigidTransform.identity(), p), p)


def test_transform_point_translation_on_origin():
    np.testing.assert_array_equal(transform_point(RigidTransform.from_translation([1, 0, 0]), [0, 0, 0]), [1, 0, 0])


@given(seeds)
def test_transform_then_inverse_round_trip(seed):
    rng = np.random.default_rng(seed)
    T = random_transform(rng)
    p = rng.uniform(-10, 10, 3)
    np.testing.assert_allclose(transform_point(inverse(T), transform_point(T, p)), p, atol=1e-9)


def test_transform_point_batch_matches_single():
    rng = np.random.default_rng(3)
    T = random_transform(rng)
    pts = rng.normal(size=(10, 3))
    batch = transform_point(T, pts)
    for p, q in zip(pts, batch):
        np.testing.assert_allclose(transform_point(T, p), q, atol=1e-14)


# --- camera2_to_ccf -----------------------------------------------------------


def test_neutral_pose_with_identity_mount_is_identity():
    rig = RigConfig(T_GC2=RigidTransform.identity(), gimbal_origin_in_ccf=(0, 0, 0))
    T = camera2_to_ccf(rig, GimbalState(0.0, 0.0, 0.0))
    np.testing.assert_allclose(T.matrix(), np.eye(4), atol=1e-15)


def test_neutral_pose_uses_camera_axis_convention():
    rig = RigConfig(T_GC2=RigidTransform(CAMERA_AXES_IN_CCF), gimbal_origin_in_ccf=(0, 0, 0))
    T = camera2_to_ccf(rig, GimbalState(0.0, 0.0, 0.0))
    np.testing.assert_allclose(T.rotation, CAMERA_AXES_IN_CCF, atol=1e-15)
    np.testing.assert_allclose(T.translation, 0.0, atol=1e-15)


def test_axial_translation_shifts_only_translation():
    rig = RigConfig()
    T0 = camera2_to_ccf(rig, GimbalState(0.0, 0.0, 0.0))
    T2 = camera2_to_ccf(rig, GimbalState(0.0, 0.0, 2.0))
    np.testing.assert_array_equal(T0.rotation, T2.rotation)
    np.testing.assert_allclose(T2.translation - T0.translation, [2.0, 0.0, 0.0], atol=1e-15)


def test_full_chain_against_brute_force_product():
    rig = RigConfig()
    g = GimbalState(math.radians(30), math.radians(10), 1.0)
    T = camera2_to_ccf(rig, g)
    ref = oracles.camera2_pose(
        g.psi, g.phi, g.x, rig.gimbal_origin_in_ccf, rig.T_GC2.rotation.tolist(), rig.T_GC2.translation.tolist()
    )
    np.testing.assert_allclose(T.matrix(), np.array(ref), atol=1e-12)


def test_limit_violation():
    rig = RigConfig()
    with pytest.raises(LimitViolation):
        camera2_to_ccf(rig, GimbalState(math.radians(61), 0.0, 1.0))
    with pytest.raises(LimitViolation):
        camera2_to_ccf(rig, GimbalState(0.0, math.radians(-23), 1.0))
    with pytest.raises(LimitViolation):
        camera2_to_ccf(rig, GimbalState(0.0, 0.0, 67.0))
    camera2_to_ccf(rig, GimbalState(math.radians(60), math.radians(22.5), 66.0))


def test_sign_conventions():
    rig = RigConfig()
    axis_left = camera2_to_ccf(rig, GimbalState(0.3, 0.0, 0.0)).rotation[:, 2]
    axis_down = camera2_to_ccf(rig, GimbalState(0.0, 0.3, 0.0)).rotation[:, 2]
    assert axis_left[1] > 0 and abs(axis_left[2]) < 1e-15
    assert axis_down[2] < 0 and abs(axis_down[1]) < 1e-15


@given(
    st.floats(-math.pi / 3, math.pi / 3),
    st.floats(-math.pi / 8, math.pi / 8),
    st.floats(0.0, 66.0),
)
def test_camera2_rotation_is_orthonormal(psi, phi, x):
    assert camera2_to_ccf(RigConfig(), GimbalState(psi, phi, x)).is_valid()


def test_forward_point_at_gimbal_height_hits_principal_point():
    rig = RigConfig()
    T = camera2_to_ccf(rig, GimbalState(0.0, 0.0, 0.0))
    for d in (0.5, 2.0, 10.0):
        p = [d, 0.0, rig.gimbal_origin_in_ccf[2]]
        u, v = project(K, transform_point(inverse(T), p))
        assert abs(u - K.cx) < 1e-6 and abs(v - K.cy) < 1e-6


def test_rig_rejects_bad_limits():
    with pytest.raises(ValueError):
        RigConfig(pan_limit=0.0)
    with pytest.raises(ValueError):
        RigConfig(x_bounds=(2.0, 1.0))


# --- projection ---------------------------------------------------------------


def test_project_principal_point():
    assert project(K, [0, 0, 1]) == (320.0, 240.0)


def test_project_offset_point():
    assert project(K, [0.1, 0, 1]) == pytest.approx((500 * 0.1 / 1 + 320, 240.0), abs=1e-12)


def test_project_far_out_of_frame_is_legal():
    u, v = project(K, [10.0, -10.0, 1.0])
    assert u > K.width and v < 0


@pytest.mark.parametrize("z", [-1.0, 0.0, 1e-6, 5e-7])
def test_project_behind_camera(z):
    with pytest.raises(BehindCamera):
        project(K, [0, 0, z])


def test_backproject_principal_point():
    np.testing.assert_array_equal(backproject(K, K.cx, K.cy, 1.0), [0, 0, 1])


def test_backproject_offset_pixel():
    np.testing.assert_allclose(backproject(K, 370, 240, 2.0), [(370 - 320) * 2.0 / 500, 0.0, 2.0], atol=1e-15)


@pytest.mark.parametrize("d", [0.0, -1.0, math.nan, math.inf])
def test_backproject_invalid_depth(d):
    with pytest.raises(InvalidDepth):
        backproject(K, 10, 10, d)


@given(st.floats(-200, 840), st.floats(-200, 680), st.floats(0.01, 100.0))
def test_project_backproject_round_trip(u, v, d):
    uu, vv = project(K, backproject(K, u, v, d))
    assert abs(uu - u) < 1e-9 and abs(vv - v) < 1e-9


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(fx=0, fy=1, cx=1, cy=1, width=2, height=2),
        dict(fx=1, fy=-1, cx=1, cy=1, width=2, height=2),
        dict(fx=1, fy=1, cx=0, cy=1, width=2, height=2),
        dict(fx=1, fy=1, cx=1, cy=2, width=2, height=2),
    ],
)
def test_intrinsics_invariants(kwargs):
    with pytest.raises(ValueError):
        CameraIntrinsics(**kwargs)


def test_intrinsics_matrix():
    np.testing.assert_array_equal(K.matrix(), [[500, 0, 320], [0, 500, 240], [0, 0, 1]])


def test_gimbal_state_array_round_trip():
    g = GimbalState(0.1, -0.2, 3.0)
    assert GimbalState.from_array(g.as_array()) == g
