"""Frames, rigid transforms, the pan/tilt kinematic chain and the pinhole model.

Frame conventions
-----------------
CCF (culvert frame, world)
    Right-handed. +x runs along the bore, +z points up, +y completes the set
    (left when looking down +x).
Gimbal frame
    Origin at the gimbal rotation center. Aligned with the CCF at neutral
    pose; yaw is about +z_G, pitch about +y_G, applied yaw first.
Camera frame
    Standard computer vision frame: +z along the optical axis, +x right in
    the image, +y down in the image. The extrinsic calibration maps
    +z_C -> +x_S, +x_C -> -y_S, +y_C -> -z_S, see :data:`CAMERA_AXES_IN_CCF`.

Angle signs: positive yaw turns the optical axis toward +y (left), positive
pitch tips it toward -z (down). Both follow the right-hand rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, InvalidDepth, LimitViolation

Z_MIN = 1e-6

# Columns are the camera x, y, z axes expressed in the CCF.
CAMERA_AXES_IN_CCF = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)


def _as_vec3(p) -> np.ndarray:
    v = np.asarray(p, dtype=float).reshape(3)
    return v


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Homogeneous pose ``p_target = R @ p_source + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, M) -> RigidTransform:
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0.0)
            and abs(np.linalg.det(R) - 1.0) <= tol
        )

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def transform_point(T: RigidTransform, p) -> np.ndarray:
    """Apply ``T`` to a point, or to an ``(N, 3)`` array of points."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return T.rotation @ p + T.translation
    return p @ T.rotation.T + T.translation


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class GimbalState:
    """Camera-2 configuration: yaw (rad), pitch (rad), axial position (m)."""

    psi: float = 0.0
    phi: float = 0.0
    x: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.psi, self.phi, self.x], dtype=float)

    @classmethod
    def from_array(cls, q) -> GimbalState:
        return cls(float(q[0]), float(q[1]), float(q[2]))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


DEFAULT_INTRINSICS = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


@dataclass(frozen=True)
class RigConfig:
    """Fixed calibration of both cameras plus the gimbal's mechanical limits.

    ``pan_limit`` and ``tilt_limit`` are full ranges; the gimbal sweeps
    ``[-limit/2, +limit/2]``. ``x_bounds`` bounds the axial translation.
    """

    T_SC1: RigidTransform = field(
        default_factory=lambda: RigidTransform(CAMERA_AXES_IN_CCF, [0.25, 0.0, -0.05])
    )
    T_GC2: RigidTransform = field(
        default_factory=lambda: RigidTransform(CAMERA_AXES_IN_CCF, [0.03, 0.0, 0.0])
    )
    gimbal_origin_in_ccf: tuple[float, float, float] = (0.0, 0.0, -0.15)
    pan_limit: float = math.radians(120.0)
    tilt_limit: float = math.radians(45.0)
    x_bounds: tuple[float, float] = (0.0, 66.0)

    def __post_init__(self):
        if not (self.pan_limit > 0 and self.tilt_limit > 0):
            raise ValueError("pan and tilt limits must be positive")
        lo, hi = self.x_bounds
        if not lo <= hi:
            raise ValueError(f"empty x_bounds {self.x_bounds}")
        object.__setattr__(self, "x_bounds", (float(lo), float(hi)))
        object.__setattr__(
            self, "gimbal_origin_in_ccf", tuple(float(v) for v in self.gimbal_origin_in_ccf)
        )

    @property
    def psi_bounds(self) -> tuple[float, float]:
        return (-self.pan_limit / 2, self.pan_limit / 2)

    @property
    def phi_bounds(self) -> tuple[float, float]:
        return (-self.tilt_limit / 2, self.tilt_limit / 2)

    def bounds(self) -> list[tuple[float, float]]:
        """Box bounds ordered (psi, phi, x)."""
        return [self.psi_bounds, self.phi_bounds, self.x_bounds]

    def within_limits(self, g: GimbalState, tol: float = 1e-12) -> bool:
        return all(
            lo - tol <= v <= hi + tol for v, (lo, hi) in zip(g.as_array(), self.bounds())
        )

    def camera1_at(self, robot_x: float) -> RigidTransform:
        """Camera-1 to CCF with the robot moved ``robot_x`` along +x."""
        return compose(RigidTransform.from_translation([robot_x, 0.0, 0.0]), self.T_SC1)


def gimbal_to_ccf(rig: RigConfig, x: float) -> RigidTransform:
    origin = np.asarray(rig.gimbal_origin_in_ccf) + np.array([x, 0.0, 0.0])
    return RigidTransform.from_translation(origin)


def camera2_to_ccf(rig: RigConfig, g: GimbalState, check_limits: bool = True) -> RigidTransform:
    """Camera-2 pose in the CCF: ``T_SG(x) * Rz(psi) * Ry(phi) * T_GC2``."""
    if check_limits and not rig.within_limits(g):
        raise LimitViolation(f"{g} outside rig limits {rig.bounds()}")
    yaw = RigidTransform(rot_z(g.psi))
    pitch = RigidTransform(rot_y(g.phi))
    return compose(compose(compose(gimbal_to_ccf(rig, g.x), yaw), pitch), rig.T_GC2)


def project(K: CameraIntrinsics, p_cam, z_min: float = Z_MIN) -> tuple[float, float]:
    """Pinhole projection of a camera-frame point. Out-of-frame results are legal."""
    X, Y, Z = _as_vec3(p_cam)
    if not Z > z_min:
        raise BehindCamera(f"point depth {Z} <= {z_min}")
    return (K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy)


def backproject(K: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray:
    """Lift pixel ``(u, v)`` at z-depth ``depth`` into the camera frame."""
    if not (math.isfinite(depth) and depth > 0):
        raise InvalidDepth(f"depth must be finite and positive, got {depth}")
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])
