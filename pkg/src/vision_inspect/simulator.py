"""Deterministic synthetic culvert used as ground truth by the tests and the CLI.

The culvert is an open cylinder of the configured diameter whose axis is
the CCF x axis, spanning ``0 <= x <= length``. Defects are square surface
patches with known positions and no appearance model.

Surface angles are polar angles in the y-z plane measured from +y toward
+z, so the invert (floor) is at -90 deg and the crown at +90 deg.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import vlm_client
from .cylinder_fit import CulvertModel
from .errors import CameraOutsideCylinder, NotVisible
from .geometry import (
    Z_MIN,
    CameraIntrinsics,
    GimbalState,
    RigConfig,
    RigidTransform,
    camera2_to_ccf,
    inverse,
    transform_point,
)
from .roi_fusion import DepthImage, RoiProposal, save_depth


@dataclass(frozen=True)
class Defect:
    angular_position: float
    x: float
    extent: float = 0.2
    label: str = "defect"

    def to_dict(self) -> dict:
        return {
            "angular_position_deg": math.degrees(self.angular_position),
            "x": self.x,
            "extent": self.extent,
            "label": self.label,
        }


@dataclass(frozen=True)
class SceneConfig:
    length: float = 66.0
    diameter: float = 1.2
    defects: tuple[Defect, ...] = ()
    depth_noise_sigma: float = 0.0
    invalid_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "defects", tuple(self.defects))
        if not self.diameter > 0:
            raise ValueError("diameter must be positive")
        if not 0 <= self.invalid_fraction < 1:
            raise ValueError("invalid_fraction must lie in [0, 1)")
        for d in self.defects:
            if not 0 <= d.x <= self.length:
                raise ValueError(f"defect at x={d.x} outside the culvert [0, {self.length}]")

    @property
    def radius(self) -> float:
        return self.diameter / 2.0

    @property
    def model(self) -> CulvertModel:
        return CulvertModel(self.radius, (0.0, 0.0))


@dataclass(frozen=True, eq=False)
class RenderedFrame:
    depth: DepthImage
    camera_pose_ccf: RigidTransform
    ground_truth_hits: np.ndarray


def surface_point(scene: SceneConfig, angle: float, x: float) -> np.ndarray:
    r = scene.radius
    return np.array([x, r * math.cos(angle), r * math.sin(angle)])


def defect_center(scene: SceneConfig, defect: Defect) -> np.ndarray:
    return surface_point(scene, defect.angular_position, defect.x)


def defect_patch(scene: SceneConfig, defect: Defect, n: int = 9) -> np.ndarray:
    """``n*n`` surface points spanning the defect: ``extent`` axially and in arc length."""
    half_angle = defect.extent / (2.0 * scene.radius)
    xs = np.linspace(defect.x - defect.extent / 2, defect.x + defect.extent / 2, n)
    angles = np.linspace(defect.angular_position - half_angle, defect.angular_position + half_angle, n)
    return np.array([surface_point(scene, a, x) for x in xs for a in angles])


def _frame_rng(scene: SceneConfig, frame_seed: int | None) -> np.random.Generator:
    entropy = [scene.seed] if frame_seed is None else [scene.seed, frame_seed]
    return np.random.default_rng(entropy)


def render_depth(
    scene: SceneConfig,
    pose: RigidTransform,
    K: CameraIntrinsics,
    frame_seed: int | None = None,
) -> RenderedFrame:
    """Ray-cast a z-depth image of the culvert wall from camera pose ``pose``.

    ``pose`` maps camera coordinates to the CCF. Integer pixel coordinates
    are pixel centers. Noise and invalid pixels are drawn from one stream
    seeded by ``(scene.seed, frame_seed)`` in row-major pixel order.
    """
    o = pose.translation
    r = scene.radius
    if not o[1] ** 2 + o[2] ** 2 < r * r:
        raise CameraOutsideCylinder(f"camera center {o} is not inside radius {r}")
    W, H = K.width, K.height
    u, v = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ pose.rotation.T
    dy, dz = d[..., 1], d[..., 2]
    a = dy * dy + dz * dz
    b = 2.0 * (o[1] * dy + o[2] * dz)
    c = o[1] ** 2 + o[2] ** 2 - r * r
    disc = b * b - 4.0 * a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    ok = a > 1e-15
    with np.errstate(divide="ignore", invalid="ignore"):
        # c < 0 so exactly one root is positive; pick the cancellation-free form
        t = np.where(b >= 0, 2.0 * c / (-b - sq), (-b + sq) / (2.0 * a))
    t = np.where(ok, t, np.nan)
    hit_x = o[0] + t * d[..., 0]
    hits = ok & (t > 0) & (hit_x >= 0.0) & (hit_x <= scene.length)
    depth = np.where(hits, t, np.nan)

    rng = _frame_rng(scene, frame_seed)
    noise = rng.standard_normal(H * W).reshape(H, W)
    drop = rng.random(H * W).reshape(H, W) < scene.invalid_fraction
    if scene.depth_noise_sigma > 0:
        depth = depth + scene.depth_noise_sigma * noise
        depth = np.where(depth > 0, depth, np.nan)
    depth = np.where(drop, np.nan, depth)
    return RenderedFrame(DepthImage(depth), pose, hits)


def defect_to_roi(
    scene: SceneConfig,
    defect_index: int,
    pose: RigidTransform,
    K: CameraIntrinsics,
    confidence: float = 0.5,
) -> RoiProposal:
    """Ground-truth normalized box of a defect as seen from ``pose``."""
    defect = scene.defects[defect_index]
    pts = transform_point(inverse(pose), defect_patch(scene, defect))
    if np.any(pts[:, 2] <= Z_MIN):
        raise NotVisible(f"defect {defect_index} is (partly) behind the camera")
    u = K.fx * pts[:, 0] / pts[:, 2] + K.cx
    v = K.fy * pts[:, 1] / pts[:, 2] + K.cy
    box = (
        min(max(u.min() / K.width, 0.0), 1.0),
        min(max(v.min() / K.height, 0.0), 1.0),
        min(max(u.max() / K.width, 0.0), 1.0),
        min(max(v.max() / K.height, 0.0), 1.0),
    )
    if not (box[0] < box[2] and box[1] < box[3]):
        raise NotVisible(f"defect {defect_index} projects outside the image")
    reason = f"possible {defect.label} on the culvert surface (defect {defect_index})"
    return RoiProposal(box, reason, confidence)


_DEFECT_TAG = re.compile(r"\(defect (\d+)\)")


def defect_index_from_reason(reason: str) -> int | None:
    m = _DEFECT_TAG.search(reason)
    return int(m.group(1)) if m else None


@dataclass
class SimulatedRobot:
    """Scene handle for the mission runner.

    Remembers every camera pose it captured from, keyed by artifact
    reference, so the synthetic VLM can answer from ground truth.
    """

    scene: SceneConfig
    rig: RigConfig = field(default_factory=RigConfig)
    K1: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480))
    K2: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480))
    out_dir: Path | None = None
    query_poses: dict = field(default_factory=dict)
    closeup_poses: dict = field(default_factory=dict)

    def capture_query(self, waypoint_index: int, x: float) -> tuple[str, DepthImage]:
        ref = f"wp{waypoint_index:02d}_query"
        pose = self.rig.camera1_at(x)
        frame = render_depth(self.scene, pose, self.K1, frame_seed=waypoint_index)
        self.query_poses[ref] = (pose, x)
        if self.out_dir is not None:
            Path(self.out_dir).mkdir(parents=True, exist_ok=True)
            save_depth(Path(self.out_dir) / f"{ref}.depth", frame.depth)
        return ref, frame.depth

    def capture_closeup(self, waypoint_index: int, visit_index: int, g: GimbalState) -> str:
        ref = f"wp{waypoint_index:02d}_visit{visit_index:02d}"
        self.closeup_poses[ref] = camera2_to_ccf(self.rig, g, check_limits=False)
        return ref


class SyntheticVlm:
    """Backend that answers proposal and assessment requests from ground truth.

    Proposals at a query frame are the visible defects whose axial position
    lies in ``[x + lookahead, x + lookahead + segment)``. An assessment is
    Confirmed when every patch point of the tagged defect lands inside the
    close-up frame, Partially Confirmed when only its center does.
    """

    def __init__(self, robot: SimulatedRobot, segment: float = 5.0, lookahead: float = 1.5):
        self.robot = robot
        self.segment = segment
        self.lookahead = lookahead

    def _propose(self, key: dict) -> str:
        pose, x = self.robot.query_poses[key["image_ref"]]
        scene = self.robot.scene
        lo, hi = x + self.lookahead, x + self.lookahead + self.segment
        candidates = sorted(
            (d.x, i) for i, d in enumerate(scene.defects) if lo <= d.x < hi
        )
        rois = []
        for _, i in candidates:
            try:
                rois.append(defect_to_roi(scene, i, pose, self.robot.K1))
            except NotVisible:
                continue
        rois = rois[: key.get("max_rois", 4)]
        if rois:
            conf = round(1.0 / len(rois), 4)
            rois = [RoiProposal(p.box_norm, p.reason, conf) for p in rois]
        payload = [p.to_dict() for p in rois]
        return "Candidate regions:\n```json\n" + json.dumps(payload, indent=2) + "\n```"

    def _in_frame(self, pose: RigidTransform, pts: np.ndarray) -> np.ndarray:
        K = self.robot.K2
        cam = transform_point(inverse(pose), np.atleast_2d(pts))
        front = cam[:, 2] > Z_MIN
        z = np.where(front, cam[:, 2], 1.0)
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy
        return front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)

    def _assess(self, key: dict) -> str:
        scene = self.robot.scene
        idx = defect_index_from_reason(key.get("reason", ""))
        result, description = "Not Confirmed", None
        if idx is not None and idx < len(scene.defects):
            defect = scene.defects[idx]
            full = part = False
            for ref in key.get("closeup_refs", []):
                pose = self.robot.closeup_poses[ref]
                inside = self._in_frame(pose, defect_patch(scene, defect))
                full |= bool(inside.all())
                part |= bool(self._in_frame(pose, defect_center(scene, defect))[0])
            if full:
                result = "Confirmed"
            elif part:
                result = "Partially Confirmed"
            if result != "Not Confirmed":
                description = f"{defect.label} about {defect.extent:.2f} m across at x={defect.x:.2f} m"
        record = {"original_rationale": key.get("reason", ""), "result": result}
        if description:
            record["description"] = description
        return json.dumps(record)

    def complete(self, key: dict, messages: list) -> str:
        if key.get("profile") == vlm_client.ASSESSMENT_PROFILE:
            content = self._assess(key)
        else:
            content = self._propose(key)
        return vlm_client.make_response_body(content)
