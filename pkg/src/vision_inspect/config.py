"""YAML configuration shared by the library and the CLI.

Every section is optional and falls back to the library defaults. Angles
are written in degrees and converted to radians here. A transform is
``{translation: [x, y, z], rotation: 3x3 row-major}``; when ``rotation`` is
omitted the standard camera-axis remapping is used.

Schema (schema_version 1)::

    schema_version: 1
    camera1: {fx, fy, cx, cy, width, height}
    camera2: {fx, fy, cx, cy, width, height}
    rig:
      T_SC1: {translation, rotation}
      T_GC2: {translation, rotation}
      gimbal_origin_in_ccf: [x, y, z]
      pan_limit_deg: 120
      tilt_limit_deg: 45
      x_bounds: [0, 66]
    weights: {w_cov, w_ctr, w_size, w_obl, w_range, w_move, w_trans, alpha,
              f_target, d_star, delta_psi_deg, delta_phi_deg, delta_x, softplus_beta}
    grid: {psi_steps, phi_steps, x_steps}
    ransac: {iterations, inlier_threshold, min_inlier_fraction, seed}
    mission: {culvert_length, waypoint_spacing, settle_time, reverse_allowance,
              max_waypoints, prompt_profile, max_rois}
    timing: {propose, plan_batch, visit_motion, assess_per_roi, advance_speed}
    scene:
      length: 66
      diameter: 1.2
      depth_noise_sigma: 0.005
      invalid_fraction: 0.2
      seed: 0
      defects: [{angular_position_deg, x, extent, label}]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .cylinder_fit import RansacConfig
from .geometry import CAMERA_AXES_IN_CCF, DEFAULT_INTRINSICS, CameraIntrinsics, RigConfig, RigidTransform
from .mission import MissionConfig, TimingModel
from .simulator import Defect, SceneConfig
from .viewplan import CostWeights, GridSpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    K1: CameraIntrinsics = DEFAULT_INTRINSICS
    K2: CameraIntrinsics = DEFAULT_INTRINSICS
    rig: RigConfig = field(default_factory=RigConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    grid: GridSpec = field(default_factory=GridSpec)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    mission: MissionConfig = field(default_factory=MissionConfig)
    scene: SceneConfig | None = None


def _check_keys(section: str, data: dict, allowed) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def _transform(data: dict | None, default: RigidTransform) -> RigidTransform:
    if data is None:
        return default
    _check_keys("transform", data, {"translation", "rotation"})
    rotation = data.get("rotation", CAMERA_AXES_IN_CCF)
    T = RigidTransform(rotation, data.get("translation", default.translation))
    if not T.is_valid(1e-6):
        raise ConfigError("transform rotation is not orthonormal with det +1")
    return T


def _intrinsics(data: dict | None, default: CameraIntrinsics) -> CameraIntrinsics:
    if data is None:
        return default
    _check_keys("camera", data, {"fx", "fy", "cx", "cy", "width", "height"})
    merged = {f.name: getattr(default, f.name) for f in fields(CameraIntrinsics)}
    merged.update(data)
    return CameraIntrinsics(**merged)


def rig_from_dict(data: dict | None) -> RigConfig:
    default = RigConfig()
    if not data:
        return default
    _check_keys(
        "rig",
        data,
        {"T_SC1", "T_GC2", "gimbal_origin_in_ccf", "pan_limit_deg", "tilt_limit_deg", "x_bounds"},
    )
    return RigConfig(
        T_SC1=_transform(data.get("T_SC1"), default.T_SC1),
        T_GC2=_transform(data.get("T_GC2"), default.T_GC2),
        gimbal_origin_in_ccf=tuple(data.get("gimbal_origin_in_ccf", default.gimbal_origin_in_ccf)),
        pan_limit=math.radians(data.get("pan_limit_deg", math.degrees(default.pan_limit))),
        tilt_limit=math.radians(data.get("tilt_limit_deg", math.degrees(default.tilt_limit))),
        x_bounds=tuple(data.get("x_bounds", default.x_bounds)),
    )


_DEG_FIELDS = {"delta_psi_deg": "delta_psi", "delta_phi_deg": "delta_phi"}


def weights_from_dict(data: dict | None) -> CostWeights:
    if not data:
        return CostWeights()
    names = {f.name for f in fields(CostWeights)}
    _check_keys("weights", data, (names - set(_DEG_FIELDS.values())) | set(_DEG_FIELDS))
    kwargs = {}
    for k, v in data.items():
        if k in _DEG_FIELDS:
            kwargs[_DEG_FIELDS[k]] = math.radians(v)
        else:
            kwargs[k] = float(v)
    return CostWeights(**kwargs)


def _simple(cls, section: str, data: dict | None):
    if not data:
        return cls()
    _check_keys(section, data, {f.name for f in fields(cls)})
    return cls(**data)


def scene_from_dict(data: dict | None) -> SceneConfig | None:
    if data is None:
        return None
    _check_keys(
        "scene", data, {"length", "diameter", "defects", "depth_noise_sigma", "invalid_fraction", "seed"}
    )
    defects = []
    for d in data.get("defects", []) or []:
        _check_keys("scene.defects", d, {"angular_position_deg", "x", "extent", "label"})
        defects.append(
            Defect(
                angular_position=math.radians(d["angular_position_deg"]),
                x=float(d["x"]),
                extent=float(d.get("extent", 0.2)),
                label=str(d.get("label", "defect")),
            )
        )
    kwargs = {k: v for k, v in data.items() if k != "defects"}
    return SceneConfig(defects=tuple(defects), **kwargs)


def config_from_dict(data: dict | None) -> PipelineConfig:
    data = dict(data or {})
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    _check_keys(
        "top level",
        data,
        {"camera1", "camera2", "rig", "weights", "grid", "ransac", "mission", "timing", "scene"},
    )
    try:
        K1 = _intrinsics(data.get("camera1"), DEFAULT_INTRINSICS)
        K2 = _intrinsics(data.get("camera2"), DEFAULT_INTRINSICS)
        rig = rig_from_dict(data.get("rig"))
        weights = weights_from_dict(data.get("weights"))
        grid = _simple(GridSpec, "grid", data.get("grid"))
        ransac = _simple(RansacConfig, "ransac", data.get("ransac"))
        timing = _simple(TimingModel, "timing", data.get("timing"))
        mission_data = data.get("mission") or {}
        _check_keys(
            "mission",
            mission_data,
            {"culvert_length", "waypoint_spacing", "settle_time", "reverse_allowance", "max_waypoints",
             "prompt_profile", "max_rois"},
        )
        mission = MissionConfig(
            rig=rig, weights=weights, grid=grid, ransac=ransac, K1=K1, K2=K2, timing=timing, **mission_data
        )
        scene = scene_from_dict(data.get("scene"))
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return PipelineConfig(K1, K2, rig, weights, grid, ransac, mission, scene)


def load_config(path) -> PipelineConfig:
    """Parse a YAML config file; a missing path yields the defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def load_scene(path) -> SceneConfig:
    """Scene file: either a full config with a ``scene`` section or the section alone."""
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if "scene" in data:
        data = data["scene"]
    try:
        return scene_from_dict(data)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
