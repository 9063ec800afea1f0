"""Lift normalized VLM boxes into depth-enriched, cylinder-clipped 3D ROIs."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cylinder_fit import CulvertModel, clip_to_cylinder, surface_normal
from .errors import EmptyBox, NoValidDepth
from .geometry import CameraIntrinsics, RigConfig, backproject, transform_point

MIN_VALID_FRACTION = 0.1


@dataclass(frozen=True)
class RoiProposal:
    box_norm: tuple[float, float, float, float]
    reason: str = ""
    confidence: float = 0.0

    def __post_init__(self):
        box = tuple(float(v) for v in self.box_norm)
        if len(box) != 4:
            raise ValueError(f"box must have 4 components, got {len(box)}")
        if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in box):
            raise ValueError(f"box components must lie in [0, 1]: {box}")
        x0, y0, x1, y1 = box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"box must satisfy x_min < x_max and y_min < y_max: {box}")
        conf = float(self.confidence)
        if not (math.isfinite(conf) and 0.0 <= conf <= 1.0):
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        object.__setattr__(self, "box_norm", box)
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "reason", str(self.reason))

    def to_dict(self) -> dict:
        return {"box": list(self.box_norm), "reason": self.reason, "confidence": self.confidence}

    @classmethod
    def from_dict(cls, d: dict) -> RoiProposal:
        return cls(tuple(d["box"]), d.get("reason", ""), d.get("confidence", 0.0))


@dataclass(frozen=True)
class PixelRect:
    """Inclusive pixel rectangle."""

    x0: int
    y0: int
    x1: int
    y1: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def corners(self) -> list[tuple[int, int]]:
        return [(self.x0, self.y0), (self.x1, self.y0), (self.x1, self.y1), (self.x0, self.y1)]


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Z-depth map in meters; NaN (or any non-positive value) marks missing stereo."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("depth image must be 2D")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def valid_mask(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.isfinite(self.values) & (self.values > 0)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def box_to_pixels(box_norm, K: CameraIntrinsics) -> PixelRect:
    x0, y0, x1, y1 = (float(v) for v in box_norm)
    W, H = K.width, K.height

    def clamp(v, hi):
        return min(max(v, 0), hi)

    rect = PixelRect(
        clamp(_round_half_up(x0 * W), W - 1),
        clamp(_round_half_up(y0 * H), H - 1),
        clamp(_round_half_up(x1 * W), W - 1),
        clamp(_round_half_up(y1 * H), H - 1),
    )
    if rect.x1 <= rect.x0 or rect.y1 <= rect.y0:
        raise EmptyBox(f"box {tuple(box_norm)} has zero pixel area: {rect.as_tuple()}")
    return rect


def sample_depth_stats(depth: DepthImage, rect: PixelRect) -> tuple[float, float, float, float]:
    """(median, min, max, valid_fraction) over the valid pixels in ``rect``.

    The median of an even count is the lower of the two middle values.
    """
    if not (0 <= rect.x0 <= rect.x1 < depth.width and 0 <= rect.y0 <= rect.y1 < depth.height):
        raise ValueError(f"rect {rect.as_tuple()} outside {depth.width}x{depth.height} image")
    window = depth.values[rect.y0 : rect.y1 + 1, rect.x0 : rect.x1 + 1]
    with np.errstate(invalid="ignore"):
        good = window[np.isfinite(window) & (window > 0)]
    if good.size == 0:
        raise NoValidDepth(f"no valid depth inside {rect.as_tuple()}")
    ordered = np.sort(good, kind="stable")
    median = float(ordered[(ordered.size - 1) // 2])
    return median, float(ordered[0]), float(ordered[-1]), good.size / window.size


@dataclass(frozen=True, eq=False)
class EnrichedRoi:
    proposal: RoiProposal
    box_px: PixelRect
    depth_median: float
    depth_min: float
    depth_max: float
    valid_fraction: float
    vertices_ccf: np.ndarray
    center_ccf: np.ndarray
    normal_ccf: np.ndarray
    image_ref: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, shape in (("vertices_ccf", (-1, 3)), ("center_ccf", (3,)), ("normal_ccf", (3,))):
            arr = np.array(getattr(self, name), dtype=float).reshape(shape)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def depth_spread(self) -> float:
        return self.depth_max - self.depth_min

    def __eq__(self, other):
        if not isinstance(other, EnrichedRoi):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def mirrored_y(self) -> EnrichedRoi:
        """Reflection across the vertical x-z plane (y -> -y)."""
        flip = np.array([1.0, -1.0, 1.0])
        return EnrichedRoi(
            proposal=self.proposal,
            box_px=self.box_px,
            depth_median=self.depth_median,
            depth_min=self.depth_min,
            depth_max=self.depth_max,
            valid_fraction=self.valid_fraction,
            vertices_ccf=self.vertices_ccf * flip,
            center_ccf=self.center_ccf * flip,
            normal_ccf=self.normal_ccf * flip,
            image_ref=self.image_ref,
            extra=dict(self.extra),
        )

    def to_dict(self) -> dict:
        return {
            "proposal": self.proposal.to_dict(),
            "image_ref": self.image_ref,
            "box_px": list(self.box_px.as_tuple()),
            "depth": {
                "median": self.depth_median,
                "min": self.depth_min,
                "max": self.depth_max,
                "spread": self.depth_spread,
                "valid_fraction": self.valid_fraction,
            },
            "vertices_ccf": self.vertices_ccf.tolist(),
            "center_ccf": self.center_ccf.tolist(),
            "normal_ccf": self.normal_ccf.tolist(),
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, d: dict) -> EnrichedRoi:
        depth = d["depth"]
        return cls(
            proposal=RoiProposal.from_dict(d["proposal"]),
            box_px=PixelRect(*d["box_px"]),
            depth_median=depth["median"],
            depth_min=depth["min"],
            depth_max=depth["max"],
            valid_fraction=depth["valid_fraction"],
            vertices_ccf=d["vertices_ccf"],
            center_ccf=d["center_ccf"],
            normal_ccf=d["normal_ccf"],
            image_ref=d.get("image_ref", ""),
            extra=d.get("extra", {}),
        )


def enrich(
    proposal: RoiProposal,
    depth: DepthImage,
    K1: CameraIntrinsics,
    rig: RigConfig,
    model: CulvertModel,
    robot_x: float = 0.0,
    min_valid_fraction: float = MIN_VALID_FRACTION,
    image_ref: str = "",
) -> EnrichedRoi:
    """Fuse one proposal with the camera-1 depth map taken at ``robot_x``.

    The 3D ROI is the 4 box corners backprojected at both the minimum and
    maximum box depth, moved into the CCF and clipped onto the fitted
    cylinder. Its center is the re-clipped centroid of those 8 vertices.
    """
    if (depth.width, depth.height) != (K1.width, K1.height):
        raise ValueError(
            f"depth image {depth.width}x{depth.height} does not match intrinsics "
            f"{K1.width}x{K1.height}"
        )
    rect = box_to_pixels(proposal.box_norm, K1)
    median, dmin, dmax, frac = sample_depth_stats(depth, rect)
    if frac < min_valid_fraction:
        raise NoValidDepth(
            f"valid depth fraction {frac:.3f} below {min_valid_fraction} in {rect.as_tuple()}"
        )
    cam = np.array([backproject(K1, u, v, d) for d in (dmin, dmax) for (u, v) in rect.corners()])
    world = transform_point(rig.camera1_at(robot_x), cam)
    vertices = clip_to_cylinder(world, model)
    center = clip_to_cylinder(vertices.mean(axis=0), model)
    normal = surface_normal(center, model)
    return EnrichedRoi(
        proposal=proposal,
        box_px=rect,
        depth_median=median,
        depth_min=dmin,
        depth_max=dmax,
        valid_fraction=frac,
        vertices_ccf=vertices,
        center_ccf=center,
        normal_ccf=normal,
        image_ref=image_ref,
    )


def local_point_cloud(
    depth: DepthImage, K1: CameraIntrinsics, rig: RigConfig, robot_x: float = 0.0, max_points: int = 5000
) -> np.ndarray:
    """All valid depth pixels lifted into the CCF, evenly subsampled."""
    vs, us = np.nonzero(depth.valid_mask())
    if len(us) > max_points:
        idx = np.linspace(0, len(us) - 1, max_points).round().astype(int)
        us, vs = us[idx], vs[idx]
    d = depth.values[vs, us]
    cam = np.column_stack([(us - K1.cx) * d / K1.fx, (vs - K1.cy) * d / K1.fy, d])
    return transform_point(rig.camera1_at(robot_x), cam)


# Raw depth format: uint32 LE width, uint32 LE height, then width*height
# float32 LE values in row-major order. NaN marks invalid pixels.
_RAW_HEADER = struct.Struct("<II")


def save_depth(path, depth: DepthImage) -> None:
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        from PIL import Image

        Image.fromarray(depth.values.astype(np.float32)).save(path)
        return
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(depth.width, depth.height))
        fh.write(depth.values.astype("<f4").tobytes())


def load_depth(path) -> DepthImage:
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        from PIL import Image

        with Image.open(path) as img:
            if img.mode != "F":
                raise ValueError(f"{path}: expected a 32-bit float image, got mode {img.mode}")
            return DepthImage(np.asarray(img, dtype=float))
    raw = path.read_bytes()
    if len(raw) < _RAW_HEADER.size:
        raise ValueError(f"{path}: truncated depth header")
    w, h = _RAW_HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f4", offset=_RAW_HEADER.size)
    if body.size != w * h:
        raise ValueError(f"{path}: expected {w * h} depth values, found {body.size}")
    return DepthImage(body.reshape(h, w).astype(float))
