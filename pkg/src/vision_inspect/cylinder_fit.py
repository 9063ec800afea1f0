"""RANSAC circle fit of the culvert cross-section and radial clipping onto it.

The cylinder axis is the CCF +x axis by construction, so the fit reduces to
a circle in the y-z plane.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import CenterCoincident, DegenerateInput, NoConsensus, OffSurface

logger = logging.getLogger(__name__)

RADIUS_BOUNDS = (0.3, 5.0)


@dataclass(frozen=True)
class CulvertModel:
    radius: float
    center_yz: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "center_yz", (float(self.center_yz[0]), float(self.center_yz[1])))
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")

    @property
    def plausible(self) -> bool:
        lo, hi = RADIUS_BOUNDS
        return lo <= self.radius <= hi

    def to_dict(self) -> dict:
        return {"radius": self.radius, "center_yz": list(self.center_yz)}

    @classmethod
    def from_dict(cls, d: dict) -> CulvertModel:
        return cls(radius=d["radius"], center_yz=tuple(d.get("center_yz", (0.0, 0.0))))


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 500
    inlier_threshold: float = 0.02
    min_inlier_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0 < self.min_inlier_fraction <= 1:
            raise ValueError("min_inlier_fraction must be in (0, 1]")


def circle_from_three(a, b, c) -> tuple[np.ndarray, float] | None:
    """Circumscribed circle of three 2D points, or None when collinear."""
    (ax, ay), (bx, by), (cx, cy) = a, b, c
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    scale = max(abs(ax - bx), abs(ay - by), abs(ax - cx), abs(ay - cy), 1e-300)
    if abs(d) <= 1e-12 * scale * scale:
        return None
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    center = np.array([ux, uy])
    return center, float(np.hypot(ax - ux, ay - uy))


def kasa_fit(yz: np.ndarray) -> tuple[np.ndarray, float]:
    """Algebraic least-squares circle: solve ``y^2+z^2 = 2a y + 2b z + c``."""
    yz = np.asarray(yz, dtype=float)
    # Centering the data keeps the normal equations well conditioned.
    mean = yz.mean(axis=0)
    q = yz - mean
    A = np.column_stack([2.0 * q[:, 0], 2.0 * q[:, 1], np.ones(len(q))])
    rhs = (q**2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    a, b, c = sol
    r2 = c + a * a + b * b
    if not r2 > 0:
        raise DegenerateInput("least-squares circle has non-positive radius")
    return np.array([a, b]) + mean, float(np.sqrt(r2))


def fit_circle_ransac(points_ccf, cfg: RansacConfig = RansacConfig()) -> tuple[CulvertModel, np.ndarray]:
    """Fit the culvert cross-section to a point cloud.

    Parameters
    ----------
    points_ccf : array_like, shape (N, 3)
        Points in the CCF. Only the y and z columns are used.
    cfg : RansacConfig
        Iteration count, inlier band and seed.

    Returns
    -------
    model : CulvertModel
        Kasa refit on the best consensus set.
    inliers : ndarray of bool, shape (N,)
        Inlier mask relative to the refit model.
    """
    pts = np.asarray(points_ccf, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DegenerateInput(f"expected an (N, 3) array, got shape {pts.shape}")
    if len(pts) < 3:
        raise DegenerateInput(f"need at least 3 points, got {len(pts)}")
    if not np.all(np.isfinite(pts)):
        raise DegenerateInput("points must be finite")
    yz = pts[:, 1:3]
    n = len(yz)
    rng = np.random.default_rng(cfg.seed)
    lo, hi = RADIUS_BOUNDS

    best_count = -1
    best_mask = None
    for _ in range(cfg.iterations):
        i, j, k = rng.choice(n, size=3, replace=False)
        circle = circle_from_three(yz[i], yz[j], yz[k])
        if circle is None:
            continue
        center, r = circle
        if not lo <= r <= hi:
            continue
        resid = np.abs(np.hypot(yz[:, 0] - center[0], yz[:, 1] - center[1]) - r)
        mask = resid <= cfg.inlier_threshold
        count = int(mask.sum())
        # strict '>' keeps the earliest iteration on ties
        if count > best_count:
            best_count, best_mask = count, mask

    if best_mask is None:
        raise DegenerateInput("every RANSAC sample was collinear or implausible")
    if best_count / n < cfg.min_inlier_fraction:
        raise NoConsensus(
            f"best consensus {best_count}/{n} below min_inlier_fraction {cfg.min_inlier_fraction}"
        )

    center, r = kasa_fit(yz[best_mask])
    model = CulvertModel(radius=r, center_yz=(center[0], center[1]))
    if not model.plausible:
        raise NoConsensus(f"refit radius {r:.3f} m outside plausible bounds {RADIUS_BOUNDS}")
    resid = np.abs(np.hypot(yz[:, 0] - center[0], yz[:, 1] - center[1]) - r)
    inliers = resid <= cfg.inlier_threshold
    logger.debug("circle fit r=%.4f center=%s inliers=%d/%d", r, center, inliers.sum(), n)
    return model, inliers


def radial_offsets(points_ccf, model: CulvertModel) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points_ccf, dtype=float))
    return pts[:, 1:3] - np.asarray(model.center_yz)


def clip_to_cylinder(points_ccf, model: CulvertModel) -> np.ndarray:
    """Push each point along its radial ray onto the cylinder surface; x is kept."""
    pts = np.asarray(points_ccf, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    d = radial_offsets(pts, model)
    rho = np.hypot(d[:, 0], d[:, 1])
    if np.any(rho <= 1e-12):
        raise CenterCoincident("point lies on the cylinder axis; radial direction undefined")
    out = pts.copy()
    out[:, 1:3] = np.asarray(model.center_yz) + d * (model.radius / rho)[:, None]
    return out[0] if single else out


def surface_normal(point_on_cylinder, model: CulvertModel, tol: float = 1e-6) -> np.ndarray:
    """Inward unit normal (toward the axis) at a surface point."""
    p = np.asarray(point_on_cylinder, dtype=float).reshape(3)
    d = p[1:3] - np.asarray(model.center_yz)
    rho = float(np.hypot(d[0], d[1]))
    if abs(rho - model.radius) > tol:
        raise OffSurface(f"point is {rho - model.radius:+.3e} m off the surface")
    n_yz = -d / rho
    return np.array([0.0, n_yz[0], n_yz[1]])


def subsample_uniform(points, max_points: int = 5000) -> np.ndarray:
    """Deterministic evenly spaced subsample."""
    points = np.asarray(points)
    if len(points) <= max_points:
        return points
    idx = np.linspace(0, len(points) - 1, max_points).round().astype(int)
    return points[idx]


def load_point_cloud(path, fmt: str = "txt") -> np.ndarray:
    """Read ``x y z`` triples: ``txt`` is whitespace-delimited, ``bin`` is float32 LE."""
    if fmt == "bin":
        data = np.fromfile(path, dtype="<f4")
        if data.size % 3:
            raise ValueError(f"{path}: float count {data.size} is not a multiple of 3")
        return data.reshape(-1, 3).astype(float)
    if fmt == "txt":
        return np.loadtxt(path, dtype=float, ndmin=2).reshape(-1, 3)
    raise ValueError(f"unknown point cloud format {fmt!r}")


def save_point_cloud(path, points, fmt: str = "txt") -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if fmt == "bin":
        points.astype("<f4").tofile(path)
    elif fmt == "txt":
        np.savetxt(path, points, fmt="%.9g")
    else:
        raise ValueError(f"unknown point cloud format {fmt!r}")
