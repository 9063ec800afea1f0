from __future__ import annotations

import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vision_inspect.geometry import DEFAULT_INTRINSICS, RigConfig  # noqa: E402
from vision_inspect.roi_fusion import EnrichedRoi, PixelRect, RoiProposal  # noqa: E402
from vision_inspect.simulator import Defect, SceneConfig  # noqa: E402

RADIUS = 0.6


def surface(angle: float, x: float, radius: float = RADIUS) -> np.ndarray:
    return np.array([x, radius * math.cos(angle), radius * math.sin(angle)])


def synthetic_roi(angle: float, x: float, half_angle: float = 0.12, half_len: float = 0.1,
                  depth_len: float = 0.05, radius: float = RADIUS) -> EnrichedRoi:
    """ROI patch on a centered cylinder built directly from polar coordinates."""
    verts = []
    for layer in (0.0, depth_len):
        for da, dx in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            verts.append(surface(angle + da * half_angle, x + dx * (half_len + layer), radius))
    center = surface(angle, x, radius)
    normal = -np.array([0.0, math.cos(angle), math.sin(angle)])
    return EnrichedRoi(
        proposal=RoiProposal((0.4, 0.4, 0.6, 0.6), "synthetic patch", 0.5),
        box_px=PixelRect(256, 192, 384, 288),
        depth_median=1.0,
        depth_min=0.9,
        depth_max=1.1,
        valid_fraction=1.0,
        vertices_ccf=np.array(verts),
        center_ccf=center,
        normal_ccf=normal,
    )


def random_roi(rng: np.random.Generator, x_lo: float = 1.2, x_hi: float = 3.5) -> EnrichedRoi:
    angle = math.radians(rng.uniform(-150.0, -30.0))
    return synthetic_roi(
        angle,
        float(rng.uniform(x_lo, x_hi)),
        half_angle=float(rng.uniform(0.05, 0.15)),
        half_len=float(rng.uniform(0.05, 0.15)),
        depth_len=float(rng.uniform(0.0, 0.08)),
    )


@pytest.fixture
def rig() -> RigConfig:
    return RigConfig(x_bounds=(0.0, 5.0))


@pytest.fixture
def K():
    return DEFAULT_INTRINSICS


@pytest.fixture
def demo_scene() -> SceneConfig:
    defects = [
        Defect(math.radians(a), x, 0.2, label)
        for a, x, label in [
            (-90, 2.5, "crack"), (-60, 3.5, "spalling"), (-120, 4.5, "joint offset"),
            (-90, 7.0, "crack"), (-45, 8.0, "corrosion"), (-135, 9.0, "deposit"),
            (-90, 12.0, "crack"), (-70, 13.0, "joint gap"), (-110, 14.0, "scaling"),
        ]
    ]
    return SceneConfig(defects=tuple(defects), depth_noise_sigma=0.005, invalid_fraction=0.2)


def noisy_circle_cloud(rng: np.random.Generator, n: int = 1000, radius: float = RADIUS, sigma: float = 0.005,
                       outlier_fraction: float = 0.2, center=(0.0, 0.0)) -> np.ndarray:
    """Circle samples with Gaussian radial noise plus uniform outliers in the bounding square."""
    n_out = int(round(n * outlier_fraction))
    n_in = n - n_out
    a = rng.uniform(0.0, 2 * math.pi, n_in)
    r = radius + rng.normal(0.0, sigma, n_in)
    inl = np.column_stack([rng.uniform(0, 3, n_in), center[0] + r * np.cos(a), center[1] + r * np.sin(a)])
    span = 1.5 * radius
    out = np.column_stack([
        rng.uniform(0, 3, n_out),
        center[0] + rng.uniform(-span, span, n_out),
        center[1] + rng.uniform(-span, span, n_out),
    ])
    pts = np.vstack([inl, out])
    return pts[rng.permutation(n)]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
