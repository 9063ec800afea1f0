"""Two-stage viewpoint optimizer for the gimbal camera.

Stage one scans a coarse (yaw, pitch, axial) grid for the minimum of the
observation cost J1. Stage two refines that seed with bounded L-BFGS-B on
J2, which is J1 plus quadratic penalties for deviating from the seed.

The cost kernel is written with explicit elementwise arithmetic and
fixed-order sums, so evaluating one pose gives bit-for-bit the value that
pose gets inside a large batch. Grid search relies on this for its exact
argmin contract.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .geometry import Z_MIN, CameraIntrinsics, GimbalState, RigConfig, camera2_to_ccf
from .roi_fusion import EnrichedRoi

logger = logging.getLogger(__name__)

BEHIND_PENALTY = 1e9
TERM_NAMES = ("cov", "ctr", "size", "obl", "range", "move", "trans")

FD_STEP = 1e-5
GTOL = 1e-6
MAX_ITER = 200


@dataclass(frozen=True)
class CostWeights:
    w_cov: float = 1.0
    w_ctr: float = 1e-4
    w_size: float = 1e-9
    w_obl: float = 10.0
    w_range: float = 5.0
    w_move: float = 1.0
    w_trans: float = 1.0
    alpha: float = 0.05
    f_target: float = 0.3
    d_star: float = 1.0
    delta_psi: float = math.radians(10.0)
    delta_phi: float = math.radians(10.0)
    delta_x: float = 0.5
    softplus_beta: float = 0.05

    def __post_init__(self):
        for name in ("w_cov", "w_ctr", "w_size", "w_obl", "w_range", "w_move", "w_trans"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0 < self.f_target < 1:
            raise ValueError("f_target must lie in (0, 1)")
        if not (self.d_star > 0 and self.delta_psi > 0 and self.delta_phi > 0 and self.delta_x > 0):
            raise ValueError("d_star and the deviation tolerances must be positive")
        if not self.softplus_beta > 0:
            raise ValueError("softplus_beta must be positive")


@dataclass(frozen=True)
class GridSpec:
    psi_steps: int = 25
    phi_steps: int = 10
    x_steps: int = 21

    def __post_init__(self):
        if min(self.psi_steps, self.phi_steps, self.x_steps) < 1:
            raise ValueError("grid step counts must be >= 1")

    @property
    def cells(self) -> int:
        return self.psi_steps * self.phi_steps * self.x_steps


@dataclass(frozen=True, eq=False)
class ViewpointSolution:
    seed: GimbalState
    refined: GimbalState
    cost_seed: float
    cost_refined: float
    terms: dict
    terms_seed: dict
    iterations: int
    projected_vertices: np.ndarray
    roi_index: int = 0

    def to_dict(self) -> dict:
        def pose(g: GimbalState) -> dict:
            return {
                "psi_rad": g.psi,
                "phi_rad": g.phi,
                "x_m": g.x,
                "psi_deg": math.degrees(g.psi),
                "phi_deg": math.degrees(g.phi),
            }

        return {
            "status": "planned",
            "roi_index": self.roi_index,
            "seed": pose(self.seed),
            "refined": pose(self.refined),
            "cost_seed": self.cost_seed,
            "cost_refined": self.cost_refined,
            "terms_seed": dict(self.terms_seed),
            "terms": dict(self.terms),
            "iterations": self.iterations,
            "projected_vertices": np.asarray(self.projected_vertices).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ViewpointSolution:
        def pose(p: dict) -> GimbalState:
            return GimbalState(p["psi_rad"], p["phi_rad"], p["x_m"])

        return cls(
            seed=pose(d["seed"]),
            refined=pose(d["refined"]),
            cost_seed=d["cost_seed"],
            cost_refined=d["cost_refined"],
            terms=dict(d["terms"]),
            terms_seed=dict(d["terms_seed"]),
            iterations=d["iterations"],
            projected_vertices=np.asarray(d["projected_vertices"], dtype=float),
            roi_index=d.get("roi_index", 0),
        )

    def __eq__(self, other):
        if not isinstance(other, ViewpointSolution):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass(frozen=True)
class Unplannable:
    roi_index: int
    reason: str

    def to_dict(self) -> dict:
        return {"status": "unplannable", "roi_index": self.roi_index, "reason": self.reason}


# --------------------------------------------------------------------------
# individual cost terms


def _ordered_sum(a: np.ndarray) -> np.ndarray:
    """Sum over the last axis strictly left to right."""
    total = a[..., 0]
    for i in range(1, a.shape[-1]):
        total = total + a[..., i]
    return total


def softplus(t, beta: float):
    """``(1/beta) * log(1 + exp(beta * t))`` without overflow."""
    return np.logaddexp(0.0, beta * np.asarray(t, dtype=float)) / beta


def cost_coverage(uv, K: CameraIntrinsics, alpha: float, softplus_beta: float):
    """Soft penalty for vertices outside the frame inset by ``alpha * min(W, H)``.

    ``uv`` has shape ``(..., M, 2)``; leading axes are evaluated independently.
    """
    uv = np.asarray(uv, dtype=float)
    m = alpha * min(K.width, K.height)
    u, v = uv[..., 0], uv[..., 1]
    per_vertex = (
        softplus(m - u, softplus_beta)
        + softplus(m - v, softplus_beta)
        + softplus(u - (K.width - m), softplus_beta)
        + softplus(v - (K.height - m), softplus_beta)
    )
    return _ordered_sum(per_vertex)


def cost_centering(uv, K: CameraIntrinsics):
    uv = np.asarray(uv, dtype=float)
    M = uv.shape[-2]
    ubar = _ordered_sum(uv[..., 0]) / M
    vbar = _ordered_sum(uv[..., 1]) / M
    du, dv = ubar - K.cx, vbar - K.cy
    return du * du + dv * dv


def cost_size(uv, K: CameraIntrinsics, f_target: float):
    uv = np.asarray(uv, dtype=float)
    u, v = uv[..., 0], uv[..., 1]
    area = (u.max(axis=-1) - u.min(axis=-1)) * (v.max(axis=-1) - v.min(axis=-1))
    r = area - f_target * K.width * K.height
    return r * r


def cost_obliquity(g: GimbalState, rig: RigConfig, normal_ccf) -> float:
    """``(1 - |z_cam . n|)^2`` with the optical axis taken from the pose chain."""
    z_cam = camera2_to_ccf(rig, g, check_limits=False).rotation[:, 2]
    return (1.0 - abs(float(z_cam @ np.asarray(normal_ccf, dtype=float)))) ** 2


def cost_range(g: GimbalState, rig: RigConfig, roi_center_ccf, d_star: float) -> float:
    center = camera2_to_ccf(rig, g, check_limits=False).translation
    return (float(np.linalg.norm(np.asarray(roi_center_ccf, dtype=float) - center)) - d_star) ** 2


# --------------------------------------------------------------------------
# batched kernel


def _pose_chain(q: np.ndarray, rig: RigConfig):
    """Rotation ``(N, 3, 3)`` and optical center ``(N, 3)`` of camera-2 in the CCF."""
    psi, phi, x = q[:, 0], q[:, 1], q[:, 2]
    cps, sps = np.cos(psi), np.sin(psi)
    cph, sph = np.cos(phi), np.sin(phi)
    zero = np.zeros_like(psi)
    # Rz(psi) @ Ry(phi), written out
    A = [
        [cps * cph, -sps, cps * sph],
        [sps * cph, cps, sps * sph],
        [-sph, zero, cph],
    ]
    Rg = rig.T_GC2.rotation
    tg = rig.T_GC2.translation
    R = np.empty((len(q), 3, 3))
    for i in range(3):
        for j in range(3):
            R[:, i, j] = A[i][0] * Rg[0, j] + A[i][1] * Rg[1, j] + A[i][2] * Rg[2, j]
    g0 = rig.gimbal_origin_in_ccf
    C = np.empty((len(q), 3))
    for i in range(3):
        C[:, i] = A[i][0] * tg[0] + A[i][1] * tg[1] + A[i][2] * tg[2]
    C[:, 0] = C[:, 0] + (g0[0] + x)
    C[:, 1] = C[:, 1] + g0[1]
    C[:, 2] = C[:, 2] + g0[2]
    return R, C


def evaluate_j1_batch(q, roi: EnrichedRoi, rig: RigConfig, K: CameraIntrinsics, weights: CostWeights):
    """J1 for every pose row in ``q`` (shape ``(N, 3)``: psi, phi, x).

    Returns ``(j1, terms, uv, n_behind)`` with per-pose arrays. Poses that
    put any vertex at or behind ``Z_MIN`` get ``BEHIND_PENALTY + n_behind``.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    R, C = _pose_chain(q, rig)
    verts = roi.vertices_ccf
    d = verts[None, :, :] - C[:, None, :]
    # p_cam = R^T (p - C); column k of R is camera axis k
    cam = [
        R[:, None, 0, k] * d[..., 0] + R[:, None, 1, k] * d[..., 1] + R[:, None, 2, k] * d[..., 2]
        for k in range(3)
    ]
    X, Y, Z = cam
    front = Z > Z_MIN
    n_behind = (~front).sum(axis=1)
    Zs = np.where(front, Z, 1.0)
    uv = np.stack([K.fx * X / Zs + K.cx, K.fy * Y / Zs + K.cy], axis=-1)

    w = weights
    L_cov = cost_coverage(uv, K, w.alpha, w.softplus_beta)
    L_ctr = cost_centering(uv, K)
    L_size = cost_size(uv, K, w.f_target)
    n = roi.normal_ccf
    dot = R[:, 0, 2] * n[0] + R[:, 1, 2] * n[1] + R[:, 2, 2] * n[2]
    L_obl = (1.0 - np.abs(dot)) ** 2
    rc = roi.center_ccf
    dx, dy, dz = rc[0] - C[:, 0], rc[1] - C[:, 1], rc[2] - C[:, 2]
    L_range = (np.sqrt(dx * dx + dy * dy + dz * dz) - w.d_star) ** 2

    j1 = w.w_cov * L_cov + w.w_ctr * L_ctr + w.w_size * L_size + w.w_obl * L_obl + w.w_range * L_range
    behind = n_behind > 0
    j1 = np.where(behind, BEHIND_PENALTY + n_behind, j1)
    j1 = np.where(np.isnan(j1), np.inf, j1)
    terms = {"cov": L_cov, "ctr": L_ctr, "size": L_size, "obl": L_obl, "range": L_range}
    return j1, terms, uv, n_behind


def _penalties(q: np.ndarray, seed: GimbalState, weights: CostWeights):
    a = (q[:, 0] - seed.psi) / weights.delta_psi
    b = (q[:, 1] - seed.phi) / weights.delta_phi
    c = (q[:, 2] - seed.x) / weights.delta_x
    return a * a + b * b, c * c


def evaluate_j2_batch(q, seed: GimbalState, roi, rig, K, weights: CostWeights):
    q = np.atleast_2d(np.asarray(q, dtype=float))
    j1, terms, uv, n_behind = evaluate_j1_batch(q, roi, rig, K, weights)
    L_move, L_trans = _penalties(q, seed, weights)
    j2 = j1 + weights.w_move * L_move + weights.w_trans * L_trans
    terms = dict(terms, move=L_move, trans=L_trans)
    return j2, terms, uv, n_behind


def _scalar_terms(terms: dict, i: int = 0) -> dict:
    return {k: float(np.asarray(v)[i]) for k, v in terms.items()}


def eval_j1(g: GimbalState, roi: EnrichedRoi, rig: RigConfig, K: CameraIntrinsics, weights: CostWeights):
    """J1 at one pose, with the unweighted term breakdown."""
    j1, terms, _, n_behind = evaluate_j1_batch(g.as_array(), roi, rig, K, weights)
    out = _scalar_terms(terms)
    out["behind"] = int(n_behind[0])
    return float(j1[0]), out


def eval_j2(g: GimbalState, seed: GimbalState, roi, rig, K, weights: CostWeights):
    j2, terms, _, n_behind = evaluate_j2_batch(g.as_array(), seed, roi, rig, K, weights)
    out = _scalar_terms(terms)
    out["behind"] = int(n_behind[0])
    return float(j2[0]), out


# --------------------------------------------------------------------------
# stage one


def grid_axis(lo: float, hi: float, n: int) -> np.ndarray:
    """Inclusive uniform samples of ``[lo, hi]``.

    Built as ``center + half * t`` with ``t_i = (2i - (n-1)) / (n-1)`` so a
    symmetric interval yields exactly antisymmetric samples (0 included
    for odd ``n``). A single sample sits at the interval center.
    """
    center = (lo + hi) / 2.0
    if n == 1:
        return np.array([center])
    half = (hi - lo) / 2.0
    i = np.arange(n, dtype=float)
    t = (2.0 * i - (n - 1)) / (n - 1)
    return np.clip(center + half * t, lo, hi)


def grid_axes(rig: RigConfig, grid: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        grid_axis(*rig.psi_bounds, grid.psi_steps),
        grid_axis(*rig.phi_bounds, grid.phi_steps),
        grid_axis(*rig.x_bounds, grid.x_steps),
    )


def grid_search(
    roi: EnrichedRoi,
    rig: RigConfig,
    K: CameraIntrinsics,
    weights: CostWeights,
    grid: GridSpec = GridSpec(),
    chunk: int = 65536,
) -> tuple[GimbalState, float]:
    """Exact argmin of J1 over the grid.

    Cells are enumerated x-major, then yaw, then pitch; the first minimum in
    that order wins ties.
    """
    psis, phis, xs = grid_axes(rig, grid)
    X, P, F = np.meshgrid(xs, psis, phis, indexing="ij")
    q = np.column_stack([P.ravel(), F.ravel(), X.ravel()])
    costs = np.empty(len(q))
    for start in range(0, len(q), chunk):
        costs[start : start + chunk] = evaluate_j1_batch(q[start : start + chunk], roi, rig, K, weights)[0]
    best = int(np.argmin(costs))
    return GimbalState.from_array(q[best]), float(costs[best])


# --------------------------------------------------------------------------
# stage two


def numerical_gradient(fun, q, step: float = FD_STEP) -> np.ndarray:
    """Central differences of a batched objective ``fun((N, 3)) -> (N,)``."""
    q = np.asarray(q, dtype=float)
    n = q.size
    stencil = np.repeat(q[None, :], 2 * n, axis=0)
    for i in range(n):
        stencil[2 * i, i] += step
        stencil[2 * i + 1, i] -= step
    f = fun(stencil)
    return (f[0::2] - f[1::2]) / (2.0 * step)


def refine(
    seed: GimbalState,
    roi: EnrichedRoi,
    rig: RigConfig,
    K: CameraIntrinsics,
    weights: CostWeights,
    roi_index: int = 0,
) -> ViewpointSolution:
    """Bounded quasi-Newton refinement of J2 from the grid seed.

    Never returns a pose worse than the seed under J2.
    """
    bounds = rig.bounds()

    def batch(qs):
        return evaluate_j2_batch(qs, seed, roi, rig, K, weights)[0]

    def fun(qv):
        return float(batch(qv[None, :])[0])

    def jac(qv):
        return numerical_gradient(batch, qv, FD_STEP)

    # step tolerance is expressed through ftol; L-BFGS-B has no direct step test
    q0 = np.clip(seed.as_array(), [b[0] for b in bounds], [b[1] for b in bounds])
    res = minimize(
        fun,
        q0,
        jac=jac,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": MAX_ITER, "gtol": GTOL, "ftol": 1e-15},
    )
    cost_seed, terms_seed = eval_j2(seed, seed, roi, rig, K, weights)
    refined = GimbalState.from_array(np.clip(res.x, [b[0] for b in bounds], [b[1] for b in bounds]))
    cost_refined, terms = eval_j2(refined, seed, roi, rig, K, weights)
    if not cost_refined <= cost_seed:
        refined, cost_refined, terms = seed, cost_seed, terms_seed
    uv = evaluate_j1_batch(refined.as_array(), roi, rig, K, weights)[2][0]
    return ViewpointSolution(
        seed=seed,
        refined=refined,
        cost_seed=cost_seed,
        cost_refined=cost_refined,
        terms=terms,
        terms_seed=terms_seed,
        iterations=int(res.nit),
        projected_vertices=uv,
        roi_index=roi_index,
    )


def plan_viewpoint(roi, rig, K, weights, grid: GridSpec = GridSpec(), roi_index: int = 0):
    """Grid search then refinement for one ROI; ``Unplannable`` on failure."""
    arrays = (roi.vertices_ccf, roi.center_ccf, roi.normal_ccf)
    if not all(np.all(np.isfinite(a)) for a in arrays):
        return Unplannable(roi_index, "ROI geometry is not finite")
    seed, cost = grid_search(roi, rig, K, weights, grid)
    if cost >= BEHIND_PENALTY:
        return Unplannable(roi_index, "no grid pose keeps every ROI vertex in front of the camera")
    return refine(seed, roi, rig, K, weights, roi_index=roi_index)


def plan_viewpoints(rois, rig: RigConfig, K: CameraIntrinsics, weights: CostWeights, grid: GridSpec = GridSpec()):
    """Plan every ROI independently.

    Returns solutions sorted by ascending refined x (ties by input index),
    followed by ``Unplannable`` entries in input order.
    """
    planned, failed = [], []
    for i, roi in enumerate(rois):
        try:
            result = plan_viewpoint(roi, rig, K, weights, grid, roi_index=i)
        except Exception as exc:  # noqa: BLE001 - one bad ROI must not sink the batch
            logger.warning("planning ROI %d failed: %s", i, exc)
            result = Unplannable(i, f"{type(exc).__name__}: {exc}")
        (failed if isinstance(result, Unplannable) else planned).append(result)
    planned.sort(key=lambda s: (s.refined.x, s.roi_index))
    return planned + failed
