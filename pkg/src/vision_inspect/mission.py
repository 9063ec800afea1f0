"""Waypoint mission controller.

The controller is a pure transition function over an immutable
:class:`MissionState`. :func:`run_mission` drives it against a scene handle
(the simulated robot) and a VLM backend, feeding it one completion event
at a time. Time is simulated: every event carries its duration.

Transition graph::

    AtWaypoint --frame_captured--> Proposing
    Proposing  --proposals_received | proposal_failed--> Planning
    Planning   --plans_ready--> VisitingRoi
    VisitingRoi --visit_done--> VisitingRoi      (consumes one pending visit)
    VisitingRoi --visits_exhausted--> Assessing  (only when nothing is pending)
    Assessing  --assessed--> Advancing
    Advancing  --advanced--> AtWaypoint | Done
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

import numpy as np

from . import vlm_client
from .cylinder_fit import RansacConfig, fit_circle_ransac
from .errors import IllegalEvent, VisionError
from .geometry import DEFAULT_INTRINSICS, CameraIntrinsics, GimbalState, RigConfig
from .roi_fusion import DepthImage, EnrichedRoi, RoiProposal, enrich, local_point_cloud
from .viewplan import CostWeights, GridSpec, Unplannable, ViewpointSolution, plan_viewpoints
from .vlm_client import AssessmentRecord, ProposalRequest

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class Phase(str, Enum):
    AT_WAYPOINT = "AtWaypoint"
    PROPOSING = "Proposing"
    PLANNING = "Planning"
    VISITING_ROI = "VisitingRoi"
    ASSESSING = "Assessing"
    ADVANCING = "Advancing"
    DONE = "Done"


class EventKind(str, Enum):
    FRAME_CAPTURED = "frame_captured"
    PROPOSALS_RECEIVED = "proposals_received"
    PROPOSAL_FAILED = "proposal_failed"
    PLANS_READY = "plans_ready"
    VISIT_DONE = "visit_done"
    VISITS_EXHAUSTED = "visits_exhausted"
    ASSESSED = "assessed"
    ADVANCED = "advanced"


_AWAITS = {
    Phase.AT_WAYPOINT: {EventKind.FRAME_CAPTURED},
    Phase.PROPOSING: {EventKind.PROPOSALS_RECEIVED, EventKind.PROPOSAL_FAILED},
    Phase.PLANNING: {EventKind.PLANS_READY},
    Phase.VISITING_ROI: {EventKind.VISIT_DONE, EventKind.VISITS_EXHAUSTED},
    Phase.ASSESSING: {EventKind.ASSESSED},
    Phase.ADVANCING: {EventKind.ADVANCED},
    Phase.DONE: set(),
}


@dataclass(frozen=True)
class TimingModel:
    """Simulated phase durations in seconds.

    A visit costs ``visit_motion`` plus the mission's ``settle_time``.
    Assessment runs offline after the mission and defaults to zero.
    """

    propose: float = 60.0
    plan_batch: float = 20.0
    visit_motion: float = 10.0
    assess_per_roi: float = 0.0
    advance_speed: float = 0.5


@dataclass(frozen=True)
class MissionConfig:
    culvert_length: float = 66.0
    waypoint_spacing: float = 5.0
    settle_time: float = 5.0
    rig: RigConfig = field(default_factory=RigConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    grid: GridSpec = field(default_factory=GridSpec)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    K1: CameraIntrinsics = DEFAULT_INTRINSICS
    K2: CameraIntrinsics = DEFAULT_INTRINSICS
    timing: TimingModel = field(default_factory=TimingModel)
    reverse_allowance: float = 1.0
    max_waypoints: int | None = None
    prompt_profile: str = "default"
    max_rois: int = 4

    def __post_init__(self):
        if not self.culvert_length >= 0:
            raise ValueError("culvert_length must be nonnegative")
        if not self.waypoint_spacing > 0:
            raise ValueError("waypoint_spacing must be positive")
        if not self.settle_time >= 0:
            raise ValueError("settle_time must be nonnegative")


@dataclass(frozen=True)
class Event:
    kind: EventKind
    payload: dict = field(default_factory=dict)
    duration: float = 0.0


@dataclass(frozen=True)
class InspectionRecord:
    waypoint_index: int
    waypoint_x: float
    proposal: RoiProposal
    roi: EnrichedRoi | None = None
    solution: ViewpointSolution | None = None
    closeup_ref: str | None = None
    assessment: AssessmentRecord | None = None
    failure: str | None = None

    @property
    def complete(self) -> bool:
        return self.failure is not None or self.assessment is not None

    def to_dict(self) -> dict:
        return {
            "waypoint_index": self.waypoint_index,
            "waypoint_x": self.waypoint_x,
            "proposal": self.proposal.to_dict(),
            "roi": self.roi.to_dict() if self.roi is not None else None,
            "solution": self.solution.to_dict() if self.solution is not None else None,
            "closeup_ref": self.closeup_ref,
            "assessment": self.assessment.to_dict() if self.assessment is not None else None,
            "failure": self.failure,
        }


@dataclass(frozen=True)
class Visit:
    proposal: RoiProposal
    roi: EnrichedRoi
    solution: ViewpointSolution

    def to_dict(self) -> dict:
        return {"proposal": self.proposal.to_dict(), "roi": self.roi.to_dict(), "solution": self.solution.to_dict()}


@dataclass(frozen=True)
class MissionState:
    waypoints: tuple[float, ...]
    phase: Phase = Phase.AT_WAYPOINT
    waypoint_index: int = 0
    clock: float = 0.0
    robot_x: float = 0.0
    image_ref: str | None = None
    planning_tasks: tuple[RoiProposal, ...] = ()
    pending_visits: tuple[Visit, ...] = ()
    records: tuple[InspectionRecord, ...] = ()
    audit: tuple[dict, ...] = ()
    phase_time: tuple[tuple[str, float], ...] = ()

    @property
    def waypoint_x(self) -> float:
        return self.waypoints[self.waypoint_index]

    def phase_seconds(self) -> dict:
        return dict(self.phase_time)


def schedule_waypoints(cfg: MissionConfig) -> list[float]:
    """``0, N, 2N, ...`` up to the last multiple not beyond the culvert length."""
    n = math.floor(cfg.culvert_length / cfg.waypoint_spacing + 1e-9)
    return [k * cfg.waypoint_spacing for k in range(n + 1)]


def initial_state(cfg: MissionConfig) -> MissionState:
    waypoints = schedule_waypoints(cfg)
    if cfg.max_waypoints is not None:
        waypoints = waypoints[: cfg.max_waypoints]
    if not waypoints:
        raise ValueError("mission has no waypoints")
    return MissionState(waypoints=tuple(waypoints), robot_x=waypoints[0])


def _jsonable(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if dataclasses.is_dataclass(obj):
        return _jsonable(dataclasses.asdict(obj))
    return obj


def payload_digest(payload: dict) -> str:
    text = json.dumps(_jsonable(payload), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _update_records(records, waypoint_index, assessments):
    out, k = [], 0
    for rec in records:
        if rec.waypoint_index == waypoint_index and rec.closeup_ref is not None and rec.failure is None:
            result = assessments[k] if k < len(assessments) else "assessment missing"
            k += 1
            if isinstance(result, AssessmentRecord):
                rec = dataclasses.replace(rec, assessment=result)
            else:
                rec = dataclasses.replace(rec, failure=f"assessment failed: {result}")
        out.append(rec)
    return tuple(out)


def step(state: MissionState, event: Event) -> MissionState:
    """Apply one completion event. Raises :class:`IllegalEvent` on a mismatch."""
    if event.kind not in _AWAITS[state.phase]:
        raise IllegalEvent(f"{event.kind.value} is not accepted in phase {state.phase.value}")
    p = event.payload
    new = {}
    wp, x = state.waypoint_index, state.waypoint_x

    if state.phase is Phase.AT_WAYPOINT:
        new.update(phase=Phase.PROPOSING, image_ref=p.get("image_ref"), robot_x=x)

    elif state.phase is Phase.PROPOSING:
        tasks = tuple(p.get("proposals", ())) if event.kind is EventKind.PROPOSALS_RECEIVED else ()
        new.update(phase=Phase.PLANNING, planning_tasks=tasks)

    elif state.phase is Phase.PLANNING:
        visits = tuple(p.get("visits", ()))
        keys = [v.solution.refined.x for v in visits]
        if keys != sorted(keys):
            raise IllegalEvent("pending visits must be sorted by ascending x")
        failed = tuple(
            InspectionRecord(wp, x, prop, roi=roi, failure=reason) for prop, roi, reason in p.get("failures", ())
        )
        new.update(phase=Phase.VISITING_ROI, pending_visits=visits, planning_tasks=(), records=state.records + failed)

    elif state.phase is Phase.VISITING_ROI:
        if event.kind is EventKind.VISIT_DONE:
            if not state.pending_visits:
                raise IllegalEvent("visit_done with no pending visits")
            head, rest = state.pending_visits[0], state.pending_visits[1:]
            rec = InspectionRecord(wp, x, head.proposal, head.roi, head.solution, closeup_ref=p["closeup_ref"])
            new.update(pending_visits=rest, records=state.records + (rec,), robot_x=head.solution.refined.x)
        else:
            if state.pending_visits:
                raise IllegalEvent("visits_exhausted while visits are still pending")
            new.update(phase=Phase.ASSESSING)

    elif state.phase is Phase.ASSESSING:
        new.update(phase=Phase.ADVANCING, records=_update_records(state.records, wp, p.get("assessments", ())))

    elif state.phase is Phase.ADVANCING:
        if wp + 1 < len(state.waypoints):
            new.update(phase=Phase.AT_WAYPOINT, waypoint_index=wp + 1, image_ref=None)
        else:
            new.update(phase=Phase.DONE)

    clock = state.clock + event.duration
    to_phase = new.get("phase", state.phase)
    entry = {
        "seq": len(state.audit),
        "t": clock,
        "waypoint_index": wp,
        "phase": state.phase.value,
        "event": event.kind.value,
        "to": to_phase.value,
        "digest": payload_digest(p),
    }
    times = dict(state.phase_time)
    times[state.phase.value] = times.get(state.phase.value, 0.0) + event.duration
    new.update(clock=clock, audit=state.audit + (entry,), phase_time=tuple(times.items()))
    return dataclasses.replace(state, **new)


class SceneHandle(Protocol):
    def capture_query(self, waypoint_index: int, x: float) -> tuple[str, DepthImage]: ...

    def capture_closeup(self, waypoint_index: int, visit_index: int, g: GimbalState) -> str: ...


@dataclass(frozen=True)
class MissionResult:
    state: MissionState
    models: tuple

    @property
    def records(self) -> tuple[InspectionRecord, ...]:
        return self.state.records

    @property
    def audit(self) -> tuple[dict, ...]:
        return self.state.audit

    def report(self, cfg: MissionConfig) -> dict:
        return build_report(cfg, self)


def waypoint_rig(cfg: MissionConfig, x: float) -> RigConfig:
    lo = max(x - cfg.reverse_allowance, 0.0, cfg.rig.x_bounds[0])
    hi = min(x + cfg.waypoint_spacing, cfg.culvert_length, cfg.rig.x_bounds[1])
    if hi < lo:
        hi = lo
    return dataclasses.replace(cfg.rig, x_bounds=(lo, hi))


def _plan_waypoint(cfg: MissionConfig, state: MissionState, depth: DepthImage):
    """Fit, fuse and plan every task of the current waypoint."""
    x = state.waypoint_x
    tasks = state.planning_tasks
    failures, model = [], None
    if not tasks:
        return [], failures, None
    try:
        cloud = local_point_cloud(depth, cfg.K1, cfg.rig, robot_x=x)
        model, _ = fit_circle_ransac(cloud, dataclasses.replace(cfg.ransac, seed=cfg.ransac.seed + state.waypoint_index))
    except VisionError as exc:
        return [], [(p, None, f"cylinder fit failed: {exc}") for p in tasks], None

    rois, owners = [], []
    for prop in tasks:
        try:
            rois.append(enrich(prop, depth, cfg.K1, cfg.rig, model, robot_x=x, image_ref=state.image_ref or ""))
            owners.append(prop)
        except VisionError as exc:
            failures.append((prop, None, f"{type(exc).__name__}: {exc}"))
    visits = []
    for res in plan_viewpoints(rois, waypoint_rig(cfg, x), cfg.K2, cfg.weights, cfg.grid) if rois else []:
        prop, roi = owners[res.roi_index], rois[res.roi_index]
        if isinstance(res, Unplannable):
            failures.append((prop, roi, f"unplannable: {res.reason}"))
        else:
            visits.append(Visit(prop, roi, res))
    return visits, failures, model


def run_mission(cfg: MissionConfig, scene: SceneHandle, vlm) -> MissionResult:
    """Drive the controller to Done.

    Backend and per-ROI failures are recorded and never stop the mission.
    """
    state = initial_state(cfg)
    depth = None
    models = []
    t = cfg.timing
    while state.phase is not Phase.DONE:
        wp = state.waypoint_index
        if state.phase is Phase.AT_WAYPOINT:
            ref, depth = scene.capture_query(wp, state.waypoint_x)
            ev = Event(EventKind.FRAME_CAPTURED, {"image_ref": ref, "x": state.waypoint_x})
        elif state.phase is Phase.PROPOSING:
            req = ProposalRequest(state.image_ref, cfg.prompt_profile, cfg.max_rois)
            try:
                resp = vlm_client.propose(req, vlm)
                ev = Event(
                    EventKind.PROPOSALS_RECEIVED,
                    {"proposals": list(resp.proposals), "warnings": list(resp.warnings)},
                    t.propose,
                )
            except Exception as exc:  # noqa: BLE001 - fault isolation per waypoint
                logger.warning("waypoint %d: proposal request failed: %s", wp, exc)
                ev = Event(EventKind.PROPOSAL_FAILED, {"error": f"{type(exc).__name__}: {exc}"}, t.propose)
        elif state.phase is Phase.PLANNING:
            visits, failures, model = _plan_waypoint(cfg, state, depth)
            models.append((wp, model))
            duration = t.plan_batch if state.planning_tasks else 0.0
            ev = Event(
                EventKind.PLANS_READY,
                {"visits": visits, "failures": failures, "model": model.to_dict() if model else None},
                duration,
            )
        elif state.phase is Phase.VISITING_ROI:
            if state.pending_visits:
                visit_index = sum(1 for r in state.records if r.waypoint_index == wp and r.closeup_ref)
                ref = scene.capture_closeup(wp, visit_index, state.pending_visits[0].solution.refined)
                ev = Event(EventKind.VISIT_DONE, {"closeup_ref": ref}, t.visit_motion + cfg.settle_time)
            else:
                ev = Event(EventKind.VISITS_EXHAUSTED)
        elif state.phase is Phase.ASSESSING:
            results = []
            for rec in state.records:
                if rec.waypoint_index != wp or rec.closeup_ref is None or rec.failure is not None:
                    continue
                try:
                    results.append(vlm_client.assess(rec.roi, [rec.closeup_ref], vlm))
                except Exception as exc:  # noqa: BLE001
                    logger.warning("waypoint %d: assessment failed: %s", wp, exc)
                    results.append(f"{type(exc).__name__}: {exc}")
            ev = Event(EventKind.ASSESSED, {"assessments": results}, t.assess_per_roi * len(results))
        else:  # ADVANCING
            if wp + 1 < len(state.waypoints):
                distance = abs(state.waypoints[wp + 1] - state.robot_x)
                ev = Event(EventKind.ADVANCED, {"to": state.waypoints[wp + 1]}, distance / t.advance_speed)
            else:
                ev = Event(EventKind.ADVANCED, {"to": None})
        state = step(state, ev)
    return MissionResult(state, tuple(models))


def build_report(cfg: MissionConfig, result: MissionResult) -> dict:
    state = result.state
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "mission_report",
        "waypoints": list(state.waypoints),
        "models": [{"waypoint_index": wp, "model": m.to_dict() if m else None} for wp, m in result.models],
        "records": [r.to_dict() for r in state.records],
        "timing": {
            "total_s": state.clock,
            "per_phase_s": state.phase_seconds(),
            "visits": sum(1 for r in state.records if r.closeup_ref),
        },
    }


def write_audit_log(path, audit) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in audit:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def report_digest(report: dict) -> str:
    return hashlib.sha256(json.dumps(report, sort_keys=True).encode("utf-8")).hexdigest()
