"""Prompt construction, reply parsing and backends for the vision-language model.

Every backend implements ``complete(key, messages) -> str`` and returns the
raw HTTP response body of an OpenAI-compatible chat-completions call.
``key`` is the small dict that identifies a request for replay purposes;
``messages`` is the chat message list. Image content parts are written as
``{"type": "image_ref", "ref": ...}`` and only the live backend turns them
into inline base64 payloads.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import random
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol

from .errors import (
    BackendFailure,
    FixtureMiss,
    InvalidAssessment,
    NoParsableJson,
    UnknownLabel,
    UnknownProfile,
    VlmError,
)
from .roi_fusion import RoiProposal

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "VISION_VLM_ENDPOINT"
KEY_ENV = "VISION_VLM_KEY"
MODEL_ENV = "VISION_VLM_MODEL"

ASSESSMENT_PROFILE = "assessment"
PROPOSAL_PROFILES = {
    "default": "proposal_default_v1.txt",
    "calibrated": "proposal_calibrated_v1.txt",
}
_ASSESSMENT_ASSET = "assessment_v1.txt"

MAX_DESCRIPTION = 280
CONFIDENCE_SUM_TOL = 0.01


class AssessmentResult(str, Enum):
    CONFIRMED = "Confirmed"
    PARTIALLY_CONFIRMED = "Partially Confirmed"
    NOT_CONFIRMED = "Not Confirmed"


_LABELS = {re.sub(r"[^a-z]", "", r.value.lower()): r for r in AssessmentResult}


@dataclass(frozen=True)
class ProposalRequest:
    image_ref: str
    prompt_profile: str = "default"
    max_rois: int = 4

    def __post_init__(self):
        if self.max_rois < 1:
            raise ValueError("max_rois must be >= 1")

    def key(self) -> dict:
        return {"profile": self.prompt_profile, "image_ref": self.image_ref, "max_rois": self.max_rois}


@dataclass(frozen=True)
class ProposalResponse:
    proposals: tuple[RoiProposal, ...]
    raw: str
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "proposals", tuple(self.proposals))
        object.__setattr__(self, "warnings", tuple(self.warnings))


@dataclass(frozen=True)
class AssessmentRecord:
    original_reason: str
    result: AssessmentResult
    description: str | None = None

    def __post_init__(self):
        result = AssessmentResult(self.result)
        object.__setattr__(self, "result", result)
        has = bool(self.description)
        if has != (result is not AssessmentResult.NOT_CONFIRMED):
            raise InvalidAssessment(f"description must be present iff result is not {AssessmentResult.NOT_CONFIRMED.value}")
        if has and len(self.description) > MAX_DESCRIPTION:
            raise InvalidAssessment(f"description longer than {MAX_DESCRIPTION} characters")

    def to_dict(self) -> dict:
        d = {"original_rationale": self.original_reason, "result": self.result.value}
        if self.description:
            d["description"] = self.description
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AssessmentRecord:
        return cls(d["original_rationale"], AssessmentResult(d["result"]), d.get("description"))


class VlmBackend(Protocol):
    def complete(self, key: dict, messages: list) -> str: ...


# --------------------------------------------------------------------------
# prompts


def _load_asset(name: str) -> tuple[str, str]:
    text = resources.files(__package__).joinpath("prompts", name).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    body = "\n".join(lines)
    _, _, rest = body.partition("[system]\n")
    system, _, user = rest.partition("[user]\n")
    return system.strip(), user.strip()


def _image_part(ref: str) -> dict:
    return {"type": "image_ref", "ref": ref}


def build_proposal_prompt(profile: str = "default", max_rois: int = 4, image_ref: str | None = None) -> list[dict]:
    if profile not in PROPOSAL_PROFILES:
        raise UnknownProfile(f"no proposal profile named {profile!r}; have {sorted(PROPOSAL_PROFILES)}")
    if max_rois < 1:
        raise ValueError("max_rois must be >= 1")
    system, user = _load_asset(PROPOSAL_PROFILES[profile])
    content = [{"type": "text", "text": user.format(max_rois=max_rois)}]
    if image_ref is not None:
        content.append(_image_part(image_ref))
    return [{"role": "system", "content": system}, {"role": "user", "content": content}]


def build_assessment_prompt(reason: str, closeup_refs, image_ref: str | None = None) -> list[dict]:
    system, user = _load_asset(_ASSESSMENT_ASSET)
    content = [{"type": "text", "text": user.format(reason=reason)}]
    if image_ref:
        content.append(_image_part(image_ref))
    content.extend(_image_part(r) for r in closeup_refs)
    return [{"role": "system", "content": system}, {"role": "user", "content": content}]


def request_digest(key: dict) -> str:
    """Stable digest of a request key, independent of field order."""
    canonical = json.dumps(key, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# reply parsing


def make_response_body(content: str) -> str:
    """Minimal chat-completions response body wrapping ``content``."""
    return json.dumps(
        {"object": "chat.completion", "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}
    )


def extract_content(body: str) -> str:
    try:
        data = json.loads(body)
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise NoParsableJson(f"response body is not a chat completion: {exc}") from exc
    if isinstance(content, list):  # content-part form
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise NoParsableJson("chat completion content is not text")
    return content


def _json_values(text: str, opener: str):
    decoder = json.JSONDecoder()
    for m in re.finditer(re.escape(opener), text):
        try:
            value, _ = decoder.raw_decode(text, m.start())
        except ValueError:
            continue
        yield value


def _first_array(text: str) -> list:
    for value in _json_values(text, "["):
        # a bare box like [0.1, 0.2, ...] in prose is not the proposal list
        if isinstance(value, list) and (not value or any(isinstance(v, dict) for v in value)):
            return value
    raise NoParsableJson("no JSON array of proposals found in model output")


def _number(v) -> float | None:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _entry_to_proposal(i: int, entry) -> tuple[RoiProposal | None, str | None]:
    if not isinstance(entry, dict):
        return None, f"entry {i}: expected an object, got {type(entry).__name__}"
    box = entry.get("box", entry.get("bbox"))
    if not isinstance(box, list) or len(box) != 4:
        return None, f"entry {i}: box must be a list of 4 numbers"
    nums = [_number(b) for b in box]
    if any(n is None for n in nums):
        return None, f"entry {i}: box has non-numeric components"
    conf = _number(entry.get("confidence"))
    if conf is None:
        return None, f"entry {i}: missing or non-numeric confidence"
    reason = entry.get("reason", "")
    if not isinstance(reason, str):
        return None, f"entry {i}: reason must be text"
    try:
        return RoiProposal(tuple(nums), reason, conf), None
    except ValueError as exc:
        return None, f"entry {i}: {exc}"


def parse_proposals(raw_model_text: str, calibrated: bool = False) -> ProposalResponse:
    """Parse model text into proposals, dropping (and reporting) bad entries.

    The first JSON array of objects anywhere in the text is used, so code
    fences and prose around it are tolerated.
    """
    if not isinstance(raw_model_text, str):
        raise NoParsableJson("model output is not text")
    entries = _first_array(raw_model_text)
    proposals, warnings = [], []
    for i, entry in enumerate(entries):
        p, warn = _entry_to_proposal(i, entry)
        if p is None:
            warnings.append(warn)
        else:
            proposals.append(p)
    if calibrated and proposals:
        total = sum(p.confidence for p in proposals)
        if abs(total - 1.0) > CONFIDENCE_SUM_TOL:
            warnings.append(f"calibrated confidences sum to {total:.3f}, not 1.00")
    for w in warnings:
        logger.warning("proposal parse: %s", w)
    return ProposalResponse(tuple(proposals), raw_model_text, tuple(warnings))


def serialize_proposals(response: ProposalResponse) -> str:
    return json.dumps([p.to_dict() for p in response.proposals])


def canonical_label(label) -> AssessmentResult:
    if not isinstance(label, str):
        raise UnknownLabel(f"result label must be text, got {label!r}")
    key = re.sub(r"[^a-z]", "", label.lower())
    if key not in _LABELS:
        raise UnknownLabel(f"unknown result label {label!r}")
    return _LABELS[key]


def _one_line(text: str) -> str:
    line = " ".join(str(text).split())
    if len(line) > MAX_DESCRIPTION:
        line = line[: MAX_DESCRIPTION - 3].rstrip() + "..."
    return line


def parse_assessment(raw_model_text: str, original_reason: str = "") -> AssessmentRecord:
    """Parse the first JSON object carrying a ``result`` field.

    Descriptions are collapsed to one line and cut to 280 characters. A
    description sent with a Not Confirmed verdict is discarded.
    """
    if not isinstance(raw_model_text, str):
        raise NoParsableJson("model output is not text")
    record = next((v for v in _json_values(raw_model_text, "{") if isinstance(v, dict) and "result" in v), None)
    if record is None:
        raise NoParsableJson("no JSON assessment object found in model output")
    result = canonical_label(record["result"])
    reason = record.get("original_rationale", record.get("original_reason")) or original_reason
    description = record.get("description")
    if result is AssessmentResult.NOT_CONFIRMED:
        description = None
    else:
        description = _one_line(description) if isinstance(description, str) else ""
        if not description:
            raise InvalidAssessment(f"{result.value} verdict without a description")
    return AssessmentRecord(str(reason), result, description)


# --------------------------------------------------------------------------
# high-level calls


def propose(request: ProposalRequest, backend: VlmBackend) -> ProposalResponse:
    messages = build_proposal_prompt(request.prompt_profile, request.max_rois, request.image_ref)
    content = extract_content(backend.complete(request.key(), messages))
    response = parse_proposals(content, calibrated=request.prompt_profile == "calibrated")
    if len(response.proposals) > request.max_rois:
        extra = f"{len(response.proposals) - request.max_rois} proposals beyond max_rois={request.max_rois} dropped"
        response = ProposalResponse(response.proposals[: request.max_rois], response.raw, response.warnings + (extra,))
    return response


def assessment_key(reason: str, closeup_refs, image_ref: str = "") -> dict:
    return {
        "profile": ASSESSMENT_PROFILE,
        "image_ref": image_ref,
        "closeup_refs": list(closeup_refs),
        "reason": reason,
    }


def assess(original, closeup_refs, backend: VlmBackend) -> AssessmentRecord:
    """Ask the model whether the close-ups support ``original``'s hypothesis.

    ``original`` is an :class:`~vision_inspect.roi_fusion.EnrichedRoi` (or
    anything with ``proposal.reason`` and ``image_ref``).
    """
    closeup_refs = list(closeup_refs)
    if not closeup_refs:
        raise ValueError("assessment needs at least one close-up")
    reason = original.proposal.reason
    image_ref = getattr(original, "image_ref", "") or ""
    messages = build_assessment_prompt(reason, closeup_refs, image_ref or None)
    content = extract_content(backend.complete(assessment_key(reason, closeup_refs, image_ref), messages))
    return parse_assessment(content, reason)


# --------------------------------------------------------------------------
# backends


class ReplayBackend:
    """Read-only fixture store: ``<fixture_dir>/<digest>.json`` holds a response body."""

    def __init__(self, fixture_dir):
        self.fixture_dir = Path(fixture_dir)
        if not self.fixture_dir.is_dir():
            raise FixtureMiss(f"fixture directory {self.fixture_dir} does not exist")
        self._bodies = {p.stem: p.read_text(encoding="utf-8") for p in sorted(self.fixture_dir.glob("*.json"))}

    def complete(self, key: dict, messages: list) -> str:
        digest = request_digest(key)
        try:
            return self._bodies[digest]
        except KeyError:
            raise FixtureMiss(f"no fixture for request {key} (digest {digest})") from None


def replay_backend(fixture_dir) -> ReplayBackend:
    return ReplayBackend(fixture_dir)


def write_fixture(fixture_dir, key: dict, body: str) -> Path:
    fixture_dir = Path(fixture_dir)
    fixture_dir.mkdir(parents=True, exist_ok=True)
    path = fixture_dir / f"{request_digest(key)}.json"
    path.write_text(body, encoding="utf-8")
    return path


class RecordingBackend:
    """Pass-through that writes every response it sees as a replay fixture."""

    def __init__(self, inner: VlmBackend, fixture_dir):
        self.inner = inner
        self.fixture_dir = Path(fixture_dir)

    def complete(self, key: dict, messages: list) -> str:
        body = self.inner.complete(key, messages)
        write_fixture(self.fixture_dir, key, body)
        return body


def _default_image_loader(ref: str) -> tuple[bytes, str]:
    path = Path(ref)
    mime = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg"}.get(path.suffix.lower(), "application/octet-stream")
    return path.read_bytes(), mime


@dataclass
class LiveBackend:
    """HTTP chat-completions client. Configuration falls back to the environment."""

    endpoint: str | None = None
    api_key: str | None = None
    model: str | None = None
    timeout: float = 60.0
    retries: int = 1
    image_loader: Callable[[str], tuple[bytes, str]] = _default_image_loader
    transport: object = None
    _rng: random.Random = field(default_factory=lambda: random.Random(0), repr=False)

    def __post_init__(self):
        self.endpoint = self.endpoint or os.environ.get(ENDPOINT_ENV)
        self.api_key = self.api_key or os.environ.get(KEY_ENV)
        self.model = self.model or os.environ.get(MODEL_ENV)
        if not self.endpoint:
            raise VlmError(f"live backend needs an endpoint (set {ENDPOINT_ENV})")
        if not self.model:
            raise VlmError(f"live backend needs a model name (set {MODEL_ENV})")

    def _inline_images(self, messages: list) -> list:
        out = []
        for msg in messages:
            content = msg["content"]
            if isinstance(content, list):
                parts = []
                for part in content:
                    if part.get("type") == "image_ref":
                        data, mime = self.image_loader(part["ref"])
                        url = f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"
                        parts.append({"type": "image_url", "image_url": {"url": url}})
                    else:
                        parts.append(part)
                content = parts
            out.append({"role": msg["role"], "content": content})
        return out

    def complete(self, key: dict, messages: list) -> str:
        import httpx

        body = {"model": self.model, "messages": self._inline_images(messages)}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last = None
        with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
            for attempt in range(self.retries + 1):
                if attempt:
                    time.sleep(self._rng.uniform(0.5, 1.5))
                try:
                    resp = client.post(self.endpoint, json=body, headers=headers)
                except httpx.TransportError as exc:
                    last = exc
                    continue
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = BackendFailure(f"HTTP {resp.status_code} from {self.endpoint}")
                    continue
                if resp.status_code >= 400:
                    raise BackendFailure(f"HTTP {resp.status_code} from {self.endpoint}: {resp.text[:200]}")
                return resp.text
        raise BackendFailure(f"VLM request failed after {self.retries + 1} attempts: {last}")
