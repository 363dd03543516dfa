"""Agent backends: remote VLM over HTTP, geometric oracle, record/replay.

Every backend implements one contract: ``complete(AgentRequest) -> str``.
Backends that want the live scene implement ``bind_state(scene, rig,
renders)``, which the loop calls before each query; the oracle uses it
as its ground-truth side channel, and the record wrapper forwards it.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BackendUnavailable, ProtocolViolation, ReplayMiss
from .geometry import (
    RigidPose,
    aabb_of_points,
    axis_length,
    relative_rotation_error,
    wrap_angle_deg,
)

__all__ = [
    "AgentRole",
    "AgentRequest",
    "OracleConfig",
    "OracleBackend",
    "HttpBackend",
    "RecordBackend",
    "ReplayBackend",
    "request_key",
    "TRANSCRIPT_VERSION",
]

TRANSCRIPT_VERSION = 1
ANGLE_SNAP_DEG = 15.0
OVERLAP_RATIO_LIMIT = 0.01
TRANSLATION_CLAMP = 3.0


class AgentRole(str, Enum):
    SELECTION = "selection"
    EVALUATOR = "evaluator"
    PROPOSER = "proposer"


@dataclass(frozen=True)
class AgentRequest:
    """One query to an agent: role, prompt text, encoded images, metadata."""

    role: AgentRole
    prompt: str
    images: tuple[str, ...] = ()  # base64 JPEG payloads
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        object.__setattr__(self, "role", AgentRole(self.role))
        object.__setattr__(self, "images", tuple(self.images))


def request_key(request: AgentRequest) -> str:
    """SHA-256 over role + prompt + per-image hashes; the replay lookup key."""
    h = hashlib.sha256()
    h.update(request.role.value.encode("utf-8"))
    h.update(b"\x00")
    h.update(request.prompt.encode("utf-8"))
    for image in request.images:
        h.update(b"\x00")
        h.update(hashlib.sha256(image.encode("ascii")).digest())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Geometric oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleConfig:
    """Ground truth for the oracle: goal pose plus tolerances.

    ``goal_pose.translation`` is the goal position of the target's AABB
    *center* (the same point the judge scores); ``goal_pose.rotation``
    is the goal world rotation. ``noise_prob`` corrupts proposals with a
    per-request seeded RNG, used by the max-iteration sweep.
    """

    goal_pose: RigidPose
    position_tol: float = 0.05
    rotation_tol_deg: float = 15.0
    noise_prob: float = 0.0
    seed: int = 0
    target_id: str | None = None
    related_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.position_tol <= 0 or self.rotation_tol_deg <= 0:
            raise ValueError("tolerances must be > 0")
        if not 0.0 <= self.noise_prob < 1.0:
            raise ValueError("noise_prob must be in [0, 1)")
        object.__setattr__(self, "related_ids", tuple(self.related_ids))


class OracleBackend:
    """Deterministic geometric stand-in for the VLM.

    Reads the true scene through ``bind_state`` instead of the images
    (the images are still produced and logged so replay fixtures stay
    representative). Evaluator: within-tolerance pose and no AABB
    interpenetration. Proposer: greedy single-axis step toward the goal
    with the angle snapped to 15-degree multiples.
    """

    def __init__(self, config: OracleConfig):
        self.config = config
        self._scene = None
        self._rig = None
        self._renders = None

    def bind_state(self, scene, rig=None, renders=None):
        self._scene = scene
        self._rig = rig
        self._renders = renders

    # -- helpers ------------------------------------------------------------

    def _rng(self, request: AgentRequest) -> np.random.Generator:
        meta = request.metadata
        tag = f"{self.config.seed}|{meta.get('task', '')}|{meta.get('iteration', 0)}|{request.role.value}"
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "big"))

    def _current_state(self):
        scene = self._scene
        if scene is None:
            raise BackendUnavailable("oracle has no bound scene state")
        target = scene.target
        box = target.aabb()
        return scene, target, box.center, scene.target_pose.rotation, box

    def _axis_unit_length(self, scene) -> float:
        canonical = scene.target_canonical_vertices
        if canonical is None:
            canonical = scene.target.vertices
        return axis_length(aabb_of_points(canonical).extents)

    def _interpenetration(self, scene, target, box):
        target_volume = box.volume
        if target_volume <= 0.0:
            return None
        for other in scene.objects:
            if other.id == target.id:
                continue
            ratio = box.overlap_volume(other.aabb()) / target_volume
            if ratio > OVERLAP_RATIO_LIMIT:
                return other.id, ratio
        return None

    def _best_view(self, target_id: str) -> int:
        if not self._renders:
            return 1
        counts = [out.mask_pixel_count(target_id) for out in self._renders]
        return int(np.argmax(counts)) + 1

    # -- role behaviors -----------------------------------------------------

    def _selection(self, request: AgentRequest) -> str:
        scene = self._scene
        stage = request.metadata.get("stage", "view")
        if stage == "view":
            if self._renders:
                totals = [int((out.object_id >= 0).sum()) for out in self._renders]
                best = int(np.argmax(totals)) + 1
            else:
                best = 1
            return json.dumps(
                {"best_view": best, "rationale": "view with the most visible object pixels"}
            )
        target_id = self.config.target_id
        related = list(self.config.related_ids)
        if target_id is None:
            if scene is not None and len(scene.objects) == 1:
                target_id, related = scene.objects[0].id, []
            else:
                raise BackendUnavailable(
                    "oracle selection needs ground-truth roles for multi-object scenes"
                )
        return json.dumps(
            {
                "target": target_id,
                "related": related,
                "rationale": "configured ground-truth object roles",
            }
        )

    def _evaluate(self, request: AgentRequest) -> str:
        scene, target, center, rotation, box = self._current_state()
        cfg = self.config
        pos_err = float(np.linalg.norm(center - cfg.goal_pose.translation))
        rot_err = relative_rotation_error(rotation, cfg.goal_pose.rotation)
        overlap = self._interpenetration(scene, target, box)
        faithful = (
            pos_err <= cfg.position_tol
            and rot_err <= cfg.rotation_tol_deg
            and overlap is None
        )
        if faithful:
            rationale = (
                f"position error {pos_err:.4f} m and rotation error {rot_err:.2f} deg "
                "are within tolerance; no interpenetration"
            )
        elif overlap is not None:
            rationale = (
                f"target interpenetrates '{overlap[0]}' "
                f"(AABB overlap ratio {overlap[1]:.3f})"
            )
        else:
            rationale = (
                f"position error {pos_err:.4f} m (tol {cfg.position_tol}) or rotation "
                f"error {rot_err:.2f} deg (tol {cfg.rotation_tol_deg}) too large"
            )
        return json.dumps(
            {
                "faithful": bool(faithful),
                "best_view": self._best_view(target.id),
                "rationale": rationale,
            }
        )

    def _propose(self, request: AgentRequest) -> str:
        scene, target, center, rotation, box = self._current_state()
        cfg = self.config
        unit = self._axis_unit_length(scene)

        rel = cfg.goal_pose.rotation @ rotation.T
        rotvec_deg = np.degrees(Rotation.from_matrix(rel).as_rotvec())
        axis_idx = int(np.argmax(np.abs(rotvec_deg)))
        angle = float(
            np.clip(round(rotvec_deg[axis_idx] / ANGLE_SNAP_DEG) * ANGLE_SNAP_DEG,
                    -180.0, 180.0)
        )
        t_hat = np.clip(
            (cfg.goal_pose.translation - center) / unit,
            -TRANSLATION_CLAMP, TRANSLATION_CLAMP,
        )

        rng = self._rng(request)
        noise_note = ""
        if cfg.noise_prob > 0 and rng.random() < cfg.noise_prob:
            if rng.random() < 0.5:
                angle = wrap_angle_deg(angle + float(rng.choice([-45.0, 45.0])))
                noise_note = " (coarse angular estimate)"
            else:
                bump_axis = int(rng.integers(3))
                t_hat = t_hat.copy()
                t_hat[bump_axis] += float(rng.choice([-1.0, 1.0]))
                t_hat = np.clip(t_hat, -TRANSLATION_CLAMP, TRANSLATION_CLAMP)
                noise_note = " (coarse translation estimate)"

        axis_name = "xyz"[axis_idx]
        rationale = (
            f"move {t_hat.round(4).tolist()} axis units and rotate {angle:g} deg "
            f"about {axis_name} to approach the goal{noise_note}"
        )
        if request.metadata.get("mode") == "euler":
            euler = [0.0, 0.0, 0.0]
            euler[axis_idx] = angle
            return json.dumps(
                {
                    "translation": t_hat.tolist(),
                    "euler_xyz_deg": euler,
                    "rationale": rationale,
                }
            )
        return json.dumps(
            {
                "translation": t_hat.tolist(),
                "rotation_axis": axis_name,
                "rotation_angle_deg": angle,
                "rationale": rationale,
            }
        )

    def complete(self, request: AgentRequest) -> str:
        if request.role is AgentRole.SELECTION:
            return self._selection(request)
        if request.role is AgentRole.EVALUATOR:
            return self._evaluate(request)
        return self._propose(request)


# ---------------------------------------------------------------------------
# OpenAI-compatible HTTP backend
# ---------------------------------------------------------------------------

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class HttpBackend:
    """Chat-completions client with exponential backoff.

    Sends the prompt as user text and the images as base64 data-URL
    parts. Retries 429/5xx with backoff base 1 s, factor 2, at most 5
    tries; per-request timeout 120 s. ``post`` and ``sleep`` are
    injectable for tests.
    """

    def __init__(self, endpoint: str, model: str, api_key_env: str = "POSELOOP_API_KEY",
                 temperature: float = 0.0, max_tokens: int = 1024,
                 timeout: float = 120.0, max_tries: int = 5,
                 backoff_base: float = 1.0, backoff_factor: float = 2.0,
                 post=None, sleep=None):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.max_tries = max_tries
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        if post is None:
            import requests

            post = requests.post
        self._post = post
        self._sleep = sleep or time.sleep

    def _payload(self, request: AgentRequest) -> dict:
        content = [{"type": "text", "text": request.prompt}]
        for image in request.images:
            content.append(
                {
                    "type": "image_url",
                    "image_url": {"url": f"data:image/jpeg;base64,{image}"},
                }
            )
        return {
            "model": self.model,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [{"role": "user", "content": content}],
        }

    def complete(self, request: AgentRequest) -> str:
        import os

        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = self._payload(request)
        delay = self.backoff_base
        last_error = None
        for attempt in range(self.max_tries):
            if attempt:
                self._sleep(delay)
                delay *= self.backoff_factor
            try:
                response = self._post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
            except Exception as exc:  # connection-level failure: retryable
                last_error = exc
                continue
            if response.status_code in RETRYABLE_STATUS:
                last_error = RuntimeError(f"HTTP {response.status_code}")
                continue
            if response.status_code != 200:
                raise BackendUnavailable(
                    f"backend returned HTTP {response.status_code}: {response.text[:200]}"
                )
            try:
                body = response.json()
                return body["choices"][0]["message"]["content"]
            except Exception as exc:
                raise ProtocolViolation(
                    f"malformed chat-completions body: {exc}",
                    raw_text=getattr(response, "text", "")[:2000],
                ) from exc
        raise BackendUnavailable(
            f"exhausted {self.max_tries} tries against {self.endpoint}: {last_error}"
        )


# ---------------------------------------------------------------------------
# Record / replay
# ---------------------------------------------------------------------------

class RecordBackend:
    """Wraps another backend and appends every exchange to a JSONL transcript."""

    def __init__(self, inner, path):
        self.inner = inner
        self.path = Path(path)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            header = {"poseloop_transcript": TRANSCRIPT_VERSION}
            self.path.write_text(json.dumps(header) + "\n")

    def bind_state(self, scene, rig=None, renders=None):
        bind = getattr(self.inner, "bind_state", None)
        if bind is not None:
            bind(scene, rig, renders)

    def complete(self, request: AgentRequest) -> str:
        response = self.inner.complete(request)
        entry = {
            "key": request_key(request),
            "role": request.role.value,
            "metadata": request.metadata,
            "prompt": request.prompt,
            "image_hashes": [
                hashlib.sha256(img.encode("ascii")).hexdigest() for img in request.images
            ],
            "image_count": len(request.images),
            "response": response,
        }
        with self._lock:
            with self.path.open("a") as fh:
                fh.write(json.dumps(entry) + "\n")
        return response


def read_transcript(path) -> list[dict]:
    """All transcript entries (header excluded)."""
    entries = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "poseloop_transcript" in record:
                continue
            entries.append(record)
    return entries


class ReplayBackend:
    """Serves recorded responses by request key; never touches the network."""

    def __init__(self, path):
        self.path = Path(path)
        self._responses: dict[str, str] = {}
        for entry in read_transcript(self.path):
            self._responses[entry["key"]] = entry["response"]

    def complete(self, request: AgentRequest) -> str:
        key = request_key(request)
        try:
            return self._responses[key]
        except KeyError:
            raise ReplayMiss(key) from None
