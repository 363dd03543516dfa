"""The closed loop: object selection, evaluator, proposer, memory, termination.

One iteration renders the scene from a fresh multi-view rig, asks the
evaluator whether the instruction holds, and either stops or asks the
proposer for an incremental pose update that is applied to the target.
The context memory of all prior verdicts, proposals, and rationales is
fed back into both roles' prompts.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .backends import AgentRequest, AgentRole
from .camera import CameraIntrinsics, frame_aabb, scene_overview_rig
from .errors import ParseFailure, ProtocolViolation, UnknownObjectId
from .geometry import (
    Aabb,
    EulerUpdate,
    PoseUpdate,
    RigidPose,
    aabb_of_points,
    axis_length,
    apply_update,
    wrap_angle_deg,
)
from .render import AxesOverlaySpec, annotate_objects, encode_jpeg_base64, overlay_axes, render, write_png
from .scene import SceneState, assign_roles

logger = logging.getLogger(__name__)

__all__ = [
    "EvaluatorAxesMode",
    "LoopConfig",
    "EvaluatorVerdict",
    "PoseProposal",
    "IterationRecord",
    "ContextMemory",
    "Termination",
    "LoopResult",
    "select_objects",
    "run_evaluator",
    "run_proposer",
    "run_loop",
    "serialize_memory",
    "parse_evaluator_response",
    "parse_proposer_response",
]

_PROMPT_DIR = Path(__file__).resolve().parent / "prompts"
_DIRECTIONAL = re.compile(r"\b(left|right|front|back|behind)\b", re.IGNORECASE)
_AXIS_SEMANTICS = (
    "Axis semantics: +x points front, +y points right, +z points up; the axes "
    "are object-centered (origin at the center of the target's bounding box) "
    "but share the world axis directions. Treat one drawn axis length as one "
    "unit of translation."
)
MEMORY_HEADER = "## Context memory"
EMPTY_MEMORY_SENTINEL = "(no prior iterations)"
RATIONALE_LIMIT = 400


class EvaluatorAxesMode(str, Enum):
    NEVER = "never"
    AUTO = "auto"
    ALWAYS = "always"


class Termination(str, Enum):
    FAITHFUL = "faithful"
    MAX_ITERATIONS = "max_iterations"


@dataclass(frozen=True)
class LoopConfig:
    """Loop knobs: views, iteration cap, ablation switches, rig parameters."""

    k_views: int = 4
    max_iterations: int = 5
    single_view: bool = False
    no_coord_vis: bool = False
    euler_rotation: bool = False
    no_memory: bool = False
    evaluator_axes: EvaluatorAxesMode = EvaluatorAxesMode.AUTO
    elevation_deg: float = 30.0
    margin: float = 0.9
    image_width: int = 640
    image_height: int = 480
    point_radius: int = 2
    translation_clamp: float = 3.0
    position_tol: float | None = None       # forwarded to oracle construction
    rotation_tol_deg: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "evaluator_axes", EvaluatorAxesMode(self.evaluator_axes))
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.k_views < 1:
            raise ValueError("k_views must be >= 1")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.default_for(self.image_width, self.image_height)


@dataclass(frozen=True)
class EvaluatorVerdict:
    faithful: bool
    supporting_view: int
    rationale: str


@dataclass(frozen=True)
class PoseProposal:
    update: PoseUpdate | EulerUpdate
    rationale: str


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    verdict: EvaluatorVerdict
    proposal: PoseProposal | None
    pose_after: RigidPose

    def __post_init__(self):
        if (self.proposal is None) != self.verdict.faithful:
            raise ValueError("proposal must be present exactly when the verdict is unfaithful")


@dataclass(frozen=True)
class ContextMemory:
    records: tuple[IterationRecord, ...] = ()

    def __post_init__(self):
        for position, record in enumerate(self.records, start=1):
            if record.iteration != position:
                raise ValueError("record iterations must increase strictly from 1")

    def with_record(self, record: IterationRecord) -> "ContextMemory":
        return ContextMemory(records=self.records + (record,))

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class LoopResult:
    final_scene: SceneState
    memory: ContextMemory
    terminated_by: Termination
    target_id: str
    related_ids: tuple[str, ...]
    artifact_paths: tuple[tuple[str, ...], ...] = ()

    @property
    def iterations_used(self) -> int:
        return len(self.memory)


# ---------------------------------------------------------------------------
# Prompt plumbing
# ---------------------------------------------------------------------------

def _template(name: str) -> str:
    return (_PROMPT_DIR / f"{name}.txt").read_text()


def _fill(template: str, mapping: dict[str, str]) -> str:
    # Plain replacement; templates contain literal JSON braces.
    text = template
    for key, value in mapping.items():
        text = text.replace("{" + key + "}", str(value))
    return text


def _truncate(rationale: str) -> str:
    if len(rationale) <= RATIONALE_LIMIT:
        return rationale
    return rationale[:RATIONALE_LIMIT] + "..."


def _describe_update(update: PoseUpdate | EulerUpdate) -> str:
    t = np.round(update.translation_units, 4).tolist()
    if isinstance(update, EulerUpdate):
        angles = np.round(update.angles_deg, 2).tolist()
        return f"translate {t} axis units, rotate euler {angles} deg (x-y-z order)"
    return (
        f"translate {t} axis units, rotate {update.angle_deg:g} deg about "
        f"{update.axis.value}"
    )


def serialize_memory(memory: ContextMemory) -> str:
    """Deterministic human-readable memory block (without its header)."""
    if not memory.records:
        return EMPTY_MEMORY_SENTINEL
    lines = []
    for record in memory.records:
        verdict = record.verdict
        lines.append(f"Iteration {record.iteration}:")
        lines.append(
            f"  evaluator: faithful={'yes' if verdict.faithful else 'no'}, "
            f"supporting view {verdict.supporting_view}, "
            f"reason: {_truncate(verdict.rationale)}"
        )
        if record.proposal is not None:
            lines.append(
                f"  proposer: {_describe_update(record.proposal.update)}, "
                f"reason: {_truncate(record.proposal.rationale)}"
            )
    return "\n".join(lines)


def _memory_block(memory: ContextMemory, config: LoopConfig) -> str:
    if config.no_memory:
        return ""
    return f"{MEMORY_HEADER}\n{serialize_memory(memory)}"


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------

def _extract_json(text: str) -> dict:
    decoder = json.JSONDecoder()
    for start, char in enumerate(text):
        if char != "{":
            continue
        try:
            obj, _ = decoder.raw_decode(text[start:])
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise ParseFailure("no JSON object found in response", raw_text=text)


def _require_number(payload: dict, key: str, raw: str) -> float:
    value = payload.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseFailure(f"field '{key}' must be a number", raw_text=raw)
    value = float(value)
    if not math.isfinite(value):
        raise ParseFailure(f"field '{key}' must be finite", raw_text=raw)
    return value


def _require_vec3(payload: dict, key: str, raw: str) -> np.ndarray:
    value = payload.get(key)
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ParseFailure(f"field '{key}' must be a list of 3 numbers", raw_text=raw)
    out = []
    for component in value:
        if isinstance(component, bool) or not isinstance(component, (int, float)):
            raise ParseFailure(f"field '{key}' must contain numbers", raw_text=raw)
        if not math.isfinite(float(component)):
            raise ParseFailure(f"field '{key}' must be finite", raw_text=raw)
        out.append(float(component))
    return np.asarray(out)


def _require_str(payload: dict, key: str, raw: str) -> str:
    value = payload.get(key)
    if not isinstance(value, str):
        raise ParseFailure(f"field '{key}' must be a string", raw_text=raw)
    return value


def parse_evaluator_response(text: str) -> EvaluatorVerdict:
    """Parse ``{"faithful", "best_view", "rationale"}`` from arbitrary text."""
    payload = _extract_json(text)
    faithful = payload.get("faithful")
    if not isinstance(faithful, bool):
        raise ParseFailure("field 'faithful' must be a boolean", raw_text=text)
    best_view = payload.get("best_view")
    if isinstance(best_view, bool) or not isinstance(best_view, int):
        raise ParseFailure("field 'best_view' must be an integer", raw_text=text)
    rationale = _require_str(payload, "rationale", text)
    return EvaluatorVerdict(faithful=faithful, supporting_view=best_view, rationale=rationale)


def parse_proposer_response(text: str, mode: str = "single_axis"):
    """Parse a proposer reply; returns raw (translation, rotation, rationale).

    ``mode`` selects the schema: ``single_axis`` expects ``rotation_axis``
    + ``rotation_angle_deg``; ``euler`` expects ``euler_xyz_deg``. Range
    handling (wrapping/clamping) happens at the caller, which knows the
    configured limits; enum and type violations fail here.
    """
    payload = _extract_json(text)
    translation = _require_vec3(payload, "translation", text)
    rationale = _require_str(payload, "rationale", text)
    if mode == "euler":
        angles = _require_vec3(payload, "euler_xyz_deg", text)
        return translation, angles, rationale
    axis = payload.get("rotation_axis")
    if not isinstance(axis, str) or axis.lower() not in ("x", "y", "z"):
        raise ParseFailure("field 'rotation_axis' must be one of x|y|z", raw_text=text)
    angle = _require_number(payload, "rotation_angle_deg", text)
    return translation, (axis.lower(), angle), rationale


def parse_selection_view_response(text: str) -> int:
    payload = _extract_json(text)
    best_view = payload.get("best_view")
    if isinstance(best_view, bool) or not isinstance(best_view, int):
        raise ParseFailure("field 'best_view' must be an integer", raw_text=text)
    return best_view


def parse_selection_objects_response(text: str) -> tuple[str, list[str]]:
    payload = _extract_json(text)
    target = _require_str(payload, "target", text)
    related = payload.get("related")
    if not isinstance(related, list) or not all(isinstance(r, str) for r in related):
        raise ParseFailure("field 'related' must be a list of strings", raw_text=text)
    return target, related


# ---------------------------------------------------------------------------
# Backend conversation helpers
# ---------------------------------------------------------------------------

def _bind(backend, scene, rig=None, renders=None):
    hook = getattr(backend, "bind_state", None)
    if hook is not None:
        hook(scene, rig, renders)


def _ask(backend, request: AgentRequest, parser, memory: ContextMemory | None = None):
    """One query with a single repair reprompt on parse failure."""
    response = backend.complete(request)
    try:
        return parser(response)
    except ParseFailure as first:
        repair_prompt = (
            f"{request.prompt}\n\nYour previous reply could not be parsed "
            f"({first.reason}). Reply again with exactly one JSON object matching "
            "the schema above and nothing else."
        )
        repair = AgentRequest(
            role=request.role,
            prompt=repair_prompt,
            images=request.images,
            metadata={**request.metadata, "repair": True},
        )
        retry = backend.complete(repair)
        try:
            return parser(retry)
        except ParseFailure as second:
            raise ProtocolViolation(
                f"unparseable {request.role.value} response after repair reprompt: "
                f"{second.reason}",
                raw_text=second.raw_text,
                memory=memory,
            ) from second


def _clamp_view(view: int, k: int) -> int:
    if 1 <= view <= k:
        return view
    clamped = min(max(view, 1), k)
    logger.warning("supporting view %d out of 1..%d, clamped to %d", view, k, clamped)
    return clamped


def _encode_views(images) -> tuple[str, ...]:
    return tuple(encode_jpeg_base64(img) for img in images)


def _axes_wanted(instruction: str, config: LoopConfig) -> bool:
    if config.evaluator_axes is EvaluatorAxesMode.ALWAYS:
        return True
    if config.evaluator_axes is EvaluatorAxesMode.NEVER:
        return False
    return bool(_DIRECTIONAL.search(instruction))


# ---------------------------------------------------------------------------
# Loop stages
# ---------------------------------------------------------------------------

def select_objects(scene: SceneState, instruction: str, backend,
                   config: LoopConfig | None = None, task_id: str = "") -> tuple[str, list[str]]:
    """Two-query object selection: pick the clearest view, then name roles."""
    config = config or LoopConfig()
    if not any(obj.label for obj in scene.objects):
        raise ValueError("scene objects need labels for selection")
    intrinsics = config.intrinsics()
    rig = scene_overview_rig(scene, intrinsics, config.k_views,
                             config.elevation_deg, config.margin)
    renders = [render(scene, cam, config.point_radius) for cam in rig.cameras]
    _bind(backend, scene, rig, renders)

    view_prompt = _fill(_template("selection_view"), {"view_count": len(rig)})
    view_request = AgentRequest(
        role=AgentRole.SELECTION,
        prompt=view_prompt,
        images=_encode_views(out.rgb for out in renders),
        metadata={"task": task_id, "iteration": 0, "stage": "view"},
    )
    best_view = _clamp_view(_ask(backend, view_request, parse_selection_view_response), len(rig))

    annotated = annotate_objects(renders[best_view - 1], scene.labels)
    object_ids = ", ".join(scene.ids)
    objects_prompt = _fill(
        _template("selection_objects"),
        {"instruction": instruction, "object_ids": object_ids},
    )
    objects_request = AgentRequest(
        role=AgentRole.SELECTION,
        prompt=objects_prompt,
        images=(encode_jpeg_base64(annotated),),
        metadata={"task": task_id, "iteration": 0, "stage": "objects"},
    )
    target, related = _ask(backend, objects_request, parse_selection_objects_response)

    known = set(scene.ids)
    names = [target, *related]
    if any(name not in known for name in names) or target in related:
        reprompt = AgentRequest(
            role=AgentRole.SELECTION,
            prompt=(
                f"{objects_prompt}\n\nYour previous answer used ids that do not "
                f"exist in the scene (or repeated the target in 'related'). "
                f"The only valid ids are: {object_ids}. Answer again."
            ),
            images=objects_request.images,
            metadata={**objects_request.metadata, "repair": True},
        )
        target, related = _ask(backend, reprompt, parse_selection_objects_response)
        if any(name not in known for name in [target, *related]):
            raise UnknownObjectId(
                f"selection returned unknown object ids twice: target={target!r}, "
                f"related={related!r}"
            )
    return target, related


def run_evaluator(scene: SceneState, rig, instruction: str, memory: ContextMemory,
                  config: LoopConfig, backend, axis_len: float | None = None,
                  task_id: str = "", iteration: int = 1,
                  renders=None) -> EvaluatorVerdict:
    """Render the rig views (1 under the single-view ablation) and judge them."""
    cameras = rig.cameras[:1] if config.single_view else rig.cameras
    if renders is None:
        renders = [render(scene, cam, config.point_radius) for cam in cameras]
    else:
        renders = list(renders)[:len(cameras)]
    _bind(backend, scene, rig, renders)

    with_axes = _axes_wanted(instruction, config) and axis_len is not None
    if with_axes:
        box = scene.target_aabb()
        spec = AxesOverlaySpec(origin=box.center, length=axis_len)
        images = [overlay_axes(out, cam, spec, box) for out, cam in zip(renders, cameras)]
    else:
        images = [out.rgb for out in renders]

    axis_note = _AXIS_SEMANTICS if with_axes else ""
    prompt = _fill(
        _template("evaluator"),
        {
            "instruction": instruction,
            "view_count": len(cameras),
            "axis_semantics": axis_note,
            "memory": _memory_block(memory, config),
        },
    )
    request = AgentRequest(
        role=AgentRole.EVALUATOR,
        prompt=prompt,
        images=_encode_views(images),
        metadata={"task": task_id, "iteration": iteration},
    )
    verdict = _ask(backend, request, parse_evaluator_response, memory)
    return EvaluatorVerdict(
        faithful=verdict.faithful,
        supporting_view=_clamp_view(verdict.supporting_view, len(cameras)),
        rationale=verdict.rationale,
    )


def run_proposer(scene: SceneState, rig, verdict: EvaluatorVerdict, instruction: str,
                 memory: ContextMemory, config: LoopConfig, backend,
                 axis_len: float, task_id: str = "", iteration: int = 1,
                 renders=None) -> PoseProposal:
    """Ask for an update using the supporting view with the axes drawn on it."""
    if verdict.faithful:
        raise ValueError("proposer must not run on a faithful verdict")
    view_index = 0 if config.single_view else verdict.supporting_view - 1
    camera = rig.cameras[view_index]
    if renders is not None and view_index < len(renders):
        out = renders[view_index]
    else:
        out = render(scene, camera, config.point_radius)
    _bind(backend, scene, rig, [out])

    box = scene.target_aabb()
    if config.no_coord_vis:
        image = out.rgb
        coordinate_note = (
            "No coordinate axes are drawn on the image; rely on the textual "
            "axis description below."
        )
    else:
        spec = AxesOverlaySpec(origin=box.center, length=axis_len)
        image = overlay_axes(out, camera, spec, box)
        coordinate_note = (
            "The target object's coordinate axes are drawn on the image "
            "(+x red, +y green, +z blue)."
        )

    mode = "euler" if config.euler_rotation else "single_axis"
    prompt = _fill(
        _template("proposer_euler" if config.euler_rotation else "proposer"),
        {
            "instruction": instruction,
            "coordinate_note": coordinate_note,
            "axis_semantics": _AXIS_SEMANTICS,
            "memory": _memory_block(memory, config),
        },
    )
    request = AgentRequest(
        role=AgentRole.PROPOSER,
        prompt=prompt,
        images=(encode_jpeg_base64(image),),
        metadata={"task": task_id, "iteration": iteration, "mode": mode},
    )
    translation, rotation_part, rationale = _ask(
        backend, request, lambda text: parse_proposer_response(text, mode), memory
    )

    clamp = config.translation_clamp
    clamped = np.clip(translation, -clamp, clamp)
    if not np.array_equal(clamped, translation):
        logger.warning("translation %s clamped to +-%g axis units", translation.tolist(), clamp)
    if config.euler_rotation:
        wrapped = np.array([wrap_angle_deg(a) for a in rotation_part])
        if not np.array_equal(wrapped, rotation_part):
            logger.warning("euler angles %s wrapped into [-180, 180]", rotation_part.tolist())
        update = EulerUpdate(translation_units=clamped, angles_deg=wrapped)
    else:
        axis, angle = rotation_part
        wrapped = wrap_angle_deg(angle)
        if wrapped != angle:
            logger.warning("rotation angle %g wrapped to %g deg", angle, wrapped)
        update = PoseUpdate(translation_units=clamped, axis=axis, angle_deg=wrapped)
    return PoseProposal(update=update, rationale=rationale)


def _save_iteration_artifacts(artifact_dir, iteration, renders, proposal_image=None):
    folder = Path(artifact_dir) / f"iter_{iteration:02d}"
    folder.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, out in enumerate(renders, start=1):
        path = folder / f"view_{index}.png"
        write_png(out.rgb, path)
        paths.append(str(path))
    if proposal_image is not None:
        path = folder / "proposer_view.png"
        write_png(proposal_image, path)
        paths.append(str(path))
    return tuple(paths)


def run_loop(scene: SceneState, instruction: str, backend,
             config: LoopConfig | None = None, task_id: str = "",
             artifact_dir=None) -> LoopResult:
    """Select objects once, then evaluate/propose/update until faithful or capped.

    The drawn axis length is computed once from the target's canonical
    box and stays fixed; the axes' origin tracks the target every
    iteration. Backend and protocol errors propagate with the
    memory-so-far attached for postmortem.
    """
    config = config or LoopConfig()
    if not instruction or not instruction.strip():
        raise ValueError("instruction must be non-empty")

    if not scene.roles_assigned:
        target_id, related_ids = select_objects(scene, instruction, backend, config, task_id)
        scene = assign_roles(scene, target_id, related_ids)
    target_id = scene.target.id
    related_ids = tuple(obj.id for obj in scene.related)

    axis_len = axis_length(aabb_of_points(scene.target_canonical_vertices).extents)
    intrinsics = config.intrinsics()
    memory = ContextMemory()
    artifact_paths: list[tuple[str, ...]] = []
    terminated = Termination.MAX_ITERATIONS

    for iteration in range(1, config.max_iterations + 1):
        rig = frame_aabb(scene.focus_aabb(), intrinsics, config.k_views,
                         config.elevation_deg, config.margin)
        cameras = rig.cameras[:1] if config.single_view else rig.cameras
        renders = [render(scene, cam, config.point_radius) for cam in cameras]

        verdict = run_evaluator(scene, rig, instruction, memory, config, backend,
                                axis_len, task_id, iteration, renders=renders)
        if verdict.faithful:
            memory = memory.with_record(
                IterationRecord(iteration, verdict, None, scene.target_pose)
            )
            if artifact_dir is not None:
                artifact_paths.append(
                    _save_iteration_artifacts(artifact_dir, iteration, renders)
                )
            terminated = Termination.FAITHFUL
            break

        proposal = run_proposer(scene, rig, verdict, instruction, memory, config,
                                backend, axis_len, task_id, iteration, renders=renders)
        new_pose, new_vertices = apply_update(
            scene.target_pose, scene.target.vertices, proposal.update, axis_len
        )
        scene = scene.with_target_state(new_pose, new_vertices, iteration=iteration)
        memory = memory.with_record(
            IterationRecord(iteration, verdict, proposal, new_pose)
        )
        if artifact_dir is not None:
            artifact_paths.append(
                _save_iteration_artifacts(artifact_dir, iteration, renders)
            )

    return LoopResult(
        final_scene=scene,
        memory=memory,
        terminated_by=terminated,
        target_id=target_id,
        related_ids=related_ids,
        artifact_paths=tuple(artifact_paths),
    )
