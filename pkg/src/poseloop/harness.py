"""Task suites, success judging, batch runner, and the synthetic generator.

A task points at a scene (mesh manifest or RGB-D bundle), an
instruction, and a goal; success is judged on the final scene only:
position at the target's AABB center against ``position_tol``, rotation
by geodesic distance against ``rotation_tol_deg``, combined per track.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .backends import OracleBackend, OracleConfig, RecordBackend, ReplayBackend
from .errors import EmptySuite, PoseLoopError
from .geometry import (
    RigidPose,
    aabb_of_points,
    axis_length,
    relative_rotation_error,
    single_axis_rotation,
)
from .loop import LoopConfig, run_loop
from .meshes import box_mesh, cylinder_mesh, plane_mesh, wedge_mesh
from .scene import (
    SceneObject,
    SceneState,
    lift_rgbd,
    load_rgbd_bundle,
    load_scene_manifest,
    save_scene_manifest,
)

__all__ = [
    "Track",
    "TaskSpec",
    "TaskResult",
    "judge",
    "load_suite",
    "save_suite",
    "load_task_scene",
    "oracle_backend_factory",
    "replay_backend_factory",
    "recording_factory",
    "run_suite",
    "run_sweep",
    "generate_synthetic_suite",
]

DEFAULT_POSITION_TOL = 0.05
DEFAULT_ROTATION_TOL_DEG = 45.0


class Track(str, Enum):
    POSITION = "position"
    ROTATION = "rotation"
    SIX_DOF = "6dof"


@dataclass(frozen=True)
class TaskSpec:
    """One benchmark task: scene + instruction + goal + tolerances."""

    id: str
    scene: str
    instruction: str
    track: Track
    goal_position: np.ndarray | None = None
    position_tol: float = DEFAULT_POSITION_TOL
    goal_rotation: np.ndarray | None = None
    rotation_tol_deg: float = DEFAULT_ROTATION_TOL_DEG
    ground_truth_roles: tuple[str, tuple[str, ...]] | None = None
    level: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "track", Track(self.track))
        if self.goal_position is not None:
            object.__setattr__(
                self, "goal_position",
                np.asarray(self.goal_position, dtype=np.float64).reshape(3),
            )
        if self.goal_rotation is not None:
            object.__setattr__(
                self, "goal_rotation",
                np.asarray(self.goal_rotation, dtype=np.float64).reshape(3, 3),
            )
        if self.track in (Track.POSITION, Track.SIX_DOF) and self.goal_position is None:
            raise ValueError(f"task '{self.id}': {self.track.value} track needs goal_position")
        if self.track in (Track.ROTATION, Track.SIX_DOF) and self.goal_rotation is None:
            raise ValueError(f"task '{self.id}': {self.track.value} track needs goal_rotation")
        if self.ground_truth_roles is not None:
            target, related = self.ground_truth_roles
            object.__setattr__(self, "ground_truth_roles", (str(target), tuple(related)))

    def to_json(self) -> dict:
        data = {
            "id": self.id,
            "scene": self.scene,
            "instruction": self.instruction,
            "track": self.track.value,
            "position_tol": self.position_tol,
            "rotation_tol_deg": self.rotation_tol_deg,
        }
        if self.goal_position is not None:
            data["goal_position"] = self.goal_position.tolist()
        if self.goal_rotation is not None:
            data["goal_rotation"] = self.goal_rotation.tolist()
        if self.ground_truth_roles is not None:
            data["ground_truth_roles"] = {
                "target": self.ground_truth_roles[0],
                "related": list(self.ground_truth_roles[1]),
            }
        if self.level is not None:
            data["level"] = self.level
        return data

    @classmethod
    def from_json(cls, data: dict) -> "TaskSpec":
        roles = data.get("ground_truth_roles")
        if roles is not None:
            roles = (roles["target"], tuple(roles.get("related", ())))
        return cls(
            id=str(data["id"]),
            scene=str(data["scene"]),
            instruction=str(data["instruction"]),
            track=Track(data["track"]),
            goal_position=data.get("goal_position"),
            position_tol=float(data.get("position_tol", DEFAULT_POSITION_TOL)),
            goal_rotation=data.get("goal_rotation"),
            rotation_tol_deg=float(data.get("rotation_tol_deg", DEFAULT_ROTATION_TOL_DEG)),
            ground_truth_roles=roles,
            level=data.get("level"),
        )


@dataclass(frozen=True)
class TaskResult:
    """One report row; judged from the final scene only."""

    task_id: str
    track: Track
    position_success: bool | None
    rotation_success: bool | None
    overall: bool
    level: int | None = None
    iterations: int = 0
    terminated_by: str = ""
    wall_time_s: float = 0.0
    error: str | None = None
    final_pose: dict | None = None  # rotation/translation of the final target pose

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "track": self.track.value,
            "level": self.level,
            "position_success": self.position_success,
            "rotation_success": self.rotation_success,
            "overall": self.overall,
            "iterations": self.iterations,
            "terminated_by": self.terminated_by,
            "wall_time_s": round(self.wall_time_s, 4),
            "error": self.error,
            "final_pose": self.final_pose,
        }


def judge(final_scene: SceneState, task: TaskSpec) -> TaskResult:
    """Score the final scene: AABB-center distance and geodesic rotation error."""
    position_success = None
    rotation_success = None
    if task.goal_position is not None:
        center = final_scene.target_aabb().center
        position_success = bool(
            np.linalg.norm(center - task.goal_position) <= task.position_tol
        )
    if task.goal_rotation is not None:
        error = relative_rotation_error(
            final_scene.target_pose.rotation, task.goal_rotation
        )
        rotation_success = bool(error <= task.rotation_tol_deg)
    if task.track is Track.POSITION:
        overall = bool(position_success)
    elif task.track is Track.ROTATION:
        overall = bool(rotation_success)
    else:
        overall = bool(position_success) and bool(rotation_success)
    return TaskResult(
        task_id=task.id,
        track=task.track,
        level=task.level,
        position_success=position_success,
        rotation_success=rotation_success,
        overall=overall,
    )


# ---------------------------------------------------------------------------
# Suite IO
# ---------------------------------------------------------------------------

def load_suite(path) -> list[TaskSpec]:
    path = Path(path)
    data = json.loads(path.read_text())
    if not isinstance(data, list) or not data:
        raise EmptySuite(f"{path}: suite must be a non-empty JSON list of tasks")
    tasks = [TaskSpec.from_json(entry) for entry in data]
    return tasks


def save_suite(tasks, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([t.to_json() for t in tasks], indent=2) + "\n")
    return path


def load_task_scene(task: TaskSpec, suite_dir: Path | None = None) -> SceneState:
    """Load the task's scene: a manifest JSON or an RGB-D bundle directory."""
    scene_path = Path(task.scene)
    if suite_dir is not None and not scene_path.is_absolute():
        scene_path = suite_dir / scene_path
    if scene_path.is_dir():
        return lift_rgbd(load_rgbd_bundle(scene_path))
    return load_scene_manifest(scene_path)


# ---------------------------------------------------------------------------
# Backend factories
# ---------------------------------------------------------------------------

def oracle_backend_factory(noise_prob: float = 0.0, seed: int = 0,
                           position_tol: float | None = None,
                           rotation_tol_deg: float | None = None):
    """Factory building one fresh oracle per task from its goal and roles."""

    def factory(task: TaskSpec, scene: SceneState):
        if task.goal_position is not None:
            goal_position = task.goal_position
        else:
            target_id = task.ground_truth_roles[0] if task.ground_truth_roles else None
            obj = scene.object_by_id(target_id) if target_id else scene.objects[0]
            goal_position = aabb_of_points(obj.vertices).center
        goal_rotation = (
            task.goal_rotation if task.goal_rotation is not None else np.eye(3)
        )
        roles = task.ground_truth_roles or (None, ())
        return OracleBackend(
            OracleConfig(
                goal_pose=RigidPose(goal_rotation, goal_position),
                position_tol=position_tol or task.position_tol,
                rotation_tol_deg=rotation_tol_deg or task.rotation_tol_deg,
                noise_prob=noise_prob,
                seed=seed,
                target_id=roles[0],
                related_ids=roles[1],
            )
        )

    return factory


def replay_backend_factory(transcripts_dir):
    """Factory serving each task from ``<transcripts_dir>/<task_id>.jsonl``."""
    transcripts_dir = Path(transcripts_dir)

    def factory(task: TaskSpec, scene: SceneState):
        return ReplayBackend(transcripts_dir / f"{task.id}.jsonl")

    return factory


def recording_factory(inner_factory, transcripts_dir):
    """Wrap another factory so every task run is recorded to JSONL."""
    transcripts_dir = Path(transcripts_dir)

    def factory(task: TaskSpec, scene: SceneState):
        return RecordBackend(inner_factory(task, scene),
                             transcripts_dir / f"{task.id}.jsonl")

    return factory


# ---------------------------------------------------------------------------
# Suite runner
# ---------------------------------------------------------------------------

def _run_one(task: TaskSpec, backend_factory, config: LoopConfig,
             suite_dir: Path | None) -> TaskResult:
    start = time.perf_counter()
    try:
        scene = load_task_scene(task, suite_dir)
        backend = backend_factory(task, scene)
        result = run_loop(scene, task.instruction, backend, config, task_id=task.id)
        row = judge(result.final_scene, task)
        pose = result.final_scene.target_pose
        return dataclasses.replace(
            row,
            iterations=result.iterations_used,
            terminated_by=result.terminated_by.value,
            wall_time_s=time.perf_counter() - start,
            final_pose={
                "rotation": pose.rotation.tolist(),
                "translation": pose.translation.tolist(),
            },
        )
    except (PoseLoopError, ValueError, OSError) as exc:
        return TaskResult(
            task_id=task.id,
            track=task.track,
            level=task.level,
            position_success=None,
            rotation_success=None,
            overall=False,
            iterations=0,
            terminated_by="error",
            wall_time_s=time.perf_counter() - start,
            error=type(exc).__name__,
        )


def _aggregate(rows: list[TaskResult], config: LoopConfig) -> dict:
    def rate(selected):
        selected = list(selected)
        if not selected:
            return None
        return sum(1 for r in selected if r.overall) / len(selected)

    by_track = {
        track.value: rate(r for r in rows if r.track is track)
        for track in Track
        if any(r.track is track for r in rows)
    }
    levels = sorted({r.level for r in rows if r.level is not None})
    by_level = {str(level): rate(r for r in rows if r.level == level) for level in levels}
    return {
        "n_tasks": len(rows),
        "overall_success_rate": rate(rows),
        "by_track": by_track,
        "by_level": by_level,
        "errors": sum(1 for r in rows if r.error),
        "max_iterations": config.max_iterations,
        "ablations": {
            "single_view": config.single_view,
            "no_coord_vis": config.no_coord_vis,
            "euler_rotation": config.euler_rotation,
            "no_memory": config.no_memory,
        },
    }


def _report_markdown(aggregate: dict) -> str:
    lines = [
        "# Suite report",
        "",
        f"Tasks: {aggregate['n_tasks']}  |  max iterations: {aggregate['max_iterations']}"
        f"  |  errors: {aggregate['errors']}",
        "",
        "| scope | success rate |",
        "| --- | --- |",
        f"| overall | {aggregate['overall_success_rate']:.3f} |",
    ]
    for track, value in aggregate["by_track"].items():
        lines.append(f"| track: {track} | {value:.3f} |")
    for level, value in aggregate["by_level"].items():
        lines.append(f"| level {level} | {value:.3f} |")
    flags = [name for name, on in aggregate["ablations"].items() if on]
    lines.append("")
    lines.append(f"Ablations active: {', '.join(flags) if flags else 'none'}")
    return "\n".join(lines) + "\n"


def run_suite(suite_path, backend_factory, config: LoopConfig | None = None,
              out_dir=None, max_iterations: int | None = None,
              workers: int = 1) -> dict:
    """Run every task, write rows.jsonl/aggregate.json/report.md, return the aggregate.

    Individual task errors become failed rows (with the error class) and
    never abort the suite. Rows are ordered by task id regardless of
    worker count.
    """
    suite_path = Path(suite_path)
    tasks = load_suite(suite_path)
    config = config or LoopConfig()
    if max_iterations is not None:
        config = dataclasses.replace(config, max_iterations=max_iterations)
    suite_dir = suite_path.parent

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(
                lambda task: _run_one(task, backend_factory, config, suite_dir), tasks
            ))
    else:
        rows = [_run_one(task, backend_factory, config, suite_dir) for task in tasks]
    rows.sort(key=lambda r: r.task_id)

    aggregate = _aggregate(rows, config)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "rows.jsonl").open("w") as fh:
            for row in rows:
                fh.write(json.dumps(row.to_json()) + "\n")
        (out_dir / "aggregate.json").write_text(json.dumps(aggregate, indent=2) + "\n")
        (out_dir / "report.md").write_text(_report_markdown(aggregate))
    return aggregate


def run_sweep(suite_path, backend_factory, config: LoopConfig | None = None,
              out_dir=None, caps=range(1, 6), workers: int = 1) -> list[dict]:
    """Max-iteration sweep: one full suite run per cap, aggregates in cap order."""
    aggregates = []
    for cap in caps:
        sub_dir = Path(out_dir) / f"max_iters_{cap}" if out_dir is not None else None
        aggregates.append(
            run_suite(suite_path, backend_factory, config, sub_dir,
                      max_iterations=cap, workers=workers)
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        summary = [
            {"max_iterations": agg["max_iterations"],
             "overall_success_rate": agg["overall_success_rate"]}
            for agg in aggregates
        ]
        (out_dir / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
    return aggregates


# ---------------------------------------------------------------------------
# Synthetic tabletop suite generator
# ---------------------------------------------------------------------------

_SHAPES = ("box", "cylinder", "wedge")
_COLOR_NAMES = (
    ("red", (0.82, 0.25, 0.2)),
    ("blue", (0.2, 0.35, 0.8)),
    ("green", (0.25, 0.65, 0.3)),
    ("yellow", (0.85, 0.75, 0.2)),
    ("purple", (0.55, 0.3, 0.7)),
)
_ANGLES = (-90.0, 90.0, 180.0)
_AXES = ("x", "y", "z")
_TABLE_HALF = 0.55


def _make_primitive(shape: str, extents, center):
    if shape == "box":
        return box_mesh(extents, center)
    if shape == "cylinder":
        radius = min(extents[0], extents[1]) / 2.0
        return cylinder_mesh(radius, extents[2], center, segments=14)
    return wedge_mesh(extents, center)


def _point_to_aabb_distance(point, box_min, box_max) -> float:
    clamped = np.clip(point, box_min, box_max)
    return float(np.linalg.norm(point - clamped))


def generate_synthetic_suite(n: int, seed: int, out_dir) -> Path:
    """Procedural tabletop tasks: plane + 2-4 primitives, 6-DoF goals.

    Goals are single-axis rotations from {-90, 90, 180} degrees combined
    with translations of at most 3 axis units per component; every goal
    region is kept clear of the distractor objects so a within-tolerance
    final pose can never interpenetrate. Deterministic per seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    scenes_dir = out_dir / "scenes"
    tasks = []
    for index in range(n):
        task_id = f"task_{index:03d}"
        n_objects = int(rng.integers(2, 5))
        placed = []  # (id, label, shape, extents, center, color)
        color_order = rng.permutation(len(_COLOR_NAMES))
        for obj_index in range(n_objects):
            extents = rng.uniform(0.05, 0.12, size=3)
            shape = _SHAPES[int(rng.integers(len(_SHAPES)))]
            color_name, color = _COLOR_NAMES[color_order[obj_index % len(_COLOR_NAMES)]]
            for _ in range(200):
                xy = rng.uniform(-0.35, 0.35, size=2)
                center = np.array([xy[0], xy[1], extents[2] / 2.0])
                half_diag = float(np.linalg.norm(extents) / 2.0)
                ok = all(
                    np.linalg.norm(center[:2] - other_center[:2])
                    >= half_diag + float(np.linalg.norm(other_ext) / 2.0) + 0.04
                    for (_, _, _, other_ext, other_center, _) in placed
                )
                if ok:
                    break
            placed.append(
                (f"{color_name}_{shape}", f"{color_name} {shape}", shape, extents,
                 center, color)
            )

        objects = [
            SceneObject("table", "table", *plane_mesh(2 * _TABLE_HALF, 2 * _TABLE_HALF),
                        color=(0.72, 0.66, 0.58))
        ]
        for oid, label, shape, extents, center, color in placed:
            verts, faces = _make_primitive(shape, extents, center)
            objects.append(SceneObject(oid, label, verts, faces, color=color))
        scene = SceneState(objects=tuple(objects))
        scene_dir = scenes_dir / task_id
        manifest = save_scene_manifest(scene, scene_dir)

        # Target + one related distractor.
        target_index = int(rng.integers(len(placed)))
        target = placed[target_index]
        non_targets = [p for i, p in enumerate(placed) if i != target_index]
        related = [non_targets[0][0]] if non_targets else []

        target_id, target_label, _, target_extents, target_center, _ = target
        unit = axis_length(target_extents)
        sphere_radius = float(np.linalg.norm(target_extents) / 2.0)
        position_tol = 0.05
        clearance = sphere_radius + position_tol + 0.02

        axis = _AXES[int(rng.integers(3))]
        angle = float(_ANGLES[int(rng.integers(3))])
        rotation = single_axis_rotation(axis, angle)
        rotated_extents = np.abs(rotation) @ target_extents

        goal_center = None
        for _ in range(500):
            delta_xy = rng.uniform(-2.5 * unit, 2.5 * unit, size=2)
            candidate = np.array(
                [
                    np.clip(target_center[0] + delta_xy[0], -0.4, 0.4),
                    np.clip(target_center[1] + delta_xy[1], -0.4, 0.4),
                    rotated_extents[2] / 2.0 + 0.002,
                ]
            )
            if abs(candidate[2] - target_center[2]) > 2.9 * unit:
                continue
            clear = all(
                _point_to_aabb_distance(
                    candidate,
                    other_center - other_ext / 2.0,
                    other_center + other_ext / 2.0,
                ) >= clearance
                for (_, _, _, other_ext, other_center, _) in non_targets
            )
            if clear:
                goal_center = candidate
                break
        if goal_center is None:  # fall back to rotating in place
            goal_center = np.array(
                [target_center[0], target_center[1], rotated_extents[2] / 2.0 + 0.002]
            )

        turn = {90.0: "a quarter turn counterclockwise",
                -90.0: "a quarter turn clockwise",
                180.0: "half a turn"}[angle]
        axis_word = {"x": "front axis", "y": "side axis", "z": "vertical axis"}[axis]
        if rng.random() < 0.5:
            direction = "left" if goal_center[1] < target_center[1] else "right"
            instruction = (
                f"Rotate the {target_label} {turn} about its {axis_word} and "
                f"slide it to the {direction} onto its marked spot."
            )
        else:
            instruction = (
                f"Rotate the {target_label} {turn} about its {axis_word} and "
                f"move it to its marked spot on the table."
            )

        tasks.append(
            TaskSpec(
                id=task_id,
                scene=str(manifest.relative_to(out_dir)),
                instruction=instruction,
                track=Track.SIX_DOF,
                goal_position=goal_center,
                position_tol=position_tol,
                goal_rotation=rotation,
                rotation_tol_deg=15.0,
                ground_truth_roles=(target_id, tuple(related)),
                level=0 if abs(angle) == 90.0 else 1,
            )
        )
    return save_suite(tasks, out_dir / "suite.json")
