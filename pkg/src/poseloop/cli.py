"""Command-line entry point: run one task, run suites/sweeps, render debug frames.

Exit codes: 0 = success/faithful, 2 = loop hit the iteration cap,
1 = runtime error, 64 = usage error (unknown flags fail fast).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .backends import HttpBackend, RecordBackend, ReplayBackend
from .errors import PoseLoopError, RolesUnassigned
from .geometry import EulerUpdate, aabb_of_points, axis_length
from .harness import (
    TaskSpec,
    generate_synthetic_suite,
    judge,
    load_task_scene,
    oracle_backend_factory,
    recording_factory,
    replay_backend_factory,
    run_suite,
    run_sweep,
)
from .loop import LoopConfig, Termination, run_loop, serialize_memory
from .render import AxesOverlaySpec, annotate_objects, overlay_axes, render, write_mask_png, write_png
from .scene import assign_roles, lift_rgbd, load_rgbd_bundle, load_scene_manifest

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MAX_ITERATIONS = 2
EXIT_USAGE = 64

ABLATIONS = {
    "single-view": "single_view",
    "no-coord-vis": "no_coord_vis",
    "euler-rot": "euler_rotation",
    "no-memory": "no_memory",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def _add_loop_flags(parser):
    parser.add_argument("--k-views", type=int, default=4, help="cameras on the rig circle")
    parser.add_argument("--elevation", type=float, default=30.0, help="camera elevation (deg)")
    parser.add_argument("--margin", type=float, default=0.9,
                        help="framing margin in (0, 1]")
    parser.add_argument("--max-iters", type=int, default=5, help="loop iteration cap")
    parser.add_argument("--image-size", default="640x480",
                        help="render resolution WxH (default 640x480)")
    parser.add_argument("--evaluator-axes", choices=["never", "auto", "always"],
                        default="auto", help="when the evaluator sees axis overlays")
    parser.add_argument("--ablate", action="append", default=[],
                        choices=sorted(ABLATIONS), help="disable one technique (repeatable)")
    parser.add_argument("--seed", type=int, default=0, help="seed for all randomness")


def _add_backend_flags(parser):
    parser.add_argument("--backend", choices=["http", "oracle", "replay"],
                        default="oracle", help="agent backend")
    parser.add_argument("--endpoint", help="chat-completions URL (http backend)")
    parser.add_argument("--model", help="model name (http backend)")
    parser.add_argument("--noise-prob", type=float, default=0.0,
                        help="oracle proposal corruption probability")


def _loop_config(args) -> LoopConfig:
    try:
        width, height = (int(v) for v in args.image_size.lower().split("x"))
    except ValueError:
        raise PoseLoopError(f"bad --image-size {args.image_size!r}, expected WxH") from None
    flags = {ABLATIONS[name]: True for name in args.ablate}
    return LoopConfig(
        k_views=args.k_views,
        max_iterations=args.max_iters,
        elevation_deg=args.elevation,
        margin=args.margin,
        evaluator_axes=args.evaluator_axes,
        image_width=width,
        image_height=height,
        **flags,
    )


def _load_scene(args):
    if getattr(args, "rgbd", None):
        return lift_rgbd(load_rgbd_bundle(args.rgbd))
    if getattr(args, "scene", None):
        return load_scene_manifest(args.scene)
    raise PoseLoopError("provide --scene MANIFEST or --rgbd BUNDLE_DIR")


def _hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_artifact_manifest(out_dir: Path):
    manifest = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "artifacts.json":
            manifest[str(path.relative_to(out_dir))] = _hash_file(path)
    (out_dir / "artifacts.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _memory_json(result) -> list[dict]:
    records = []
    for record in result.memory.records:
        entry = {
            "iteration": record.iteration,
            "verdict": {
                "faithful": record.verdict.faithful,
                "supporting_view": record.verdict.supporting_view,
                "rationale": record.verdict.rationale,
            },
            "pose_after": {
                "rotation": record.pose_after.rotation.tolist(),
                "translation": record.pose_after.translation.tolist(),
            },
        }
        if record.proposal is not None:
            update = record.proposal.update
            proposal = {"translation_units": update.translation_units.tolist(),
                        "rationale": record.proposal.rationale}
            if isinstance(update, EulerUpdate):
                proposal["euler_xyz_deg"] = update.angles_deg.tolist()
            else:
                proposal["rotation_axis"] = update.axis.value
                proposal["rotation_angle_deg"] = update.angle_deg
            entry["proposal"] = proposal
        records.append(entry)
    return records


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    task = None
    if args.task:
        task = TaskSpec.from_json(json.loads(Path(args.task).read_text()))
    if task is not None and not args.scene and not args.rgbd:
        scene = load_task_scene(task, Path(args.task).parent)
    else:
        scene = _load_scene(args)
    instruction = args.instruction or (task.instruction if task else None)
    if not instruction:
        raise PoseLoopError("provide --instruction (or --task with one)")

    config = _loop_config(args)
    if args.backend == "http":
        if not args.endpoint or not args.model:
            raise PoseLoopError("http backend needs --endpoint and --model")
        backend = HttpBackend(args.endpoint, args.model)
    elif args.backend == "replay":
        if not args.transcript:
            raise PoseLoopError("replay backend needs --transcript FILE")
        backend = ReplayBackend(args.transcript)
    else:
        if task is None:
            raise PoseLoopError("oracle backend needs --task TASK_JSON (for the goal)")
        backend = oracle_backend_factory(args.noise_prob, args.seed)(task, scene)
    if args.record:
        backend = RecordBackend(backend, args.record)

    out_dir = Path(args.out) if args.out else None
    frames_dir = out_dir / "frames" if out_dir else None
    result = run_loop(scene, instruction, backend, config,
                      task_id=task.id if task else "run", artifact_dir=frames_dir)

    summary = {
        "terminated_by": result.terminated_by.value,
        "iterations": result.iterations_used,
        "target": result.target_id,
        "related": list(result.related_ids),
        "final_pose": {
            "rotation": result.final_scene.target_pose.rotation.tolist(),
            "translation": result.final_scene.target_pose.translation.tolist(),
        },
        "final_aabb_center": result.final_scene.target_aabb().center.tolist(),
    }
    if task is not None:
        row = judge(result.final_scene, task)
        summary["judge"] = {
            "position_success": row.position_success,
            "rotation_success": row.rotation_success,
            "overall": row.overall,
        }
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "memory.json").write_text(
            json.dumps(_memory_json(result), indent=2) + "\n"
        )
        (out_dir / "result.json").write_text(json.dumps(summary, indent=2) + "\n")
        _write_artifact_manifest(out_dir)
    else:
        print(json.dumps(summary, indent=2))
    print(f"terminated: {result.terminated_by.value} after "
          f"{result.iterations_used} iteration(s)")
    print(serialize_memory(result.memory))
    return EXIT_OK if result.terminated_by is Termination.FAITHFUL else EXIT_MAX_ITERATIONS


def cmd_suite(args) -> int:
    config = _loop_config(args)
    if args.backend == "http":
        if not args.endpoint or not args.model:
            raise PoseLoopError("http backend needs --endpoint and --model")
        shared = HttpBackend(args.endpoint, args.model)
        factory = lambda task, scene: shared  # noqa: E731 - tiny closure
    elif args.backend == "replay":
        if not args.transcripts:
            raise PoseLoopError("replay backend needs --transcripts DIR")
        factory = replay_backend_factory(args.transcripts)
    else:
        factory = oracle_backend_factory(args.noise_prob, args.seed)
    out_dir = Path(args.out) if args.out else None
    if args.record:
        if out_dir is None:
            raise PoseLoopError("--record needs --out for the transcripts directory")
        factory = recording_factory(factory, out_dir / "transcripts")

    if args.max_iter_sweep:
        try:
            lo, hi = (int(v) for v in args.max_iter_sweep.split(".."))
        except ValueError:
            raise PoseLoopError(
                f"bad --max-iter-sweep {args.max_iter_sweep!r}, expected A..B"
            ) from None
        aggregates = run_sweep(args.suite, factory, config, out_dir,
                               caps=range(lo, hi + 1), workers=args.workers)
        for aggregate in aggregates:
            print(f"max_iterations={aggregate['max_iterations']}: "
                  f"success={aggregate['overall_success_rate']:.3f}")
        return EXIT_OK

    aggregate = run_suite(args.suite, factory, config, out_dir, workers=args.workers)
    print(json.dumps(aggregate, indent=2))
    return EXIT_OK


def cmd_render(args) -> int:
    scene = _load_scene(args)
    if args.target:
        scene = assign_roles(scene, args.target, args.related)
    elif args.axes:
        raise RolesUnassigned("--axes needs --target (and optional --related) roles")

    config = _loop_config(args)
    intrinsics = config.intrinsics()
    from .camera import frame_aabb, scene_overview_rig

    if scene.roles_assigned:
        rig = frame_aabb(scene.focus_aabb(), intrinsics, args.views,
                         config.elevation_deg, config.margin)
    else:
        rig = scene_overview_rig(scene, intrinsics, args.views, config.elevation_deg,
                                 config.margin)
    out_dir = Path(args.out) if args.out else Path("renders")
    out_dir.mkdir(parents=True, exist_ok=True)
    for index, camera in enumerate(rig.cameras, start=1):
        output = render(scene, camera, config.point_radius)
        image = output.rgb
        if args.axes:
            box = scene.target_aabb()
            length = axis_length(
                aabb_of_points(scene.target_canonical_vertices).extents
            )
            image = overlay_axes(output, camera, AxesOverlaySpec(box.center, length), box)
        if args.annotate:
            source = output if not args.axes else dataclasses.replace(output, rgb=image)
            image = annotate_objects(source, scene.labels)
        write_png(image, out_dir / f"view_{index}.png")
        write_mask_png(output, out_dir / f"view_{index}_mask.png")
    _write_artifact_manifest(out_dir)
    print(f"wrote {2 * len(rig.cameras)} PNGs to {out_dir}")
    return EXIT_OK


def cmd_make_suite(args) -> int:
    path = generate_synthetic_suite(args.n, args.seed, args.out)
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="poseloop",
                     description="Closed-loop text-guided 6D pose rearrangement")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the closed loop on one scene/task",
                         description="Run the closed loop once; exit 0 when the "
                                     "evaluator declares the scene faithful, 2 at "
                                     "the iteration cap.")
    run.add_argument("--scene", help="scene manifest JSON")
    run.add_argument("--rgbd", help="RGB-D bundle directory")
    run.add_argument("--task", help="TaskSpec JSON (goal + ground-truth roles)")
    run.add_argument("--instruction", help="text instruction")
    run.add_argument("--record", help="record the agent transcript to this JSONL")
    run.add_argument("--transcript", help="replay transcript (replay backend)")
    run.add_argument("--out", help="artifact directory (frames, memory, result)")
    _add_backend_flags(run)
    _add_loop_flags(run)
    run.set_defaults(func=cmd_run)

    suite = sub.add_parser("suite", help="run a task suite / ablation / sweep")
    suite.add_argument("--suite", required=True, help="suite JSON file")
    suite.add_argument("--out", help="report directory")
    suite.add_argument("--workers", type=int, default=1, help="parallel tasks")
    suite.add_argument("--record", action="store_true",
                       help="record per-task transcripts under OUT/transcripts")
    suite.add_argument("--transcripts", help="transcripts dir (replay backend)")
    suite.add_argument("--max-iter-sweep", metavar="A..B",
                       help="run the suite once per iteration cap in A..B")
    _add_backend_flags(suite)
    _add_loop_flags(suite)
    suite.set_defaults(func=cmd_suite)

    rend = sub.add_parser("render", help="render rig views without any backend")
    rend.add_argument("--scene", help="scene manifest JSON")
    rend.add_argument("--rgbd", help="RGB-D bundle directory")
    rend.add_argument("--views", type=int, default=4, help="number of rig views")
    rend.add_argument("--axes", action="store_true", help="draw target axes")
    rend.add_argument("--annotate", action="store_true", help="draw object boxes/labels")
    rend.add_argument("--target", help="target object id (enables --axes)")
    rend.add_argument("--related", action="append", default=[],
                      help="related object id (repeatable)")
    rend.add_argument("--out", help="output directory (default ./renders)")
    _add_loop_flags(rend)
    rend.set_defaults(func=cmd_render)

    make = sub.add_parser("make-suite", help="generate a synthetic tabletop suite")
    make.add_argument("--n", type=int, required=True, help="number of tasks")
    make.add_argument("--seed", type=int, default=0)
    make.add_argument("--out", required=True, help="suite output directory")
    make.set_defaults(func=cmd_make_suite)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PoseLoopError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
