"""Record/replay: capture one loop's transcript, rerun it offline.

Every backend exchange is appended to a JSONL transcript keyed by a
hash of (role, prompt, image hashes). Replaying feeds the recorded
responses back through the *real* loop: rendering, parsing, and pose
updates all run again and land on bit-identical poses with zero
backend traffic.
"""

import json
from pathlib import Path

import numpy as np

from poseloop import (
    LoopConfig,
    OracleBackend,
    OracleConfig,
    RecordBackend,
    ReplayBackend,
    RigidPose,
    SceneObject,
    SceneState,
    run_loop,
    single_axis_rotation,
)
from poseloop.geometry import aabb_of_points
from poseloop.meshes import box_mesh, cylinder_mesh, plane_mesh

out_dir = Path(__file__).parent / "out" / "06_replay"
out_dir.mkdir(parents=True, exist_ok=True)
transcript = out_dir / "transcript.jsonl"
transcript.unlink(missing_ok=True)


def fresh_scene():
    return SceneState(objects=(
        SceneObject("table", "table", *plane_mesh(1.2, 1.2), color=(0.74, 0.68, 0.57)),
        SceneObject("crate", "crate", *box_mesh((0.09, 0.11, 0.1), center=(0.15, -0.1, 0.05)),
                    color=(0.8, 0.3, 0.2)),
        SceneObject("can", "can", *cylinder_mesh(0.04, 0.15, center=(-0.2, 0.2, 0.075)),
                    color=(0.2, 0.4, 0.8)),
    ))


goal_center = aabb_of_points(fresh_scene().object_by_id("crate").vertices).center \
    + np.array([-0.08, 0.06, 0.0])
goal = RigidPose(single_axis_rotation("z", -90.0), goal_center)
config = LoopConfig(image_width=256, image_height=192)
instruction = "turn the crate a quarter turn clockwise and nudge it toward the can"


def make_oracle():
    return OracleBackend(OracleConfig(goal_pose=goal, position_tol=0.02,
                                      rotation_tol_deg=5.0, target_id="crate",
                                      related_ids=("can",)))


print("recording run...")
recorded = run_loop(fresh_scene(), instruction,
                    RecordBackend(make_oracle(), transcript), config, task_id="replay-demo")
entries = [json.loads(line) for line in transcript.read_text().splitlines()]
print(f"  transcript: {len(entries)} lines "
      f"(1 header + {len(entries) - 1} exchanges) at {transcript}")

print("replaying run (no oracle, no network)...")
replayed = run_loop(fresh_scene(), instruction, ReplayBackend(transcript), config,
                    task_id="replay-demo")

pose_a = recorded.final_scene.target_pose
pose_b = replayed.final_scene.target_pose
print(f"  termination: {recorded.terminated_by.value} == {replayed.terminated_by.value}")
print("  max |rotation delta|   :", np.abs(pose_a.rotation - pose_b.rotation).max())
print("  max |translation delta|:", np.abs(pose_a.translation - pose_b.translation).max())
assert recorded.terminated_by == replayed.terminated_by
assert np.abs(pose_a.rotation - pose_b.rotation).max() <= 1e-12
assert np.abs(pose_a.translation - pose_b.translation).max() <= 1e-12
print("replay closure holds.")
