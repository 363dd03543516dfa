"""Shared fixtures: a small tabletop scene and capture/scripted backends."""

import numpy as np
import pytest

from poseloop.backends import OracleBackend, OracleConfig
from poseloop.geometry import RigidPose, single_axis_rotation
from poseloop.loop import LoopConfig
from poseloop.meshes import box_mesh, cylinder_mesh, plane_mesh
from poseloop.scene import SceneObject, SceneState, assign_roles


def make_tabletop_scene(assigned=True):
    """Plane + crate (target) + can (related), meter scale."""
    pv, pf = plane_mesh(1.2, 1.2)
    bv, bf = box_mesh((0.08, 0.1, 0.12), center=(0.15, -0.1, 0.06))
    cv, cf = cylinder_mesh(0.04, 0.16, center=(-0.25, 0.2, 0.08))
    scene = SceneState(
        objects=(
            SceneObject("table", "table", pv, pf, color=(0.75, 0.7, 0.6)),
            SceneObject("crate", "red crate", bv, bf, color=(0.8, 0.25, 0.2)),
            SceneObject("can", "blue can", cv, cf, color=(0.2, 0.35, 0.8)),
        )
    )
    if assigned:
        scene = assign_roles(scene, "crate", ["can"])
    return scene


def goal_at_current(scene) -> RigidPose:
    """Goal equal to the target's current state (center + rotation)."""
    return RigidPose(scene.target_pose.rotation, scene.target_aabb().center)


def goal_moved(scene, delta=(0.0, 0.0, 0.0), axis="z", angle_deg=0.0) -> RigidPose:
    center = scene.target_aabb().center + np.asarray(delta, dtype=float)
    rotation = single_axis_rotation(axis, angle_deg) @ scene.target_pose.rotation
    return RigidPose(rotation, center)


def make_oracle(scene, goal: RigidPose, **kwargs) -> OracleBackend:
    defaults = dict(position_tol=0.02, rotation_tol_deg=5.0,
                    target_id="crate", related_ids=("can",))
    defaults.update(kwargs)
    return OracleBackend(OracleConfig(goal_pose=goal, **defaults))


def small_loop_config(**kwargs) -> LoopConfig:
    defaults = dict(image_width=128, image_height=96)
    defaults.update(kwargs)
    return LoopConfig(**defaults)


class CaptureBackend:
    """Wraps a backend and records every request (for transcript assertions)."""

    def __init__(self, inner):
        self.inner = inner
        self.requests = []

    def bind_state(self, scene, rig=None, renders=None):
        bind = getattr(self.inner, "bind_state", None)
        if bind is not None:
            bind(scene, rig, renders)

    def complete(self, request):
        self.requests.append(request)
        return self.inner.complete(request)


class ScriptedBackend:
    """Returns canned responses in order (repeats the last one when exhausted)."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = 0

    def complete(self, request):
        index = min(self.calls, len(self.responses) - 1)
        self.calls += 1
        return self.responses[index]


@pytest.fixture
def tabletop_scene():
    return make_tabletop_scene()
