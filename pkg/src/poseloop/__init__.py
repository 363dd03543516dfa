"""poseloop: closed-loop text-guided 6D object pose rearrangement.

A scene/render/update engine in which an agent backend (a remote VLM or
a local geometric oracle) alternates evaluator and proposer roles until
the rendered scene satisfies a text instruction.
"""

from .backends import (
    AgentRequest,
    AgentRole,
    HttpBackend,
    OracleBackend,
    OracleConfig,
    RecordBackend,
    ReplayBackend,
)
from .camera import Camera, CameraIntrinsics, CameraPose, CameraRig, frame_aabb, project, scene_overview_rig
from .errors import PoseLoopError
from .geometry import (
    Aabb,
    Axis,
    EulerUpdate,
    PoseUpdate,
    RigidPose,
    aabb_of_points,
    apply_update,
    axis_length,
    relative_rotation_error,
    single_axis_rotation,
)
from .harness import (
    TaskSpec,
    Track,
    generate_synthetic_suite,
    judge,
    run_suite,
    run_sweep,
)
from .loop import (
    ContextMemory,
    EvaluatorVerdict,
    LoopConfig,
    LoopResult,
    PoseProposal,
    Termination,
    run_loop,
    serialize_memory,
)
from .render import AxesOverlaySpec, RenderOutput, annotate_objects, overlay_axes, render
from .scene import (
    RgbdFrame,
    Role,
    SceneObject,
    SceneState,
    assign_roles,
    lift_rgbd,
    load_rgbd_bundle,
    load_scene_manifest,
    remove_outliers,
    save_scene_manifest,
)

__version__ = "0.1.0"
