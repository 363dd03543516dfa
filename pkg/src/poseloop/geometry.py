"""Rigid-transform algebra for the pose-rearrangement loop.

Conventions used throughout the package:

* points and vectors are float64 ndarrays of shape (3,) in world meters,
  vertex sets are (N, 3);
* rotations are 3x3 row-major orthonormal matrices acting on column
  vectors (``p_new = R @ p``);
* angles are degrees at every API boundary, radians only internally;
* the world frame reads ``+x`` front, ``+y`` right, ``+z`` top, and all
  rotations follow the right-hand rule.

The object-update rule rotates the target about the center of its
current axis-aligned bounding box (not the mesh origin) and then
translates; ``apply_update`` implements exactly that, keeping the pose
and the world vertices consistent with each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DegenerateAabb, EmptyPointSet

__all__ = [
    "Axis",
    "Aabb",
    "RigidPose",
    "PoseUpdate",
    "EulerUpdate",
    "aabb_of_points",
    "axis_length",
    "single_axis_rotation",
    "euler_xyz_rotation",
    "apply_update",
    "apply_motion",
    "relative_rotation_error",
    "orthonormalize",
    "wrap_angle_deg",
]

# Tolerance used by validity checks on rotation matrices.
_ROT_TOL = 1e-9


class Axis(str, Enum):
    """World rotation axis."""

    X = "x"
    Y = "y"
    Z = "z"

    @property
    def index(self) -> int:
        return "xyz".index(self.value)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


def wrap_angle_deg(angle: float) -> float:
    """Wrap an angle into [-180, 180]; values already in range pass through."""
    angle = float(angle)
    if -180.0 <= angle <= 180.0:
        return angle
    wrapped = math.fmod(angle, 360.0)
    if wrapped > 180.0:
        wrapped -= 360.0
    elif wrapped < -180.0:
        wrapped += 360.0
    return wrapped


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box, ``min <= max`` componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=np.float64).reshape(3))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=np.float64).reshape(3))
        if not np.all(self.min <= self.max):
            raise ValueError("Aabb requires min <= max componentwise")

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2.0

    @property
    def extents(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extents))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def corners(self) -> np.ndarray:
        """All 8 corners, shape (8, 3)."""
        lo, hi = self.min, self.max
        return np.array(
            [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
        )

    def contains(self, points, atol: float = 0.0) -> bool:
        pts = _as_points(points)
        return bool(
            np.all(pts >= self.min - atol) and np.all(pts <= self.max + atol)
        )

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))

    def overlap_volume(self, other: "Aabb") -> float:
        """Volume of the intersection box (0 when disjoint)."""
        lo = np.maximum(self.min, other.min)
        hi = np.minimum(self.max, other.max)
        edge = np.clip(hi - lo, 0.0, None)
        return float(np.prod(edge))


def aabb_of_points(points) -> Aabb:
    """Componentwise min/max hull of a non-empty point set."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise EmptyPointSet("cannot build an AABB from zero points")
    pts = _as_points(pts)
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return Aabb(pts.min(axis=0), pts.max(axis=0))


def axis_length(extents) -> float:
    """Drawn axis length for a box with the given edge lengths.

    The shortest edge is used when it is at most half the longest edge,
    otherwise half the shortest edge. Scale-equivariant, and the
    boundary case ``2*min == max`` takes the first branch.
    """
    ext = np.asarray(extents, dtype=np.float64).reshape(3)
    if np.any(ext <= 0.0):
        raise DegenerateAabb(f"extents must be > 0, got {ext.tolist()}")
    b_min = float(ext.min())
    b_max = float(ext.max())
    if 2.0 * b_min <= b_max:
        return b_min
    return b_min / 2.0


def single_axis_rotation(axis: Axis | str, angle_deg: float) -> np.ndarray:
    """Right-hand-rule rotation matrix about a world axis, angle in degrees."""
    axis = Axis(axis)
    theta = math.radians(float(angle_deg))
    c, s = math.cos(theta), math.sin(theta)
    if axis is Axis.X:
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis is Axis.Y:
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_xyz_rotation(angles_deg) -> np.ndarray:
    """Rotation from three Euler angles applied in x, then y, then z order."""
    rx, ry, rz = (float(a) for a in np.asarray(angles_deg, dtype=np.float64).reshape(3))
    return (
        single_axis_rotation(Axis.Z, rz)
        @ single_axis_rotation(Axis.Y, ry)
        @ single_axis_rotation(Axis.X, rx)
    )


def orthonormalize(matrix: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) (polar factor via SVD, det +1)."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u = u.copy()
        u[:, -1] *= -1.0
        rot = u @ vt
    return rot


def is_rotation(matrix: np.ndarray, tol: float = _ROT_TOL) -> bool:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        return False
    return (
        np.linalg.norm(m.T @ m - np.eye(3)) < tol
        and abs(np.linalg.det(m) - 1.0) < tol
    )


@dataclass(frozen=True)
class RigidPose:
    """World rotation + translation of the target object."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        )
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, points) -> np.ndarray:
        """Apply the pose to (N, 3) points."""
        pts = _as_points(points)
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PoseUpdate:
    """Incremental update: translation in axis units, one world rotation axis, angle.

    ``translation_units`` is dimensionless (multiplied by the drawn axis
    length to get meters); producers are expected to clamp it to the
    configured range (default +-3). The angle must already be wrapped
    into [-180, 180].
    """

    translation_units: np.ndarray
    axis: Axis = Axis.Z
    angle_deg: float = 0.0

    def __post_init__(self):
        object.__setattr__(
            self,
            "translation_units",
            np.asarray(self.translation_units, dtype=np.float64).reshape(3),
        )
        object.__setattr__(self, "axis", Axis(self.axis))
        object.__setattr__(self, "angle_deg", float(self.angle_deg))
        if not math.isfinite(self.angle_deg):
            raise ValueError("angle_deg must be finite")
        if not -180.0 <= self.angle_deg <= 180.0:
            raise ValueError(f"angle_deg must be in [-180, 180], got {self.angle_deg}")

    def rotation(self) -> np.ndarray:
        return single_axis_rotation(self.axis, self.angle_deg)

    @property
    def is_identity(self) -> bool:
        return self.angle_deg == 0.0 and not np.any(self.translation_units)


@dataclass(frozen=True)
class EulerUpdate:
    """Ablation-mode update: three Euler angles applied in x-y-z order."""

    translation_units: np.ndarray
    angles_deg: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(
            self,
            "translation_units",
            np.asarray(self.translation_units, dtype=np.float64).reshape(3),
        )
        object.__setattr__(
            self, "angles_deg", np.asarray(self.angles_deg, dtype=np.float64).reshape(3)
        )

    def rotation(self) -> np.ndarray:
        return euler_xyz_rotation(self.angles_deg)


def apply_motion(
    pose: RigidPose,
    target_vertices_world: np.ndarray,
    rotation: np.ndarray,
    translation_world: np.ndarray,
) -> tuple[RigidPose, np.ndarray]:
    """Rotate about the vertices' AABB center, then translate (world units).

    Returns the new pose and the new world vertices:

        R_new = R @ R_old
        t_new = R (t_old - b) + b + t
        p'    = R (p - b) + b + t

    with ``b`` the center of the current vertices' AABB. The composed
    rotation is re-projected onto SO(3) so that drift stays bounded over
    long chains of updates.
    """
    verts = _as_points(target_vertices_world)
    rot = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    t = np.asarray(translation_world, dtype=np.float64).reshape(3)
    b = aabb_of_points(verts).center

    new_rotation = orthonormalize(rot @ pose.rotation)
    new_translation = rot @ (pose.translation - b) + b + t
    new_vertices = (verts - b) @ rot.T + b + t
    return RigidPose(new_rotation, new_translation), new_vertices


def apply_update(
    pose: RigidPose,
    target_vertices_world: np.ndarray,
    update: PoseUpdate | EulerUpdate,
    axis_len: float,
) -> tuple[RigidPose, np.ndarray]:
    """Apply a proposed update; ``axis_len`` converts axis units to meters."""
    if axis_len <= 0.0:
        raise ValueError(f"axis_len must be > 0, got {axis_len}")
    return apply_motion(
        pose,
        target_vertices_world,
        update.rotation(),
        axis_len * update.translation_units,
    )


def relative_rotation_error(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic distance between two rotations, in degrees, in [0, 180]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cos_theta = (np.trace(a.T @ b) - 1.0) / 2.0
    cos_theta = min(1.0, max(-1.0, cos_theta))
    return math.degrees(math.acos(cos_theta))
