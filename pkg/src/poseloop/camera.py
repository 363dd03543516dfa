"""Pinhole cameras and the circular multi-view rig.

The rig places K equally spaced cameras on a circle around a framing
center so that the framed box's bounding sphere stays well inside every
image. Azimuth 0 puts the camera on the world +x side of the center
(the "front" view) and azimuth grows counterclockwise about +z.

View-space convention is the usual CV one: x right, y down, z forward;
``project`` returns pixel coordinates plus view-space depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import Aabb, aabb_of_points

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "Camera",
    "CameraRig",
    "frame_aabb",
    "scene_overview_rig",
    "project",
    "project_points",
    "view_rotation",
]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default_for(cls, width: int, height: int, focal_scale: float = 1.2) -> "CameraIntrinsics":
        f = focal_scale * min(width, height)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


@dataclass(frozen=True)
class CameraPose:
    """Extrinsics as position / look-at / up, all in world coordinates."""

    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "look_at", np.asarray(self.look_at, dtype=np.float64).reshape(3))
        object.__setattr__(self, "up", np.asarray(self.up, dtype=np.float64).reshape(3))
        forward = self.look_at - self.position
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise ValueError("camera position and look_at coincide")
        if np.linalg.norm(np.cross(forward / norm, self.up)) < 1e-12:
            raise ValueError("up vector is parallel to the view direction")

    @classmethod
    def from_matrix(cls, camera_to_world: np.ndarray) -> "CameraPose":
        """Build from a 4x4 camera-to-world matrix (columns: right, down, forward)."""
        m = np.asarray(camera_to_world, dtype=np.float64).reshape(4, 4)
        position = m[:3, 3]
        forward = m[:3, 2]
        up = -m[:3, 1]
        return cls(position=position, look_at=position + forward, up=up)

    def to_matrix(self) -> np.ndarray:
        """4x4 camera-to-world matrix."""
        rot = view_rotation(self)
        m = np.eye(4)
        m[:3, :3] = rot.T  # columns: right, down, forward
        m[:3, 3] = self.position
        return m


class Camera(NamedTuple):
    """One rig entry: intrinsics + extrinsics."""

    intrinsics: CameraIntrinsics
    pose: CameraPose


def view_rotation(pose: CameraPose) -> np.ndarray:
    """World-to-view rotation; rows are the right/down/forward axes."""
    forward = pose.look_at - pose.position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, pose.up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.vstack([right, down, forward])


def project_points(points: np.ndarray, camera: Camera) -> np.ndarray:
    """Project (N, 3) world points; returns (N, 3) of (u, v, depth).

    Depth is view-space z; points with depth <= 0 are behind the camera
    and their (u, v) values are not meaningful.
    """
    intr, pose = camera
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rot = view_rotation(pose)
    view = (pts - pose.position) @ rot.T
    z = view[:, 2]
    safe_z = np.where(np.abs(z) < 1e-300, 1e-300, z)
    u = intr.cx + intr.fx * view[:, 0] / safe_z
    v = intr.cy + intr.fy * view[:, 1] / safe_z
    return np.column_stack([u, v, z])


def project(point, camera: Camera) -> tuple[float, float, float]:
    """Project one world point to (u, v, depth)."""
    u, v, z = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), camera)[0]
    return float(u), float(v), float(z)


@dataclass(frozen=True)
class CameraRig:
    """K cameras on a circle, all looking at ``center``."""

    cameras: tuple[Camera, ...]
    center: np.ndarray
    radius: float
    elevation_deg: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if len(self.cameras) < 1:
            raise ValueError("a rig needs at least one camera")

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def azimuths_deg(self) -> np.ndarray:
        k = len(self.cameras)
        return np.array([360.0 * i / k for i in range(k)])


def _orbit_camera(
    center: np.ndarray,
    radius: float,
    azimuth_deg: float,
    elevation_deg: float,
    intrinsics: CameraIntrinsics,
) -> Camera:
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    offset = np.array(
        [
            math.cos(el) * math.cos(az),
            math.cos(el) * math.sin(az),
            math.sin(el),
        ]
    )
    pose = CameraPose(
        position=center + radius * offset,
        look_at=center,
        up=np.array([0.0, 0.0, 1.0]),
    )
    return Camera(intrinsics, pose)


def _fit_radius(sphere_radius: float, intrinsics: CameraIntrinsics, margin: float) -> float:
    # Keep the bounding sphere within margin * min(w, h)/2 pixels of the
    # principal point: max offset of a sphere at distance d is
    # f * tan(asin(s/d)), solved in closed form for d.
    if sphere_radius < 1e-12:
        return 1.0
    f = max(intrinsics.fx, intrinsics.fy)
    allowed = margin * min(intrinsics.width, intrinsics.height) / 2.0
    t = allowed / f
    return sphere_radius * math.sqrt(1.0 + t * t) / t


def _corners_in_frame(box: Aabb, cameras) -> bool:
    corners = box.corners()
    for cam in cameras:
        uvz = project_points(corners, cam)
        intr = cam.intrinsics
        ok = (
            (uvz[:, 2] > 0)
            & (uvz[:, 0] > 0)
            & (uvz[:, 0] < intr.width - 1)
            & (uvz[:, 1] > 0)
            & (uvz[:, 1] < intr.height - 1)
        )
        if not ok.all():
            return False
    return True


def frame_aabb(
    box: Aabb,
    intrinsics: CameraIntrinsics,
    k: int = 4,
    elevation_deg: float = 30.0,
    margin: float = 0.9,
) -> CameraRig:
    """Fit a K-camera circular rig so the whole box stays in frame.

    The circle radius is the smallest distance at which the box's
    bounding sphere projects within ``margin * min(width, height) / 2``
    pixels of the principal point; the 8 corners are then verified by
    projection (the sphere bound is sufficient, so the verification is a
    safety net that doubles the radius once if it ever fails).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 < margin <= 1.0:
        raise ValueError("margin must be in (0, 1]")
    center = box.center
    sphere_radius = box.diagonal / 2.0
    radius = _fit_radius(sphere_radius, intrinsics, margin)

    def build(r):
        return tuple(
            _orbit_camera(center, r, 360.0 * i / k, elevation_deg, intrinsics)
            for i in range(k)
        )

    cameras = build(radius)
    if not _corners_in_frame(box, cameras):
        radius *= 2.0
        cameras = build(radius)
    return CameraRig(cameras=cameras, center=center, radius=radius, elevation_deg=elevation_deg)


def scene_overview_rig(scene, intrinsics: CameraIntrinsics, k: int = 4,
                       elevation_deg: float = 30.0, margin: float = 0.9) -> CameraRig:
    """Rig framing the AABB of every object in the scene."""
    all_vertices = np.vstack([obj.vertices for obj in scene.objects])
    return frame_aabb(aabb_of_points(all_vertices), intrinsics, k, elevation_deg, margin)
