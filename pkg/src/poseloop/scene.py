"""Scene representation, manifest/OBJ ingestion, and RGB-D preprocessing.

A scene is a list of objects plus the target's pose. Target vertices are
kept in two forms once roles are assigned: a canonical copy frozen at
assignment time, and the current world vertices, related by

    world = R @ canonical + t

Related/Other objects never move, so their vertices are world
coordinates outright.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .camera import CameraIntrinsics, CameraPose
from .errors import (
    EmptyObject,
    EmptyPointSet,
    ManifestError,
    MissingAsset,
    RoleConflict,
    RolesUnassigned,
    UnknownObjectId,
)
from .geometry import Aabb, RigidPose, aabb_of_points

__all__ = [
    "Role",
    "SceneObject",
    "SceneState",
    "RgbdFrame",
    "load_scene_manifest",
    "save_scene_manifest",
    "load_rgbd_bundle",
    "save_rgbd_bundle",
    "lift_rgbd",
    "remove_outliers",
    "assign_roles",
]


class Role(str, Enum):
    TARGET = "target"
    RELATED = "related"
    OTHER = "other"
    UNASSIGNED = "unassigned"


@dataclass(frozen=True)
class SceneObject:
    """One object: mesh (faces non-empty) or point cloud (faces empty)."""

    id: str
    label: str
    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    role: Role = Role.UNASSIGNED
    color: tuple[float, float, float] = (0.6, 0.6, 0.6)

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if verts.shape[0] < 1:
            raise ValueError(f"object '{self.id}' has no vertices")
        if faces.size and (faces.min() < 0 or faces.max() >= verts.shape[0]):
            raise ValueError(f"object '{self.id}' has face indices out of bounds")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "color", tuple(float(c) for c in self.color))

    @property
    def is_point_cloud(self) -> bool:
        return self.faces.size == 0

    def aabb(self) -> Aabb:
        return aabb_of_points(self.vertices)


@dataclass(frozen=True)
class SceneState:
    """Immutable scene snapshot; updates return new states."""

    objects: tuple[SceneObject, ...]
    target_pose: RigidPose = field(default_factory=RigidPose.identity)
    target_canonical_vertices: np.ndarray | None = None
    iteration: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique within a scene")
        if self.target_canonical_vertices is not None:
            object.__setattr__(
                self,
                "target_canonical_vertices",
                np.asarray(self.target_canonical_vertices, dtype=np.float64).reshape(-1, 3),
            )

    def object_by_id(self, object_id: str) -> SceneObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise UnknownObjectId(f"no object with id '{object_id}'")

    @property
    def ids(self) -> list[str]:
        return [o.id for o in self.objects]

    @property
    def labels(self) -> dict[str, str]:
        return {o.id: o.label for o in self.objects}

    @property
    def roles_assigned(self) -> bool:
        return any(o.role is Role.TARGET for o in self.objects)

    @property
    def target(self) -> SceneObject:
        for obj in self.objects:
            if obj.role is Role.TARGET:
                return obj
        raise RolesUnassigned("scene has no target object; run assign_roles first")

    @property
    def related(self) -> list[SceneObject]:
        return [o for o in self.objects if o.role is Role.RELATED]

    @property
    def others(self) -> list[SceneObject]:
        return [o for o in self.objects if o.role is Role.OTHER]

    def target_aabb(self) -> Aabb:
        return self.target.aabb()

    def focus_aabb(self) -> Aabb:
        """AABB of the target plus all related objects (the framing box)."""
        pts = np.vstack([self.target.vertices] + [o.vertices for o in self.related])
        return aabb_of_points(pts)

    def with_target_state(
        self, pose: RigidPose, world_vertices: np.ndarray, iteration: int | None = None
    ) -> "SceneState":
        """New state with the target moved; every other object is untouched."""
        target_id = self.target.id
        new_objects = tuple(
            dataclasses.replace(o, vertices=world_vertices) if o.id == target_id else o
            for o in self.objects
        )
        return dataclasses.replace(
            self,
            objects=new_objects,
            target_pose=pose,
            iteration=self.iteration + 1 if iteration is None else iteration,
        )


def assign_roles(scene: SceneState, target_id: str, related_ids) -> SceneState:
    """Set roles and canonicalize the target at its current placement.

    The target's canonical vertices become its current world vertices and
    its pose resets to (identity, zero); everything not named becomes
    Other.
    """
    related_ids = list(related_ids)
    if target_id in related_ids:
        raise RoleConflict(f"target '{target_id}' also listed as related")
    if len(set(related_ids)) != len(related_ids):
        raise RoleConflict("duplicate ids in related set")
    known = set(scene.ids)
    for oid in [target_id, *related_ids]:
        if oid not in known:
            raise UnknownObjectId(f"no object with id '{oid}'")

    def role_of(obj):
        if obj.id == target_id:
            return Role.TARGET
        if obj.id in related_ids:
            return Role.RELATED
        return Role.OTHER

    new_objects = tuple(dataclasses.replace(o, role=role_of(o)) for o in scene.objects)
    target = next(o for o in new_objects if o.id == target_id)
    return dataclasses.replace(
        scene,
        objects=new_objects,
        target_pose=RigidPose.identity(),
        target_canonical_vertices=target.vertices.copy(),
    )


# ---------------------------------------------------------------------------
# Mesh-scene manifests
# ---------------------------------------------------------------------------

def _parse_obj(path: Path) -> tuple[np.ndarray, np.ndarray]:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise MissingAsset(path) from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise ManifestError(f"{path}:{lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: bad vertex: {line!r}") from exc
        elif parts[0] == "f":
            if len(parts) < 4:
                raise ManifestError(f"{path}:{lineno}: face needs >= 3 indices")
            try:
                idx = [int(p.split("/")[0]) for p in parts[1:]]
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: bad face: {line!r}") from exc
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for a, b in zip(idx[1:-1], idx[2:]):  # fan-triangulate polygons
                faces.append([idx[0], a, b])
        # other records (vt, vn, usemtl, ...) are ignored
    if not verts:
        raise ManifestError(f"{path}: no vertices found")
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def _normalize_color(value) -> tuple[float, float, float]:
    rgb = [float(c) for c in value]
    if len(rgb) != 3:
        raise ManifestError(f"color must have 3 components, got {value!r}")
    if max(rgb) > 1.0:  # 0-255 convention
        rgb = [c / 255.0 for c in rgb]
    return tuple(min(1.0, max(0.0, c)) for c in rgb)


def load_scene_manifest(path) -> SceneState:
    """Load a JSON scene manifest referencing OBJ meshes.

    Format: ``{"objects": [{"id", "label", "mesh", "color"}], "units": "m"}``;
    mesh paths are resolved relative to the manifest file.
    """
    path = Path(path)
    if not path.exists():
        raise MissingAsset(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict) or "objects" not in data:
        raise ManifestError(f"{path}: manifest must be an object with an 'objects' list")
    objects = []
    for entry in data["objects"]:
        try:
            oid = str(entry["id"])
            mesh_rel = entry["mesh"]
        except (TypeError, KeyError) as exc:
            raise ManifestError(f"{path}: object entry missing 'id'/'mesh': {entry!r}") from exc
        mesh_path = (path.parent / mesh_rel).resolve()
        if not mesh_path.exists():
            raise MissingAsset(mesh_path)
        verts, faces = _parse_obj(mesh_path)
        objects.append(
            SceneObject(
                id=oid,
                label=str(entry.get("label", oid)),
                vertices=verts,
                faces=faces,
                color=_normalize_color(entry.get("color", (153, 153, 153))),
            )
        )
    if not objects:
        raise ManifestError(f"{path}: manifest lists no objects")
    return SceneState(objects=tuple(objects))


def save_scene_manifest(scene: SceneState, out_dir) -> Path:
    """Write manifest.json plus one OBJ per object; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for obj in scene.objects:
        obj_path = out_dir / f"{obj.id}.obj"
        lines = [f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in obj.vertices]
        lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in obj.faces]
        obj_path.write_text("\n".join(lines) + "\n")
        entries.append(
            {
                "id": obj.id,
                "label": obj.label,
                "mesh": obj_path.name,
                "color": [round(c * 255) for c in obj.color],
            }
        )
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"objects": entries, "units": "m"}, indent=2) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# RGB-D bundles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RgbdFrame:
    """One RGB-D observation plus per-object segmentation masks."""

    color: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float64, meters, 0 = invalid
    intrinsics: CameraIntrinsics
    camera_pose: np.ndarray  # 4x4 camera-to-world
    masks: dict[str, np.ndarray]  # id -> (H, W) bool
    labels: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        h, w = self.depth.shape
        if self.color.shape[:2] != (h, w):
            raise ManifestError("color and depth dimensions differ")
        for oid, mask in self.masks.items():
            if mask.shape != (h, w):
                raise ManifestError(f"mask '{oid}' dimensions differ from depth")
        if (np.asarray(self.depth) < 0).any():
            raise ManifestError("depth must be >= 0 (0 marks invalid pixels)")


def load_rgbd_bundle(path) -> RgbdFrame:
    """Load a bundle directory: color.png, depth.png (16-bit), intrinsics.json,
    masks/<object-id>.png, labels.json."""
    path = Path(path)
    for name in ("color.png", "depth.png", "intrinsics.json"):
        if not (path / name).exists():
            raise MissingAsset(path / name)
    try:
        meta = json.loads((path / "intrinsics.json").read_text())
        intr = CameraIntrinsics(
            fx=float(meta["fx"]), fy=float(meta["fy"]),
            cx=float(meta["cx"]), cy=float(meta["cy"]),
            width=int(meta["width"]), height=int(meta["height"]),
        )
        camera_pose = np.asarray(meta["camera_pose"], dtype=np.float64).reshape(4, 4)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path / 'intrinsics.json'}: {exc}") from exc
    depth_scale = float(meta.get("depth_scale", 0.001))  # 16-bit millimeters by default

    color = np.asarray(Image.open(path / "color.png").convert("RGB"), dtype=np.uint8)
    depth_raw = np.asarray(Image.open(path / "depth.png"), dtype=np.float64)
    depth = depth_raw * depth_scale

    labels = {}
    labels_path = path / "labels.json"
    if labels_path.exists():
        labels = {str(k): str(v) for k, v in json.loads(labels_path.read_text()).items()}

    masks = {}
    masks_dir = path / "masks"
    if masks_dir.is_dir():
        for mask_path in sorted(masks_dir.glob("*.png")):
            mask = np.asarray(Image.open(mask_path), dtype=np.int64)
            if mask.ndim == 3:
                mask = mask.max(axis=2)
            masks[mask_path.stem] = mask > 0
    if not masks:
        raise ManifestError(f"{path}: bundle has no masks/*.png")
    return RgbdFrame(color=color, depth=depth, intrinsics=intr,
                     camera_pose=camera_pose, masks=masks, labels=labels)


def save_rgbd_bundle(path, color, depth_m, intrinsics: CameraIntrinsics,
                     camera_pose: np.ndarray, masks: dict, labels: dict | None = None,
                     depth_scale: float = 0.001) -> Path:
    """Write a bundle directory (depth quantized to 16-bit units of ``depth_scale``)."""
    path = Path(path)
    (path / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(color, dtype=np.uint8)).save(path / "color.png")
    depth = np.asarray(depth_m, dtype=np.float64).copy()
    depth[~np.isfinite(depth)] = 0.0
    depth_raw = np.clip(np.rint(depth / depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(depth_raw).save(path / "depth.png")
    meta = {
        "fx": intrinsics.fx, "fy": intrinsics.fy,
        "cx": intrinsics.cx, "cy": intrinsics.cy,
        "width": intrinsics.width, "height": intrinsics.height,
        "camera_pose": np.asarray(camera_pose, dtype=np.float64).reshape(4, 4).tolist(),
        "depth_scale": depth_scale,
    }
    (path / "intrinsics.json").write_text(json.dumps(meta, indent=2) + "\n")
    for oid, mask in masks.items():
        Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(
            path / "masks" / f"{oid}.png"
        )
    (path / "labels.json").write_text(json.dumps(labels or {}, indent=2) + "\n")
    return path


def remove_outliers(points, k: int = 16, std_ratio: float = 2.0) -> np.ndarray:
    """Statistical outlier removal on mean k-nearest-neighbor distance.

    Drops points whose mean kNN distance exceeds the global mean plus
    ``std_ratio`` standard deviations. Never drops everything: if the
    filter would, the input comes back unchanged.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if k < 1:
        raise ValueError("k must be >= 1")
    if pts.shape[0] == 0:
        raise EmptyPointSet("cannot filter an empty point set")
    n = pts.shape[0]
    if n <= 2:
        return pts.copy()
    k_eff = min(k, n - 1)
    tree = cKDTree(pts)
    dists, _ = tree.query(pts, k=k_eff + 1)  # first neighbor is the point itself
    mean_dist = dists[:, 1:].mean(axis=1)
    threshold = mean_dist.mean() + std_ratio * mean_dist.std()
    # Perfectly homogeneous clusters have std ~ 0 with distances differing
    # only in the last ulp; the relative guard keeps those intact.
    keep = mean_dist <= threshold + 1e-12 * mean_dist.mean()
    if not keep.any():
        return pts.copy()
    return pts[keep]


def lift_rgbd(frame: RgbdFrame, k: int = 16, std_ratio: float = 2.0,
              outlier_removal: bool = True) -> SceneState:
    """Back-project masked valid-depth pixels into one point-cloud object per mask.

    Camera-frame coordinates are ``X=(u-cx)d/fx, Y=(v-cy)d/fy, Z=d``,
    then mapped to world through the frame's camera pose. Each object's
    color is the mean color of its masked pixels.
    """
    intr = frame.intrinsics
    h, w = frame.depth.shape
    vv, uu = np.mgrid[0:h, 0:w]
    pose = frame.camera_pose
    objects = []
    for oid in sorted(frame.masks):
        mask = frame.masks[oid] & (frame.depth > 0)
        if not mask.any():
            raise EmptyObject(oid)
        d = frame.depth[mask]
        u = uu[mask].astype(np.float64)
        v = vv[mask].astype(np.float64)
        cam_pts = np.column_stack(
            [(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d]
        )
        world = cam_pts @ pose[:3, :3].T + pose[:3, 3]
        if outlier_removal:
            world = remove_outliers(world, k=k, std_ratio=std_ratio)
        color = frame.color[mask].mean(axis=0) / 255.0
        objects.append(
            SceneObject(
                id=oid,
                label=frame.labels.get(oid, oid),
                vertices=world,
                color=tuple(color),
            )
        )
    return SceneState(objects=tuple(objects))
