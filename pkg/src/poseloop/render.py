"""Deterministic software rasterizer and image annotation.

Produces the loop's observations: shaded RGB, per-pixel depth, and a
per-pixel object-id buffer (the per-object masks). Rendering is pure
CPU/numpy with no anti-aliasing and fixed rounding so identical inputs
give byte-identical buffers. Pixel (row v, col u) is sampled at
(u + 0.5, v + 0.5).

The two overlays (object-centered axes, labeled 2D boxes) draw on an RGB
copy only; depth and object-id buffers are never modified by them.
"""

from __future__ import annotations

import base64
import hashlib
import io
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from ._font import GLYPH_H, text_mask
from .camera import Camera, view_rotation
from .geometry import Aabb

__all__ = [
    "RenderOutput",
    "AxesOverlaySpec",
    "render",
    "overlay_axes",
    "annotate_objects",
    "write_png",
    "write_mask_png",
    "encode_jpeg_base64",
    "stable_color",
]

BACKGROUND_RGB = (235, 235, 235)
NEAR_PLANE = 1e-2
AXIS_COLORS = {"x": (230, 40, 40), "y": (40, 180, 40), "z": (50, 90, 240)}
_AMBIENT = 0.35


@dataclass(frozen=True)
class RenderOutput:
    """Rasterization result; ``object_id`` indexes into ``id_map`` (-1 = background)."""

    rgb: np.ndarray       # (H, W, 3) uint8
    depth: np.ndarray     # (H, W) float64, +inf at background
    object_id: np.ndarray  # (H, W) int32
    id_map: tuple[str, ...] = field(default_factory=tuple)

    def mask_of(self, object_id: str) -> np.ndarray:
        """Boolean pixel mask of one object (all False if absent/occluded)."""
        if object_id not in self.id_map:
            return np.zeros(self.object_id.shape, dtype=bool)
        return self.object_id == self.id_map.index(object_id)

    def mask_pixel_count(self, object_id: str) -> int:
        return int(self.mask_of(object_id).sum())


@dataclass(frozen=True)
class AxesOverlaySpec:
    """Object-centered coordinate visualization parameters."""

    origin: np.ndarray          # box center the frame is anchored to
    length: float               # drawn axis length
    face_anchored: bool = True  # segments start at AABB face centers

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        if self.length <= 0:
            raise ValueError("axis length must be > 0")


def _edge(ax, ay, bx, by, px, py):
    # Shared with the acceptance brute-force re-test: keep this expression stable.
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _clip_near(poly_view: np.ndarray, znear: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a view-space polygon against z >= znear."""
    out = []
    n = len(poly_view)
    for i in range(n):
        cur = poly_view[i]
        nxt = poly_view[(i + 1) % n]
        cur_in = cur[2] >= znear
        nxt_in = nxt[2] >= znear
        if cur_in:
            out.append(cur)
        if cur_in != nxt_in:
            t = (znear - cur[2]) / (nxt[2] - cur[2])
            out.append(cur + t * (nxt - cur))
    return np.asarray(out).reshape(-1, 3)


def _shade_faces(color, view, faces):
    """Two-sided headlight Lambertian, flat per face; returns (F, 3) colors."""
    v0 = view[faces[:, 0]]
    v1 = view[faces[:, 1]]
    v2 = view[faces[:, 2]]
    e1 = v1 - v0
    e2 = v2 - v0
    normal = np.empty_like(e1)
    normal[:, 0] = e1[:, 1] * e2[:, 2] - e1[:, 2] * e2[:, 1]
    normal[:, 1] = e1[:, 2] * e2[:, 0] - e1[:, 0] * e2[:, 2]
    normal[:, 2] = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    centroid = (v0 + v1 + v2) / 3.0
    nrm = np.sqrt((normal * normal).sum(axis=1))
    dist = np.sqrt((centroid * centroid).sum(axis=1))
    denom = nrm * dist
    dot = np.abs((normal * centroid).sum(axis=1))
    lam = np.where(denom < 1e-15, 1.0, dot / np.where(denom < 1e-15, 1.0, denom))
    level = _AMBIENT + (1.0 - _AMBIENT) * lam
    return np.asarray(color, dtype=np.float64)[None, :] * level[:, None]


def _raster_triangle(rgb, depth, ids, tri_screen, tri_z, color, obj_index, width, height):
    (x0, y0), (x1, y1), (x2, y2) = tri_screen
    area2 = _edge(x1, y1, x2, y2, x0, y0)
    if area2 == 0.0:
        return
    min_x = max(int(math.floor(min(x0, x1, x2) - 0.5)), 0)
    max_x = min(int(math.ceil(max(x0, x1, x2) + 0.5)), width - 1)
    min_y = max(int(math.floor(min(y0, y1, y2) - 0.5)), 0)
    max_y = min(int(math.ceil(max(y0, y1, y2) + 0.5)), height - 1)
    if min_x > max_x or min_y > max_y:
        return
    px = (np.arange(min_x, max_x + 1, dtype=np.float64) + 0.5)[None, :]
    py = (np.arange(min_y, max_y + 1, dtype=np.float64) + 0.5)[:, None]
    e0 = _edge(x1, y1, x2, y2, px, py)
    e1 = _edge(x2, y2, x0, y0, px, py)
    e2 = _edge(x0, y0, x1, y1, px, py)
    if area2 > 0:
        inside = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
    else:
        inside = (e0 <= 0) & (e1 <= 0) & (e2 <= 0)
    if not inside.any():
        return
    # 1/z interpolates linearly in screen space.
    inv_z = e0 / area2 / tri_z[0] + e1 / area2 / tri_z[1] + e2 / area2 / tri_z[2]
    with np.errstate(divide="ignore"):
        z = 1.0 / inv_z
    patch_depth = depth[min_y:max_y + 1, min_x:max_x + 1]
    win = inside & (z > 0) & (z < patch_depth)
    if not win.any():
        return
    patch_depth[win] = z[win]
    ids[min_y:max_y + 1, min_x:max_x + 1][win] = obj_index
    rgb[min_y:max_y + 1, min_x:max_x + 1][win] = color


def _raster_splats(rgb, depth, ids, screen, z, color, obj_index, width, height, radius):
    order = np.lexsort((screen[:, 1], screen[:, 0], z))
    for i in order:
        zi = z[i]
        u = int(math.floor(screen[i, 0]))
        v = int(math.floor(screen[i, 1]))
        r0, r1 = max(v - radius, 0), min(v + radius, height - 1)
        c0, c1 = max(u - radius, 0), min(u + radius, width - 1)
        if r0 > r1 or c0 > c1:
            continue
        patch = depth[r0:r1 + 1, c0:c1 + 1]
        win = zi < patch
        if not win.any():
            continue
        patch[win] = zi
        ids[r0:r1 + 1, c0:c1 + 1][win] = obj_index
        rgb[r0:r1 + 1, c0:c1 + 1][win] = color


def render(scene, camera: Camera, point_radius: int = 2) -> RenderOutput:
    """Z-buffered rasterization of every scene object from one camera.

    Triangles get flat headlight shading; point-cloud objects render as
    square splats of ``point_radius`` pixels. Deterministic: two calls
    with identical inputs produce byte-identical buffers.
    """
    intr, pose = camera
    width, height = intr.width, intr.height
    rgb = np.empty((height, width, 3), dtype=np.float64)
    rgb[:] = np.array(BACKGROUND_RGB, dtype=np.float64) / 255.0
    depth = np.full((height, width), np.inf)
    ids = np.full((height, width), -1, dtype=np.int32)

    rot = view_rotation(pose)
    id_map = tuple(obj.id for obj in scene.objects)
    for obj_index, obj in enumerate(scene.objects):
        view = (obj.vertices - pose.position) @ rot.T
        color = np.asarray(obj.color, dtype=np.float64)
        if obj.is_point_cloud:
            vis = view[:, 2] >= NEAR_PLANE
            if not vis.any():
                continue
            pts = view[vis]
            u = intr.cx + intr.fx * pts[:, 0] / pts[:, 2]
            v = intr.cy + intr.fy * pts[:, 1] / pts[:, 2]
            _raster_splats(rgb, depth, ids, np.column_stack([u, v]), pts[:, 2],
                           color, obj_index, width, height, point_radius)
            continue
        if not len(obj.faces):
            continue
        face_z = view[obj.faces, 2]
        shaded = _shade_faces(color, view, obj.faces)
        # Fast path: per-vertex screen coords reused by every fully-front face.
        with np.errstate(divide="ignore", invalid="ignore"):
            screen_u = intr.cx + intr.fx * view[:, 0] / view[:, 2]
            screen_v = intr.cy + intr.fy * view[:, 1] / view[:, 2]
        all_front = (face_z >= NEAR_PLANE).all(axis=1)
        any_front = (face_z >= NEAR_PLANE).any(axis=1)
        for face_index, face in enumerate(obj.faces):
            if not any_front[face_index]:
                continue
            if all_front[face_index]:
                i0, i1, i2 = face
                _raster_triangle(
                    rgb, depth, ids,
                    ((screen_u[i0], screen_v[i0]), (screen_u[i1], screen_v[i1]),
                     (screen_u[i2], screen_v[i2])),
                    (view[i0, 2], view[i1, 2], view[i2, 2]),
                    shaded[face_index], obj_index, width, height,
                )
                continue
            poly = _clip_near(view[face], NEAR_PLANE)
            if len(poly) < 3:
                continue
            su = intr.cx + intr.fx * poly[:, 0] / poly[:, 2]
            sv = intr.cy + intr.fy * poly[:, 1] / poly[:, 2]
            for a, b in zip(range(1, len(poly) - 1), range(2, len(poly))):
                _raster_triangle(
                    rgb, depth, ids,
                    ((su[0], sv[0]), (su[a], sv[a]), (su[b], sv[b])),
                    (poly[0, 2], poly[a, 2], poly[b, 2]),
                    shaded[face_index], obj_index, width, height,
                )
    rgb8 = np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return RenderOutput(rgb=rgb8, depth=depth, object_id=ids, id_map=id_map)


# ---------------------------------------------------------------------------
# 2D drawing helpers (operate on uint8 RGB arrays in place)
# ---------------------------------------------------------------------------

def _paint(img, v, u, color, thickness):
    h, w = img.shape[:2]
    r = thickness // 2
    r0, r1 = max(v - r, 0), min(v + r, h - 1)
    c0, c1 = max(u - r, 0), min(u + r, w - 1)
    if r0 <= r1 and c0 <= c1:
        img[r0:r1 + 1, c0:c1 + 1] = color


def _draw_line(img, p0, p1, color, thickness=2):
    x0, y0 = p0
    x1, y1 = p1
    steps = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    ts = np.linspace(0.0, 1.0, steps + 1)
    for t in ts:
        u = int(math.floor(x0 + t * (x1 - x0)))
        v = int(math.floor(y0 + t * (y1 - y0)))
        _paint(img, v, u, color, thickness)


def _draw_text(img, top_left, text, color, scale=2):
    mask = text_mask(text, scale=scale)
    if mask.size == 0:
        return
    h, w = img.shape[:2]
    v0, u0 = int(top_left[1]), int(top_left[0])
    mh, mw = mask.shape
    r0, c0 = max(v0, 0), max(u0, 0)
    r1, c1 = min(v0 + mh, h), min(u0 + mw, w)
    if r0 >= r1 or c0 >= c1:
        return
    sub = mask[r0 - v0:r1 - v0, c0 - u0:c1 - u0]
    region = img[r0:r1, c0:c1]
    region[sub] = color


def _draw_rect(img, row0, col0, row1, col1, color, thickness=2):
    for t in range(thickness):
        r0, r1 = row0 + t, row1 - t
        c0, c1 = col0 + t, col1 - t
        if r0 > r1 or c0 > c1:
            break
        h, w = img.shape[:2]
        rr0, rr1 = max(r0, 0), min(r1, h - 1)
        cc0, cc1 = max(c0, 0), min(c1, w - 1)
        if 0 <= r0 < h:
            img[r0, cc0:cc1 + 1] = color
        if 0 <= r1 < h:
            img[r1, cc0:cc1 + 1] = color
        if 0 <= c0 < w:
            img[rr0:rr1 + 1, c0] = color
        if 0 <= c1 < w:
            img[rr0:rr1 + 1, c1] = color


def _clip_segment_near(p0_view, p1_view, znear=NEAR_PLANE):
    z0, z1 = p0_view[2], p1_view[2]
    if z0 < znear and z1 < znear:
        return None
    a, b = p0_view.copy(), p1_view.copy()
    if z0 < znear:
        t = (znear - z0) / (z1 - z0)
        a = p0_view + t * (p1_view - p0_view)
    elif z1 < znear:
        t = (znear - z1) / (z0 - z1)
        b = p1_view + t * (p0_view - p1_view)
    return a, b


def overlay_axes(img: RenderOutput, camera: Camera, spec: AxesOverlaySpec,
                 target_box: Aabb) -> np.ndarray:
    """Draw the object-centered +x/+y/+z axes on an RGB copy (no depth test).

    Each axis runs outward from the center of the corresponding box face
    (or from ``spec.origin`` when ``face_anchored`` is off) with length
    ``spec.length``; labels and arrowheads are drawn in 2D after
    projection. An axis whose segment lies fully behind the camera is
    omitted.
    """
    intr, pose = camera
    out = img.rgb.copy()
    rot = view_rotation(pose)
    center = target_box.center

    def to_view(p):
        return rot @ (np.asarray(p, dtype=np.float64) - pose.position)

    def to_screen(p_view):
        return (
            intr.cx + intr.fx * p_view[0] / p_view[2],
            intr.cy + intr.fy * p_view[1] / p_view[2],
        )

    for axis_idx, axis_name in enumerate("xyz"):
        unit = np.zeros(3)
        unit[axis_idx] = 1.0
        if spec.face_anchored:
            start = center.copy()
            start[axis_idx] = target_box.max[axis_idx]
        else:
            start = spec.origin.copy()
        end = start + spec.length * unit
        clipped = _clip_segment_near(to_view(start), to_view(end))
        if clipped is None:
            continue
        p0 = np.array(to_screen(clipped[0]))
        p1 = np.array(to_screen(clipped[1]))
        color = AXIS_COLORS[axis_name]
        _draw_line(out, p0, p1, color, thickness=2)
        direction = p1 - p0
        norm = np.linalg.norm(direction)
        if norm > 1e-9:
            d = direction / norm
            side = np.array([-d[1], d[0]])
            for s in (+1, -1):
                tip = p1 - 6.0 * d + 3.0 * s * side
                _draw_line(out, p1, tip, color, thickness=2)
            label_anchor = p1 + 5.0 * d
        else:
            label_anchor = p1 + np.array([4.0, -4.0])
        _draw_text(out, (label_anchor[0], label_anchor[1] - GLYPH_H),
                   f"+{axis_name}", color, scale=2)
    return out


def stable_color(object_id: str) -> tuple[int, int, int]:
    """Deterministic saturated RGB derived from the object id."""
    digest = hashlib.sha256(object_id.encode("utf-8")).digest()
    hue = digest[0] / 255.0
    # HSV (hue, 0.85, 0.9) -> RGB
    h6 = hue * 6.0
    i = int(h6) % 6
    f = h6 - int(h6)
    v, s = 0.9, 0.85
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    r, g, b = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return tuple(int(c * 255 + 0.5) for c in (r, g, b))


def annotate_objects(img: RenderOutput, labels: dict[str, str]) -> np.ndarray:
    """Draw a tight 2D box + label for every object visible in the id buffer."""
    out = img.rgb.copy()
    for index, object_id in enumerate(img.id_map):
        mask = img.object_id == index
        if not mask.any():
            continue
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        r0, r1 = int(rows[0]), int(rows[-1])
        c0, c1 = int(cols[0]), int(cols[-1])
        color = stable_color(object_id)
        _draw_rect(out, r0, c0, r1, c1, color, thickness=2)
        text = labels.get(object_id, object_id)
        t_mask = text_mask(text, scale=2)
        tv = r0 - t_mask.shape[0] - 2
        if tv < 0:
            tv = r0 + 3
        backing_r1 = min(tv + t_mask.shape[0] + 1, out.shape[0] - 1)
        backing_c1 = min(c0 + t_mask.shape[1] + 1, out.shape[1] - 1)
        out[max(tv - 1, 0):backing_r1 + 1, max(c0 - 1, 0):backing_c1 + 1] = (32, 32, 32)
        _draw_text(out, (c0, tv), text, color, scale=2)
    return out


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def write_png(image: np.ndarray, path) -> None:
    """Write an (H, W, 3) uint8 array as PNG."""
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")


def write_mask_png(output: RenderOutput, path) -> None:
    """Write the object-id buffer as an indexed PNG (background = index 0)."""
    indexed = (output.object_id + 1).astype(np.uint8)
    img = Image.fromarray(indexed, mode="P")
    palette = [0, 0, 0]
    for object_id in output.id_map:
        palette.extend(stable_color(object_id))
    palette.extend([0] * (768 - len(palette)))
    img.putpalette(palette[:768])
    img.save(path, format="PNG")


def encode_jpeg_base64(image: np.ndarray, quality: int = 90) -> str:
    """JPEG-encode an RGB array and return standard base64 text."""
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(
        buf, format="JPEG", quality=quality
    )
    return base64.b64encode(buf.getvalue()).decode("ascii")
