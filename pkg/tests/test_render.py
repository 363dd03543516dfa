"""Renderer oracles: manual rasterization, occlusion by construction, overlays."""

import base64
import io

import numpy as np
import pytest
from PIL import Image

from poseloop.camera import Camera, CameraIntrinsics, CameraPose
from poseloop.geometry import Aabb
from poseloop.meshes import box_mesh, cylinder_mesh, wedge_mesh
from poseloop.render import (
    AxesOverlaySpec,
    RenderOutput,
    annotate_objects,
    encode_jpeg_base64,
    overlay_axes,
    render,
    stable_color,
    write_png,
)
from poseloop.scene import SceneObject, SceneState


def reference_render_ids(scene, camera):
    """Independent per-pixel re-test: loop every pixel against every triangle.

    Mirrors the renderer's sampling convention (pixel centers at +0.5,
    inclusive edge test, 1/z interpolation) with plain scalar loops.
    """
    intr, pose = camera
    fwd = pose.look_at - pose.position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, pose.up)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)

    tris = []  # (obj_index, screen triple, z triple)
    for obj_index, obj in enumerate(scene.objects):
        view = np.stack(
            [
                (obj.vertices - pose.position) @ right,
                (obj.vertices - pose.position) @ down,
                (obj.vertices - pose.position) @ fwd,
            ],
            axis=1,
        )
        for face in obj.faces:
            tri = view[face]
            assert (tri[:, 2] >= 1e-2).all(), "reference assumes no near clipping"
            su = intr.cx + intr.fx * tri[:, 0] / tri[:, 2]
            sv = intr.cy + intr.fy * tri[:, 1] / tri[:, 2]
            tris.append((obj_index, list(zip(su, sv)), list(tri[:, 2])))

    def edge(ax, ay, bx, by, px, py):
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax)

    ids = np.full((intr.height, intr.width), -1, dtype=np.int32)
    depth = np.full((intr.height, intr.width), np.inf)
    for row in range(intr.height):
        py = row + 0.5
        for col in range(intr.width):
            px = col + 0.5
            for obj_index, pts, zs in tris:
                (x0, y0), (x1, y1), (x2, y2) = pts
                area2 = edge(x1, y1, x2, y2, x0, y0)
                if area2 == 0.0:
                    continue
                e0 = edge(x1, y1, x2, y2, px, py)
                e1 = edge(x2, y2, x0, y0, px, py)
                e2 = edge(x0, y0, x1, y1, px, py)
                if area2 > 0:
                    if not (e0 >= 0 and e1 >= 0 and e2 >= 0):
                        continue
                elif not (e0 <= 0 and e1 <= 0 and e2 <= 0):
                    continue
                z = 1.0 / (e0 / area2 / zs[0] + e1 / area2 / zs[1] + e2 / area2 / zs[2])
                if 0 < z < depth[row, col]:
                    depth[row, col] = z
                    ids[row, col] = obj_index
    return ids, depth


SMALL_INTR = CameraIntrinsics(fx=60.0, fy=60.0, cx=32.0, cy=32.0, width=64, height=64)


def front_camera(distance=2.0, intr=SMALL_INTR):
    return Camera(intr, CameraPose((distance, 0, 0), (0, 0, 0), (0, 0, 1)))


def quad_facing_x(x_plane, half=0.5, center_yz=(0.0, 0.0)):
    cy, cz = center_yz
    verts = np.array(
        [
            [x_plane, cy - half, cz - half],
            [x_plane, cy + half, cz - half],
            [x_plane, cy + half, cz + half],
            [x_plane, cy - half, cz + half],
        ]
    )
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return verts, faces


class TestRenderBasics:
    def test_empty_scene(self):
        scene = SceneState(objects=(SceneObject("p", "p", np.array([[10.0, 0, 0]])),))
        cam = front_camera()  # splat behind the camera: nothing rendered
        out = render(scene, cam)
        assert (out.object_id == -1).all()
        assert np.isinf(out.depth).all()
        assert (out.rgb == out.rgb[0, 0]).all()

    def test_center_triangle_hit(self):
        verts = np.array([[0.0, -0.5, -0.4], [0.0, 0.5, -0.4], [0.0, 0.0, 0.6]])
        scene = SceneState(objects=(SceneObject("tri", "tri", verts, np.array([[0, 1, 2]])),))
        out = render(scene, front_camera())
        h, w = SMALL_INTR.height, SMALL_INTR.width
        assert out.object_id[h // 2, w // 2] == 0
        assert out.depth[h // 2, w // 2] == pytest.approx(2.0, abs=1e-9)

    def test_two_plane_occlusion(self):
        near_v, near_f = quad_facing_x(1.0, half=0.4)  # depth 1 from camera at x=2
        far_v, far_f = quad_facing_x(0.0, half=1.0)    # depth 2, wider in projection
        scene = SceneState(
            objects=(
                SceneObject("far", "far", far_v, far_f),
                SceneObject("near", "near", near_v, near_f),
            )
        )
        out = render(scene, front_camera())
        # Everywhere the near plane covers, it must own the pixel.
        near_region = out.depth < 1.5
        assert near_region.any()
        assert (out.object_id[near_region] == 1).all()
        # The far plane is bigger in projection; it survives around the edges.
        assert (out.object_id == 0).any()

    def test_determinism(self):
        rng = np.random.default_rng(0)
        for _ in range(3):
            verts, faces = box_mesh(rng.uniform(0.2, 0.6, 3))
            scene = SceneState(objects=(SceneObject("b", "b", verts, faces, color=(0.8, 0.3, 0.2)),))
            cam = front_camera(2.5)
            a = render(scene, cam)
            b = render(scene, cam)
            assert a.rgb.tobytes() == b.rgb.tobytes()
            assert a.depth.tobytes() == b.depth.tobytes()
            assert a.object_id.tobytes() == b.object_id.tobytes()

    def test_id_depth_consistency(self):
        verts, faces = box_mesh((0.5, 0.5, 0.5))
        scene = SceneState(objects=(SceneObject("b", "b", verts, faces),))
        out = render(scene, front_camera())
        assert (np.isfinite(out.depth) == (out.object_id >= 0)).all()

    def test_matches_reference_rasterizer(self):
        rng = np.random.default_rng(12)
        for _ in range(6):
            objs = []
            for i, maker in enumerate((box_mesh, wedge_mesh)):
                verts, faces = maker(rng.uniform(0.2, 0.7, 3),
                                     center=rng.uniform(-0.3, 0.3, 3))
                objs.append(SceneObject(f"o{i}", f"o{i}", verts, faces))
            scene = SceneState(objects=tuple(objs))
            cam = front_camera(distance=float(rng.uniform(2.0, 4.0)))
            out = render(scene, cam)
            ref_ids, ref_depth = reference_render_ids(scene, cam)
            assert np.array_equal(out.object_id, ref_ids)
            both = np.isfinite(ref_depth)
            assert np.abs(out.depth[both] - ref_depth[both]).max() < 1e-9

    def test_point_splats(self):
        scene = SceneState(objects=(SceneObject("pt", "pt", np.array([[0.0, 0.0, 0.0]])),))
        out = render(scene, front_camera(), point_radius=2)
        h, w = SMALL_INTR.height, SMALL_INTR.width
        patch = out.object_id[h // 2 - 2:h // 2 + 3, w // 2 - 2:w // 2 + 3]
        assert (patch == 0).all()
        assert out.mask_pixel_count("pt") == 25
        assert out.depth[h // 2, w // 2] == pytest.approx(2.0, abs=1e-12)

    def test_splat_occluded_by_triangle(self):
        near_v, near_f = quad_facing_x(1.0)
        scene = SceneState(
            objects=(
                SceneObject("pt", "pt", np.array([[0.0, 0.0, 0.0]])),
                SceneObject("wall", "wall", near_v, near_f),
            )
        )
        out = render(scene, front_camera())
        assert out.mask_pixel_count("pt") == 0


class TestOverlayAxes:
    def scene_box_output(self, length=0.5, distance=3.0):
        verts, faces = box_mesh((0.6, 0.6, 0.6))
        scene = SceneState(objects=(SceneObject("b", "b", verts, faces),))
        cam = front_camera(distance)
        out = render(scene, cam)
        box = Aabb([-0.3, -0.3, -0.3], [0.3, 0.3, 0.3])
        spec = AxesOverlaySpec(origin=box.center, length=length)
        return out, cam, spec, box

    def test_buffers_untouched(self):
        out, cam, spec, box = self.scene_box_output()
        depth_before = out.depth.tobytes()
        ids_before = out.object_id.tobytes()
        rgb_before = out.rgb.tobytes()
        _ = overlay_axes(out, cam, spec, box)
        assert out.depth.tobytes() == depth_before
        assert out.object_id.tobytes() == ids_before
        assert out.rgb.tobytes() == rgb_before

    def test_axis_length_projection_doubles(self):
        # From the +x front view, the +z axis runs parallel to the image
        # plane, so doubling L doubles the projected segment (pinhole linearity).
        from poseloop.camera import project

        out, cam, spec1, box = self.scene_box_output(length=0.25)
        spec2 = AxesOverlaySpec(origin=spec1.origin, length=0.5)
        start = np.array([0.0, 0.0, 0.3])
        _, v0, _ = project(start, cam)
        _, v1, _ = project(start + [0, 0, 0.25], cam)
        _, v2, _ = project(start + [0, 0, 0.5], cam)
        assert abs((v0 - v2) - 2 * (v0 - v1)) < 1.0
        img1 = overlay_axes(out, cam, spec1, box)
        img2 = overlay_axes(out, cam, spec2, box)
        assert not np.array_equal(img1, img2)

    def test_locality(self):
        # Changed pixels stay near the projected segments/arrowheads/labels.
        from poseloop.camera import project

        out, cam, spec, box = self.scene_box_output()
        over = overlay_axes(out, cam, spec, box)
        diff = np.argwhere((over != out.rgb).any(axis=2))
        assert diff.size > 0
        boxes = []
        for axis_idx in range(3):
            start = box.center.copy()
            start[axis_idx] = box.max[axis_idx]
            end = start.copy()
            end[axis_idx] += spec.length
            u0, v0, _ = project(start, cam)
            u1, v1, _ = project(end, cam)
            # 6 px of arrowhead + ~26 px label allowance past the tip
            lo_u, hi_u = min(u0, u1) - 6, max(u0, u1) + 32
            lo_v, hi_v = min(v0, v1) - 32, max(v0, v1) + 32
            boxes.append((lo_u, hi_u, lo_v, hi_v))
        for v, u in diff:
            assert any(lo_u - 6 <= u <= hi_u + 6 and lo_v - 6 <= v <= hi_v + 6
                       for lo_u, hi_u, lo_v, hi_v in boxes)

    def test_behind_camera_axis_omitted(self):
        verts, faces = box_mesh((0.2, 0.2, 0.2))
        scene = SceneState(objects=(SceneObject("b", "b", verts, faces),))
        cam = front_camera(0.5)
        out = render(scene, cam)
        # Box spanning the camera: +x face center sits behind the image plane.
        box = Aabb([-0.1, -0.1, -0.1], [2.0, 0.1, 0.1])
        spec = AxesOverlaySpec(origin=box.center, length=0.5)
        img = overlay_axes(out, cam, spec, box)  # must not raise
        assert img.shape == out.rgb.shape


class TestAnnotate:
    def synthetic_output(self, rects):
        h, w = 60, 80
        ids = np.full((h, w), -1, dtype=np.int32)
        depth = np.full((h, w), np.inf)
        for index, (r0, r1, c0, c1) in enumerate(rects):
            ids[r0:r1 + 1, c0:c1 + 1] = index
            depth[r0:r1 + 1, c0:c1 + 1] = 1.0
        rgb = np.zeros((h, w, 3), dtype=np.uint8)
        return RenderOutput(rgb=rgb, depth=depth, object_id=ids,
                            id_map=tuple(f"obj{i}" for i in range(len(rects))))

    def test_tight_bbox(self):
        out = self.synthetic_output([(30, 40, 10, 20)])
        img = annotate_objects(out, {"obj0": "thing"})
        color = np.array(stable_color("obj0"))
        assert (img[30, 10:21] == color).all()
        assert (img[40, 10:21] == color).all()
        assert (img[30:41, 10] == color).all()
        assert (img[30:41, 20] == color).all()

    def test_occluded_object_skipped(self):
        out = self.synthetic_output([(30, 40, 10, 20)])
        out = RenderOutput(rgb=out.rgb, depth=out.depth, object_id=out.object_id,
                           id_map=("obj0", "ghost"))
        img = annotate_objects(out, {})
        ghost_color = np.array(stable_color("ghost"))
        assert not (img == ghost_color).all(axis=2).any()

    def test_two_objects_distinct_colors(self):
        out = self.synthetic_output([(5, 15, 5, 15), (35, 50, 40, 70)])
        img = annotate_objects(out, {"obj0": "mug", "obj1": "book"})
        c0, c1 = stable_color("obj0"), stable_color("obj1")
        assert c0 != c1
        assert (img == np.array(c0)).all(axis=2).any()
        assert (img == np.array(c1)).all(axis=2).any()

    def test_buffers_untouched(self):
        out = self.synthetic_output([(5, 15, 5, 15)])
        depth_before = out.depth.tobytes()
        _ = annotate_objects(out, {})
        assert out.depth.tobytes() == depth_before


class TestEncoding:
    def test_png_round_trip(self, tmp_path):
        img = np.zeros((1, 1, 3), dtype=np.uint8)
        img[0, 0] = (255, 0, 0)
        path = tmp_path / "red.png"
        write_png(img, path)
        back = np.asarray(Image.open(path).convert("RGB"))
        assert np.array_equal(back, img)

    def test_png_exact_rgb(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        path = tmp_path / "x.png"
        write_png(img, path)
        assert np.array_equal(np.asarray(Image.open(path).convert("RGB")), img)

    def test_jpeg_base64(self):
        img = np.full((8, 8, 3), 128, dtype=np.uint8)
        text = encode_jpeg_base64(img)
        assert len(text) % 4 == 0
        decoded = Image.open(io.BytesIO(base64.b64decode(text)))
        assert decoded.format == "JPEG"
        assert decoded.size == (8, 8)


class TestRigRender:
    def test_cylinder_visible_from_all_rig_views(self):
        from poseloop.camera import frame_aabb
        from poseloop.geometry import aabb_of_points

        verts, faces = cylinder_mesh(0.2, 0.5)
        scene = SceneState(objects=(SceneObject("can", "can", verts, faces),))
        rig = frame_aabb(aabb_of_points(verts), SMALL_INTR, k=4, elevation_deg=30.0)
        for cam in rig.cameras:
            out = render(scene, cam)
            assert out.mask_pixel_count("can") > 50
