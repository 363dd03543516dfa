"""Procedural primitive meshes used by demos, fixtures, and the suite generator."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["box_mesh", "cylinder_mesh", "wedge_mesh", "plane_mesh"]


def box_mesh(extents, center=(0.0, 0.0, 0.0)):
    """Axis-aligned box; returns (vertices (8,3), faces (12,3))."""
    ex, ey, ez = (float(e) / 2.0 for e in extents)
    c = np.asarray(center, dtype=np.float64)
    verts = np.array(
        [[sx * ex, sy * ey, sz * ez] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    ) + c
    # Corner order: index bit 2 -> x, bit 1 -> y, bit 0 -> z.
    faces = np.array(
        [
            [0, 1, 3], [0, 3, 2],  # -x
            [4, 6, 7], [4, 7, 5],  # +x
            [0, 4, 5], [0, 5, 1],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [0, 2, 6], [0, 6, 4],  # -z
            [1, 5, 7], [1, 7, 3],  # +z
        ],
        dtype=np.int64,
    )
    return verts, faces


def cylinder_mesh(radius, height, center=(0.0, 0.0, 0.0), segments=16):
    """Upright cylinder (axis +z) with triangle-fan caps."""
    c = np.asarray(center, dtype=np.float64)
    hz = float(height) / 2.0
    ring = [
        (radius * math.cos(2 * math.pi * i / segments),
         radius * math.sin(2 * math.pi * i / segments))
        for i in range(segments)
    ]
    verts = []
    for z in (-hz, hz):
        verts.extend([x, y, z] for x, y in ring)
    bottom_center = len(verts)
    verts.append([0.0, 0.0, -hz])
    top_center = len(verts)
    verts.append([0.0, 0.0, hz])
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        bi, bj = i, j
        ti, tj = segments + i, segments + j
        faces.append([bi, bj, tj])
        faces.append([bi, tj, ti])
        faces.append([bottom_center, bj, bi])
        faces.append([top_center, ti, tj])
    return np.asarray(verts) + c, np.asarray(faces, dtype=np.int64)


def wedge_mesh(extents, center=(0.0, 0.0, 0.0)):
    """Triangular prism: a box cut along the +x/+z diagonal."""
    ex, ey, ez = (float(e) / 2.0 for e in extents)
    c = np.asarray(center, dtype=np.float64)
    verts = np.array(
        [
            [-ex, -ey, -ez], [ex, -ey, -ez], [-ex, -ey, ez],
            [-ex, ey, -ez], [ex, ey, -ez], [-ex, ey, ez],
        ]
    ) + c
    faces = np.array(
        [
            [0, 1, 2],            # -y triangle
            [3, 5, 4],            # +y triangle
            [0, 3, 4], [0, 4, 1],  # bottom
            [0, 2, 5], [0, 5, 3],  # back (-x)
            [1, 4, 5], [1, 5, 2],  # slanted face
        ],
        dtype=np.int64,
    )
    return verts, faces


def plane_mesh(size_x, size_y, center=(0.0, 0.0, 0.0)):
    """Flat rectangle in the z-plane (two triangles, zero thickness)."""
    hx, hy = float(size_x) / 2.0, float(size_y) / 2.0
    c = np.asarray(center, dtype=np.float64)
    verts = np.array(
        [[-hx, -hy, 0.0], [hx, -hy, 0.0], [hx, hy, 0.0], [-hx, hy, 0.0]]
    ) + c
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return verts, faces
