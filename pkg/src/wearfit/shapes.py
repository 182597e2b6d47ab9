"""Procedural test shapes: sphere, cube, torus, grid sheet, cylinder, tube."""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh


def cube(size: float = 1.0, center=(0.5, 0.5, 0.5)) -> TriMesh:
    c = np.asarray(center, dtype=np.float64)
    h = size / 2.0
    corners = np.array(
        [[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)]
    ) + c
    # 12 triangles, outward winding
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    faces = []
    for a, b, cc, d in quads:
        faces += [[a, b, cc], [a, cc, d]]
    return TriMesh(corners, np.array(faces))


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0, 0, 0)) -> TriMesh:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v[0])
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        verts = list(v)
        new_faces = []

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key in cache:
                return cache[key]
            m = verts[a] + verts[b]
            m /= np.linalg.norm(m)
            verts.append(m)
            cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v = np.array(verts)
        f = np.array(new_faces, dtype=np.int64)
    return TriMesh(v * radius + np.asarray(center, dtype=np.float64), f)


def torus(major_radius: float = 1.0, minor_radius: float = 0.3,
          major_segments: int = 24, minor_segments: int = 12,
          center=(0, 0, 0)) -> TriMesh:
    verts = []
    for i in range(major_segments):
        a = 2 * np.pi * i / major_segments
        ca, sa = np.cos(a), np.sin(a)
        for j in range(minor_segments):
            b = 2 * np.pi * j / minor_segments
            r = major_radius + minor_radius * np.cos(b)
            verts.append([r * ca, minor_radius * np.sin(b), r * sa])
    faces = []
    for i in range(major_segments):
        for j in range(minor_segments):
            a = i * minor_segments + j
            b = i * minor_segments + (j + 1) % minor_segments
            c = ((i + 1) % major_segments) * minor_segments + j
            d = ((i + 1) % major_segments) * minor_segments + (j + 1) % minor_segments
            faces += [[a, b, c], [b, d, c]]
    return TriMesh(np.asarray(verts) + np.asarray(center, dtype=np.float64), np.array(faces))


def grid_sheet(nx: int = 20, ny: int = 20, width: float = 1.0, height: float = 1.0,
               center=(0, 0, 0)) -> TriMesh:
    """Flat sheet in the XZ plane (normal +Y), (nx+1)*(ny+1) vertices."""
    xs = np.linspace(-width / 2, width / 2, nx + 1)
    zs = np.linspace(-height / 2, height / 2, ny + 1)
    verts = np.array([[x, 0.0, z] for z in zs for x in xs])
    faces = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b = a + 1
            c = a + (nx + 1)
            d = c + 1
            faces += [[a, b, c], [b, d, c]]
    return TriMesh(verts + np.asarray(center, dtype=np.float64), np.array(faces))


def cylinder(radius: float = 0.5, height: float = 2.0, segments: int = 32,
             stacks: int = 8, center=(0, 0, 0), capped: bool = True) -> TriMesh:
    """Cylinder along +Y. Capped variant is watertight."""
    verts = []
    for k in range(stacks + 1):
        y = -height / 2 + height * k / stacks
        for i in range(segments):
            a = 2 * np.pi * i / segments
            verts.append([radius * np.cos(a), y, radius * np.sin(a)])
    faces = []
    for k in range(stacks):
        for i in range(segments):
            a = k * segments + i
            b = k * segments + (i + 1) % segments
            c = (k + 1) * segments + i
            d = (k + 1) * segments + (i + 1) % segments
            faces += [[a, c, b], [b, c, d]]
    if capped:
        bot = len(verts)
        verts.append([0.0, -height / 2, 0.0])
        top = len(verts)
        verts.append([0.0, height / 2, 0.0])
        for i in range(segments):
            j = (i + 1) % segments
            faces.append([bot, i, j])
            faces.append([top, stacks * segments + j, stacks * segments + i])
    return TriMesh(np.asarray(verts) + np.asarray(center, dtype=np.float64), np.array(faces))


def tube(radius: float = 0.5, height: float = 1.0, segments: int = 32,
         stacks: int = 6, center=(0, 0, 0)) -> TriMesh:
    """Open cylindrical shell along +Y (single layer, not watertight)."""
    return cylinder(radius, height, segments, stacks, center, capped=False)


def blob(subdivisions: int = 2, seed: int = 7) -> TriMesh:
    """Asymmetric closed mesh: anisotropically scaled icosphere with a bump.

    Has no rotational symmetry, which makes rotation recovery well posed.
    """
    base = icosphere(subdivisions=subdivisions, radius=1.0)
    v = base.vertices * np.array([1.0, 0.72, 0.55])
    d = v - np.array([0.7, 0.35, 0.0])
    v = v + 0.45 * np.exp(-4.0 * np.sum(d * d, axis=1))[:, None] * base.vertices
    d2 = v - np.array([-0.4, -0.3, 0.35])
    v = v + 0.3 * np.exp(-6.0 * np.sum(d2 * d2, axis=1))[:, None] * base.vertices
    return TriMesh(v, base.faces)
