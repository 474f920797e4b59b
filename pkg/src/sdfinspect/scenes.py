"""Synthetic desk-scale scenes shipped with the package.

Every scene is a closed (watertight) triangle mesh so ray-parity signs work.
``bundled_path`` resolves names like ``"room"`` to the OBJ/PLY files under
``sdfinspect/data``; ``write_bundled`` regenerates those files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import TriangleMesh, save_obj, save_ply

DATA_DIR = Path(__file__).parent / "data"


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(v, np.array(faces))


def box(lo, hi, inward: bool = False) -> TriangleMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[x, y, z] for z in (lo[2], hi[2]) for y in (lo[1], hi[1]) for x in (lo[0], hi[0])])
    f = np.array([
        (0, 2, 1), (1, 2, 3),  # -z
        (4, 5, 6), (5, 7, 6),  # +z
        (0, 1, 4), (1, 5, 4),  # -y
        (2, 6, 3), (3, 6, 7),  # +y
        (0, 4, 2), (2, 4, 6),  # -x
        (1, 3, 5), (3, 7, 5),  # +x
    ])
    if inward:
        f = f[:, ::-1]
    return TriangleMesh(v, f)


def merge(*meshes: TriangleMesh, bounds=None) -> TriangleMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), bounds=bounds)


def unit_sphere(subdivisions: int = 3) -> TriangleMesh:
    m = icosphere(subdivisions)
    m.bounds = np.array([[-1.5] * 3, [1.5] * 3])
    return m


def unit_cube() -> TriangleMesh:
    return box((0, 0, 0), (1, 1, 1))


def flat_wall() -> TriangleMesh:
    """A 2 m x 2 m slab, 0.2 m thick, whose front face is the plane x = 1."""
    m = box((1.0, -1.0, -1.0), (1.2, 1.0, 1.0))
    m.bounds = np.array([[-0.5, -1.5, -1.5], [1.7, 1.5, 1.5]])
    return m


def room() -> TriangleMesh:
    """A 3 m x 3 m x 2 m hollow room with 0.1 m walls, two columns and a block.

    Obstacles are separate closed shells that do not touch the walls, so the
    mesh has no internal faces.
    """
    outer = box((-0.1, -0.1, -0.1), (3.1, 3.1, 2.1))
    cavity = box((0.0, 0.0, 0.0), (3.0, 3.0, 2.0), inward=True)
    pillar_a = box((0.8, 0.8, 0.25), (1.1, 1.1, 1.75))
    pillar_b = box((2.0, 1.7, 0.25), (2.2, 2.2, 1.75))
    block = box((1.6, 0.4, 0.3), (2.4, 0.9, 0.7))
    return merge(outer, cavity, pillar_a, pillar_b, block,
                 bounds=np.array([[-0.2, -0.2, -0.2], [3.2, 3.2, 2.2]]))


def sphere_interior(radius: float = 1.0, thickness: float = 0.1) -> TriangleMesh:
    """Hollow spherical shell; the free space is the ball inside it."""
    outer = icosphere(3, radius + thickness)
    inner = icosphere(3, radius)
    inner = TriangleMesh(inner.vertices, inner.faces[:, ::-1])
    r = radius + thickness + 0.1
    return merge(outer, inner, bounds=np.array([[-r] * 3, [r] * 3]))


SCENES = {
    "sphere": (unit_sphere, "obj"),
    "icosphere": (lambda: icosphere(3), "ply"),
    "cube": (unit_cube, "obj"),
    "wall": (flat_wall, "obj"),
    "room": (room, "obj"),
    "sphere_interior": (sphere_interior, "obj"),
}


def bundled_path(name: str) -> Path:
    _, fmt = SCENES[name]
    return DATA_DIR / f"{name}.{fmt}"


def bundled_scene(name: str) -> TriangleMesh:
    """Generated mesh including its scene bounds (file formats carry no bounds)."""
    return SCENES[name][0]()


def write_bundled(directory=DATA_DIR) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, (make, fmt) in SCENES.items():
        m = make()
        path = directory / f"{name}.{fmt}"
        if fmt == "obj":
            save_obj(m, path)
        else:
            save_ply(path, m.vertices, m.faces, binary=True)
