"""Procedural meshes used by tests, demos and the CLI ``info`` smoke checks."""

from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return TriangleMesh(np.array(v) * radius, np.array(faces))


def grid_cube(n: int = 4, size: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Closed cube surface with an ``n x n`` quad grid per face, split into triangles."""
    lin = np.linspace(-0.5, 0.5, n + 1)
    index: dict[tuple[int, int, int], int] = {}
    verts: list[tuple[float, float, float]] = []

    def vid(ix: int, iy: int, iz: int) -> int:
        key = (ix, iy, iz)
        if key not in index:
            index[key] = len(verts)
            verts.append((lin[ix], lin[iy], lin[iz]))
        return index[key]

    faces = []
    for axis in range(3):
        for side in (0, n):
            for a in range(n):
                for b in range(n):
                    quad = []
                    for da, db in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = [0, 0, 0]
                        p[axis] = side
                        p[(axis + 1) % 3] = a + da
                        p[(axis + 2) % 3] = b + db
                        quad.append(vid(*p))
                    q0, q1, q2, q3 = quad
                    # outward orientation
                    if side == n:
                        faces += [(q0, q1, q2), (q0, q2, q3)]
                    else:
                        faces += [(q0, q2, q1), (q0, q3, q2)]
    v = np.array(verts) * size + np.asarray(center, dtype=float)
    return TriangleMesh(v, np.array(faces))


def cylinder(n_around: int = 60, n_along: int = 50, radius: float = 0.25,
             height: float = 2.0) -> TriangleMesh:
    """Open cylinder along +Y centered at the origin, ``n_around * n_along`` vertices."""
    theta = np.arange(n_around) * (2 * np.pi / n_around)
    ys = np.linspace(-height / 2, height / 2, n_along)
    yy, tt = np.meshgrid(ys, theta, indexing="ij")
    v = np.stack([radius * np.cos(tt), yy, radius * np.sin(tt)], axis=-1).reshape(-1, 3)
    faces = []
    for r in range(n_along - 1):
        for c in range(n_around):
            a = r * n_around + c
            b = r * n_around + (c + 1) % n_around
            d = (r + 1) * n_around + c
            e = (r + 1) * n_around + (c + 1) % n_around
            faces += [(a, d, b), (b, d, e)]
    return TriangleMesh(v, np.array(faces))
