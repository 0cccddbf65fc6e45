"""Triangle mesh data model, OBJ I/O, adjacency and cotangent weights."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateTriangleError, MeshError, ObjParseError

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
DEFAULT_FACE_BUDGET = 20_000


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Rest-pose triangle mesh.

    ``vertices`` is ``(n_vertices, 3)`` float64 and ``faces`` is
    ``(n_faces, 3)`` int64 with 0-based indices. Both arrays are read-only.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, copy=True)
        f = np.array(self.faces, dtype=np.int64, copy=True)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            if f.size == 0:
                f = f.reshape(0, 3)
            else:
                raise MeshError(f"faces must have shape (m, 3), got {f.shape}")
        if len(v) < 3:
            raise MeshError(f"mesh needs at least 3 vertices, got {len(v)}")
        if len(f) < 1:
            raise MeshError("mesh has no faces")
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex positions must be finite")
        if f.min() < 0 or f.max() >= len(v):
            bad = int(np.nonzero((f < 0).any(axis=1) | (f >= len(v)).any(axis=1))[0][0])
            raise MeshError(f"face {bad} {f[bad].tolist()} indexes outside [0, {len(v)})")
        dup = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if dup.any():
            bad = int(np.nonzero(dup)[0][0])
            raise MeshError(f"face {bad} {f[bad].tolist()} repeats a vertex")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces)

    def face_areas(self, vertices=None) -> np.ndarray:
        v = self.vertices if vertices is None else vertices
        a, b, c = (v[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edges(self) -> np.ndarray:
        return unique_edges(self.faces)

    def check_face_budget(self, budget: int = DEFAULT_FACE_BUDGET) -> bool:
        """Warn when the mesh exceeds ``budget`` faces. Returns True if within budget."""
        if self.n_faces > budget:
            log.warning("mesh has %d faces, above the budget of %d", self.n_faces, budget)
            return False
        return True


def unique_edges(faces: np.ndarray) -> np.ndarray:
    """Sorted ``(n_edges, 2)`` array of undirected edges with ``i < j``."""
    faces = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def one_rings_from_faces(faces: np.ndarray, n_vertices: int) -> list[np.ndarray]:
    rings: list[set[int]] = [set() for _ in range(n_vertices)]
    for a, b, c in np.asarray(faces).tolist():
        rings[a].update((b, c))
        rings[b].update((a, c))
        rings[c].update((a, b))
    return [np.array(sorted(r), dtype=np.int64) for r in rings]


# --------------------------------------------------------------------------- OBJ


def load_obj(path) -> TriangleMesh:
    """Read the ``v``/``f`` subset of an ASCII Wavefront OBJ file.

    Polygons are fan-triangulated around their first corner. ``vt``/``vn``
    records and the texture/normal parts of face corners are dropped. Negative
    (relative) indices are resolved against the vertices read so far.
    """
    path = os.fspath(path)
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    face_lines: list[int] = []
    with open(path, "r", encoding="ascii", errors="strict") as fh:
        try:
            lines = fh.readlines()
        except UnicodeDecodeError as exc:
            raise ObjParseError("file is not ASCII", path=path) from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) < 3:
                raise ObjParseError("vertex record needs 3 coordinates", lineno, path)
            try:
                xyz = tuple(float(x) for x in rest[:3])
            except ValueError as exc:
                raise ObjParseError(f"bad vertex coordinate in {rest[:3]}", lineno, path) from exc
            vertices.append(xyz)
        elif tag == "f":
            if len(rest) < 3:
                raise ObjParseError("face record needs at least 3 corners", lineno, path)
            idx = []
            for corner in rest:
                tok = corner.split("/", 1)[0]
                try:
                    k = int(tok)
                except ValueError as exc:
                    raise ObjParseError(f"bad face index {corner!r}", lineno, path) from exc
                if k == 0:
                    raise ObjParseError("face index 0 is invalid (OBJ is 1-based)", lineno, path)
                k = k - 1 if k > 0 else len(vertices) + k
                idx.append(k)
            for j in range(1, len(idx) - 1):
                faces.append((idx[0], idx[j], idx[j + 1]))
                face_lines.append(lineno)
        # vt, vn, o, g, s, usemtl, mtllib and friends are ignored
    if not vertices or not faces:
        raise ObjParseError("mesh is empty (needs v and f records)", path=path)
    nv = len(vertices)
    for (a, b, c), lineno in zip(faces, face_lines):
        for k in (a, b, c):
            if k < 0 or k >= nv:
                raise ObjParseError(f"face index {k + 1} out of range (1..{nv})", lineno, path)
    try:
        return TriangleMesh(np.array(vertices), np.array(faces))
    except MeshError as exc:
        raise ObjParseError(str(exc), path=path) from exc


def save_obj(mesh: TriangleMesh, path, vertices=None, precision: int | None = None) -> None:
    """Write ``mesh`` as ASCII OBJ.

    Coordinates use the shortest round-trip representation unless
    ``precision`` (significant digits) is given. ``vertices`` overrides the
    rest positions, which is how keyframes are exported.
    """
    v = mesh.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    if v.shape != mesh.vertices.shape:
        raise MeshError(f"vertex array shape {v.shape} does not match mesh {mesh.vertices.shape}")
    fmt = repr if precision is None else (lambda x: f"{x:.{precision}g}")
    out = [f"v {fmt(float(x))} {fmt(float(y))} {fmt(float(z))}\n" for x, y, z in v.tolist()]
    out.extend(f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces.tolist())
    with open(os.fspath(path), "w", encoding="ascii") as fh:
        fh.writelines(out)


# ----------------------------------------------------------------- cotangents


@dataclass(frozen=True, eq=False)
class CotanLaplacian:
    """Per-edge cotangent weights and one-ring adjacency.

    ``edges[e] = (i, j)`` with ``i < j``; ``weights[e]`` is ``w_ij = w_ji``.
    """

    edges: np.ndarray
    weights: np.ndarray
    one_rings: list[np.ndarray]
    n_vertices: int
    clamped: bool = False
    _matrix: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.edges) != len(self.weights):
            raise MeshError("edge and weight counts differ")
        _frozen(self.edges)
        _frozen(self.weights)

    @property
    def has_negative(self) -> bool:
        return bool((self.weights < 0).any())

    def matrix(self) -> sp.csr_matrix:
        """Weighted graph Laplacian ``L = D - W`` (symmetric, rows sum to 0)."""
        if "L" not in self._matrix:
            i, j = self.edges[:, 0], self.edges[:, 1]
            w = self.weights
            n = self.n_vertices
            off = sp.coo_matrix((np.concatenate([-w, -w]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
            diag = np.bincount(i, w, n) + np.bincount(j, w, n)
            self._matrix["L"] = (off + sp.diags(diag)).tocsr()
        return self._matrix["L"]


def corner_cotangents(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """``(n_faces, 3)`` cotangent of the angle at each face corner."""
    v = np.asarray(vertices, dtype=np.float64)
    cots = np.empty(faces.shape, dtype=np.float64)
    for k in range(3):
        a = v[faces[:, k]]
        u = v[faces[:, (k + 1) % 3]] - a
        w = v[faces[:, (k + 2) % 3]] - a
        cots[:, k] = np.einsum("ij,ij->i", u, w) / np.linalg.norm(np.cross(u, w), axis=1)
    return cots


def cotangent_weights(mesh: TriangleMesh, clamp: bool = False) -> CotanLaplacian:
    """Cotangent edge weights ``w_ij = (cot a_ij + cot b_ij) / 2``.

    Each face adds half the cotangent of a corner to the edge opposite that
    corner, so boundary edges carry a single term. Obtuse triangles yield
    negative weights; ``clamp=True`` floors them at zero.

    Raises:
        DegenerateTriangleError: a face has area below 1e-12.
    """
    faces = mesh.faces
    areas = mesh.face_areas()
    bad = np.nonzero(areas < DEGENERATE_AREA)[0]
    if len(bad):
        raise DegenerateTriangleError(bad.tolist(), areas[bad].tolist())

    cots = corner_cotangents(mesh.vertices, faces)
    # corner k is opposite edge (k+1, k+2)
    ei = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    ej = np.concatenate([faces[:, 2], faces[:, 0], faces[:, 1]])
    half = 0.5 * np.concatenate([cots[:, 0], cots[:, 1], cots[:, 2]])
    pairs = np.sort(np.stack([ei, ej], axis=1), axis=1)
    edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
    weights = np.bincount(inverse.ravel(), half, len(edges))
    if clamp:
        weights = np.maximum(weights, 0.0)

    n = mesh.n_vertices
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges.tolist():
        nbrs[i].append(j)
        nbrs[j].append(i)
    rings = [np.array(sorted(r), dtype=np.int64) for r in nbrs]
    return CotanLaplacian(edges=edges, weights=weights, one_rings=rings, n_vertices=n, clamped=clamp)
