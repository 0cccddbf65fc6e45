"""Turn a static mesh into an animatable one.

Vertices are partitioned by k-means on their rest positions; every vertex
belongs to exactly one cluster (one-hot pseudo-skinning) and each cluster is
driven through a handle placed at its centroid. Farthest point sampling picks
the anchor vertices that pin the animation during rigidity regulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .mesh import TriangleMesh

DEFAULT_CLUSTERS = 80
DEFAULT_FPS_FRACTION = 0.1
MAX_LLOYD_ITERS = 100


def default_cluster_count() -> int:
    return DEFAULT_CLUSTERS


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Rig:
    """Cluster assignment, handle points and anchor vertices for one mesh."""

    cluster_of: np.ndarray
    handles: np.ndarray
    fps_anchors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        c = np.asarray(self.cluster_of, dtype=np.int64)
        h = np.asarray(self.handles, dtype=np.float64).reshape(-1, 3)
        a = np.asarray(self.fps_anchors, dtype=np.int64).reshape(-1)
        k = len(h)
        if c.ndim != 1 or len(c) == 0:
            raise ValidationError("cluster_of must be a non-empty 1-D array")
        if c.min() < 0 or c.max() >= k:
            raise ValidationError(f"cluster indices must lie in [0, {k})")
        counts = np.bincount(c, minlength=k)
        if (counts == 0).any():
            raise ValidationError(f"empty clusters: {np.nonzero(counts == 0)[0].tolist()}")
        if len(a):
            if a.min() < 0 or a.max() >= len(c):
                raise ValidationError("fps anchor index out of range")
            if len(np.unique(a)) != len(a):
                raise ValidationError("fps anchors must be distinct")
        object.__setattr__(self, "cluster_of", _frozen(c))
        object.__setattr__(self, "handles", _frozen(h))
        object.__setattr__(self, "fps_anchors", _frozen(a))

    @property
    def n_clusters(self) -> int:
        return len(self.handles)

    @property
    def n_vertices(self) -> int:
        return len(self.cluster_of)

    def skinning_weights(self) -> np.ndarray:
        """Dense one-hot ``(n_vertices, n_clusters)`` weight matrix."""
        s = np.zeros((self.n_vertices, self.n_clusters))
        s[np.arange(self.n_vertices), self.cluster_of] = 1.0
        return s

    def members(self, k: int) -> np.ndarray:
        return np.nonzero(self.cluster_of == k)[0]

    def with_anchors(self, anchors) -> "Rig":
        return Rig(self.cluster_of, self.handles, anchors)


def handle_points(mesh: TriangleMesh | np.ndarray, cluster_of, n_clusters: int | None = None) -> np.ndarray:
    """Centroid of each cluster's rest-pose vertices."""
    v = mesh.vertices if isinstance(mesh, TriangleMesh) else np.asarray(mesh, dtype=np.float64)
    c = np.asarray(cluster_of, dtype=np.int64)
    if len(c) != len(v):
        raise ValidationError(f"{len(c)} assignments for {len(v)} vertices")
    k = int(c.max()) + 1 if n_clusters is None else n_clusters
    counts = np.bincount(c, minlength=k)
    if (counts == 0).any():
        raise ValidationError(f"empty clusters: {np.nonzero(counts == 0)[0].tolist()}")
    sums = np.stack([np.bincount(c, v[:, d], k) for d in range(3)], axis=1)
    return sums / counts[:, None]


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    objective: list[float]
    iterations: int
    converged: bool


def _sq_dists(points: np.ndarray, centers: np.ndarray, chunk: int = 4096) -> np.ndarray:
    # explicit differences rather than the |x|^2 - 2xc + |c|^2 expansion so
    # equal distances compare equal and ties resolve by index
    out = np.empty((len(points), len(centers)))
    for s in range(0, len(points), chunk):
        d = points[s:s + chunk, None, :] - centers[None, :, :]
        out[s:s + chunk] = np.einsum("ijk,ijk->ij", d, d)
    return out


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen[-1]][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen center
            taken = set(chosen)
            nxt = next(i for i in range(n) if i not in taken)
        else:
            r = rng.random() * total
            nxt = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            nxt = min(nxt, n - 1)
            while d2[nxt] == 0.0:
                nxt -= 1
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[nxt][None])[:, 0])
    return points[chosen].copy()


def _repair_empty(points, labels, centers, k):
    counts = np.bincount(labels, minlength=k)
    for empty in np.nonzero(counts == 0)[0]:
        resid = np.einsum("ij,ij->i", points - centers[labels], points - centers[labels])
        resid[counts[labels] <= 1] = -1.0
        far = int(np.argmax(resid))
        counts[labels[far]] -= 1
        labels[far] = empty
        counts[empty] = 1
        centers[empty] = points[far]
    return labels


def _means(points, labels, k):
    counts = np.bincount(labels, minlength=k)
    sums = np.stack([np.bincount(labels, points[:, d], k) for d in range(points.shape[1])], axis=1)
    return sums / counts[:, None]


def kmeans(points, k: int, seed=0, max_iters: int = MAX_LLOYD_ITERS) -> KMeansResult:
    """Seeded Lloyd's algorithm with k-means++ initialization.

    Nearest-center ties go to the lowest cluster index. An emptied cluster
    takes the point farthest from its current center. Iteration stops once
    the assignment no longer changes or after ``max_iters`` updates.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n == 0:
        raise ValidationError("cannot cluster an empty point set")
    if not 1 <= k <= n:
        raise ValidationError(f"n_clusters must be in [1, {n}], got {k}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    centers = _kmeans_pp(pts, k, rng)
    labels = np.argmin(_sq_dists(pts, centers), axis=1)
    labels = _repair_empty(pts, labels, centers, k)
    objective = []
    converged = False
    it = 0
    centers = _means(pts, labels, k)
    objective.append(float(((pts - centers[labels]) ** 2).sum()))
    while it < max_iters:
        it += 1
        new = np.argmin(_sq_dists(pts, centers), axis=1)
        new = _repair_empty(pts, new, centers, k)
        if np.array_equal(new, labels):
            converged = True
            break
        labels = new
        centers = _means(pts, labels, k)
        objective.append(float(((pts - centers[labels]) ** 2).sum()))
    return KMeansResult(labels, centers, objective, it, converged)


def kmeans_cluster(mesh: TriangleMesh, n_clusters: int = DEFAULT_CLUSTERS, seed=0) -> Rig:
    """Cluster rest-pose vertices and place a handle at each cluster centroid."""
    if n_clusters > mesh.n_vertices:
        raise ValidationError(f"n_clusters={n_clusters} exceeds vertex count {mesh.n_vertices}")
    res = kmeans(mesh.vertices, n_clusters, seed)
    return Rig(res.labels, handle_points(mesh, res.labels, n_clusters))


def fps_count(n_vertices: int, fraction: float) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fps fraction must be in (0, 1], got {fraction}")
    return max(1, min(n_vertices, int(np.floor(fraction * n_vertices + 0.5))))


def farthest_point_sampling(points, count: int, start: int = 0) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if not 0 <= start < len(pts):
        raise ValidationError(f"fps start index {start} out of range")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    d = np.linalg.norm(pts - pts[start], axis=1)
    for m in range(1, count):
        nxt = int(np.argmax(d))  # first maximum -> lowest index on ties
        chosen[m] = nxt
        np.minimum(d, np.linalg.norm(pts - pts[nxt], axis=1), out=d)
    return chosen


def fps_sample(mesh: TriangleMesh, fraction: float = DEFAULT_FPS_FRACTION, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling of ``round(fraction * n_vertices)`` anchors."""
    return farthest_point_sampling(mesh.vertices, fps_count(mesh.n_vertices, fraction), start)


def build_rig(mesh: TriangleMesh, n_clusters: int = DEFAULT_CLUSTERS, seed=0,
              fps_fraction: float = DEFAULT_FPS_FRACTION, fps_start: int = 0) -> Rig:
    rig = kmeans_cluster(mesh, n_clusters, seed)
    return rig.with_anchors(fps_sample(mesh, fps_fraction, fps_start))
