import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from animesh.errors import ValidationError
from animesh.mesh import TriangleMesh
from animesh.rigging import (Rig, build_rig, default_cluster_count, farthest_point_sampling, fps_count,
                             fps_sample, handle_points, kmeans, kmeans_cluster)
from animesh.shapes import cylinder, grid_cube, icosphere


def fps_oracle(points, count, start=0):
    """Greedy farthest-point selection from a full distance matrix."""
    D = np.stack([np.linalg.norm(points - points[i], axis=1) for i in range(len(points))])
    chosen = [start]
    for _ in range(count - 1):
        mind = D[chosen].min(axis=0)
        chosen.append(int(np.argmax(mind)))
    return np.array(chosen)


def sse(points, labels):
    return sum(((points[labels == c] - points[labels == c].mean(axis=0)) ** 2).sum() for c in np.unique(labels))


SEPARABLE = np.array([[0.0, 0, 0], [0, 1, 0], [10, 0, 0], [10, 1, 0]])


# -------------------------------------------------------------------- FPS


@pytest.mark.parametrize("n, frac, want", [(3000, 0.1, 300), (5, 0.1, 1), (25, 0.1, 3), (15, 0.1, 2),
                                           (1, 0.1, 1), (10, 1.0, 10)])
def test_fps_count_rounding(n, frac, want):
    assert fps_count(n, frac) == want


@pytest.mark.parametrize("frac", [0.0, -0.1, 1.5])
def test_fps_fraction_validated(frac):
    with pytest.raises(ValidationError):
        fps_count(100, frac)


def test_fps_line_fixture():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0], [4, 0, 0]])
    # start at 0, farthest is 4, then the tie between 2 (distance 2) is unique
    assert farthest_point_sampling(pts, 3).tolist() == [0, 4, 2]


def test_fps_ties_take_lowest_index():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0]])
    assert farthest_point_sampling(pts, 2).tolist() == [0, 1]


@pytest.mark.parametrize("mesh", [icosphere(1), grid_cube(3), cylinder(10, 8), icosphere(2)],
                         ids=["ico1", "cube3", "cyl80", "ico2"])
def test_fps_matches_oracle_on_meshes(mesh):
    assert mesh.n_vertices <= 200
    for frac in (0.1, 0.25, 1.0):
        got = fps_sample(mesh, frac)
        np.testing.assert_array_equal(got, fps_oracle(mesh.vertices, fps_count(mesh.n_vertices, frac)))


@given(n=st.integers(3, 200), seed=st.integers(0, 10_000), frac=st.floats(0.01, 1.0), data=st.data())
def test_fps_matches_oracle_on_point_sets(n, seed, frac, data):
    pts = np.random.default_rng(seed).standard_normal((n, 3))
    start = data.draw(st.integers(0, n - 1))
    count = fps_count(n, frac)
    got = farthest_point_sampling(pts, count, start)
    np.testing.assert_array_equal(got, fps_oracle(pts, count, start))
    assert len(set(got.tolist())) == count


def test_fps_bad_start():
    with pytest.raises(ValidationError):
        farthest_point_sampling(np.zeros((4, 3)), 2, start=4)


# ---------------------------------------------------------------- k-means


def test_default_cluster_count():
    assert default_cluster_count() == 80


@pytest.mark.parametrize("seed", range(10))
def test_kmeans_separable_matches_exhaustive(seed):
    res = kmeans(SEPARABLE, 2, seed)
    best = min(sse(SEPARABLE, np.array(lab)) for lab in itertools.product([0, 1], repeat=4)
               if len(set(lab)) == 2)
    assert best == pytest.approx(1.0)
    assert res.objective[-1] == pytest.approx(best, abs=1e-12)
    assert res.labels[0] == res.labels[1] != res.labels[2] == res.labels[3]


@given(seed=st.integers(0, 1000), n=st.integers(4, 8))
def test_kmeans_two_clusters_on_tiny_sets_is_fixed_point(seed, n):
    pts = np.random.default_rng(seed).standard_normal((n, 3))
    res = kmeans(pts, 2, seed)
    assert res.converged
    d = ((pts[:, None, :] - res.centers[None]) ** 2).sum(-1)
    assert (d[np.arange(n), res.labels] <= d.min(axis=1) + 1e-12).all()


def lloyd_fixed_point(pts, res):
    k = len(res.centers)
    means = np.stack([pts[res.labels == c].mean(axis=0) for c in range(k)])
    np.testing.assert_allclose(res.centers, means, atol=1e-12)
    d = ((pts[:, None, :] - res.centers[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(np.argmin(d, axis=1), res.labels)


@pytest.mark.parametrize("k", [3, 12, 80])
def test_kmeans_is_lloyd_fixed_point_on_cylinder(k):
    m = cylinder(30, 20)
    res = kmeans(m.vertices, k, seed=3)
    assert res.converged
    lloyd_fixed_point(m.vertices, res)


@given(seed=st.integers(0, 10_000), k=st.integers(1, 10))
def test_kmeans_objective_non_increasing(seed, k):
    pts = np.random.default_rng(seed).random((60, 3))
    res = kmeans(pts, k, seed)
    obj = np.array(res.objective)
    assert (np.diff(obj) <= 1e-12 * max(1.0, obj[0])).all()
    if res.converged:
        lloyd_fixed_point(pts, res)


def test_kmeans_deterministic_and_seed_sensitive():
    m = icosphere(2)
    a, b = kmeans_cluster(m, 8, seed=5), kmeans_cluster(m, 8, seed=5)
    np.testing.assert_array_equal(a.cluster_of, b.cluster_of)
    np.testing.assert_array_equal(a.handles, b.handles)
    others = [kmeans_cluster(m, 8, seed=s).cluster_of for s in range(6, 12)]
    assert any(not np.array_equal(a.cluster_of, o) for o in others)


def test_kmeans_duplicate_points_fill_every_cluster():
    pts = np.zeros((6, 3))
    pts[3:] = 1.0
    res = kmeans(pts, 4, seed=0)
    assert (np.bincount(res.labels, minlength=4) > 0).all()


def test_kmeans_validates_k():
    with pytest.raises(ValidationError):
        kmeans(np.zeros((3, 3)), 4)
    with pytest.raises(ValidationError):
        kmeans_cluster(grid_cube(2), 1000)


# -------------------------------------------------------------------- rig


def test_build_rig_defaults_on_cylinder():
    m = cylinder(30, 20)
    rig = build_rig(m)
    assert rig.n_clusters == 80
    assert len(rig.fps_anchors) == 60
    np.testing.assert_allclose(rig.handles, handle_points(m, rig.cluster_of, 80), atol=0)


def test_skinning_weights_one_hot(cube):
    rig = kmeans_cluster(cube, 6, seed=0)
    W = rig.skinning_weights()
    assert set(np.unique(W)) <= {0.0, 1.0}
    np.testing.assert_array_equal(W.sum(axis=1), 1.0)
    np.testing.assert_array_equal(np.argmax(W, axis=1), rig.cluster_of)


def test_handles_are_centroids(cube):
    rig = kmeans_cluster(cube, 5, seed=1)
    for k in range(5):
        np.testing.assert_allclose(rig.handles[k], cube.vertices[rig.members(k)].mean(axis=0), atol=1e-15)


@pytest.mark.parametrize("cluster_of, handles, anchors", [
    ([0, 2, 2], np.zeros((3, 3)), []),
    ([0, 1, 5], np.zeros((2, 3)), []),
    ([0, 1, 1], np.zeros((2, 3)), [0, 0]),
    ([0, 1, 1], np.zeros((2, 3)), [7]),
])
def test_rig_validation(cluster_of, handles, anchors):
    with pytest.raises(ValidationError):
        Rig(np.array(cluster_of), handles, np.array(anchors, dtype=np.int64))
