import numpy as np
import pytest
from hypothesis import given, strategies as st

from animesh.deform import (KeyframeSequence, MotionParams, axis_angle_quat, drive_frame, drive_mesh,
                            matrix_to_quat, motion_gradient, motion_jacobian, normalize_quat, quat_matrix_grad,
                            quat_to_matrix)
from animesh.errors import ValidationError
from animesh.rigging import build_rig, kmeans_cluster
from animesh.shapes import cylinder, icosphere

from conftest import random_rotation


def random_motion(rng, n, k, scale=1.0):
    return MotionParams(scale * rng.standard_normal((n, k, 3)), rng.standard_normal((n, k, 4)))


def pairwise(x):
    return np.linalg.norm(x[:, None] - x[None], axis=-1)


@pytest.fixture(scope="module")
def rigged():
    m = cylinder(20, 10)
    return m, kmeans_cluster(m, 3, seed=0)


# ------------------------------------------------------------ quaternions


@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_quat_matrix_is_rotation_and_scale_free(seed, scale):
    q = np.random.default_rng(seed).standard_normal(4)
    R = quat_to_matrix(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(quat_to_matrix(scale * q), R, atol=1e-12)
    np.testing.assert_allclose(quat_to_matrix(-q), R, atol=1e-15)


@given(seed=st.integers(0, 10_000))
def test_matrix_to_quat_round_trip(seed):
    R = random_rotation(np.random.default_rng(seed))
    q = matrix_to_quat(R)
    assert q[0] >= 0
    assert np.linalg.norm(q) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(quat_to_matrix(q), R, atol=1e-12)


def test_axis_angle_quat_known_rotation():
    R = quat_to_matrix(axis_angle_quat([0, 0, 2.0], np.pi / 2))
    np.testing.assert_allclose(R @ [1.0, 0, 0], [0, 1, 0], atol=1e-15)


def test_identity_quaternion_gives_identity():
    np.testing.assert_array_equal(quat_to_matrix(np.array([1.0, 0, 0, 0])), np.eye(3))


def test_zero_quaternion_rejected():
    with pytest.raises(ValidationError):
        normalize_quat(np.zeros(4))
    with pytest.raises(ValidationError):
        MotionParams(np.zeros((1, 1, 3)), np.zeros((1, 1, 4)))


@given(seed=st.integers(0, 10_000))
def test_quat_matrix_grad_matches_central_differences(seed):
    q = np.random.default_rng(seed).standard_normal(4)
    G = quat_matrix_grad(q)
    h = 1e-6
    for c in range(4):
        e = np.zeros(4)
        e[c] = h
        fd = (quat_to_matrix(q + e) - quat_to_matrix(q - e)) / (2 * h)
        np.testing.assert_allclose(G[c], fd, atol=1e-7 * max(1.0, 1 / np.linalg.norm(q)))


# ----------------------------------------------------------------- driving


def test_identity_motion_reproduces_rest_exactly(rigged):
    m, rig = rigged
    seq = drive_mesh(m, rig, MotionParams.identity(4, 3))
    assert np.max(np.abs(seq.frames - m.vertices)) == 0.0


def test_uniform_translation(rigged, rng):
    m, rig = rigged
    d = rng.standard_normal(3)
    t = np.broadcast_to(d, (2, 3, 3))
    motion = MotionParams(t, MotionParams.identity(2, 3).rotations)
    seq = drive_mesh(m, rig, motion)
    np.testing.assert_allclose(seq.frames, np.broadcast_to(m.vertices + d, seq.frames.shape), atol=1e-12, rtol=0)


@given(seed=st.integers(0, 10_000), scale=st.floats(0.0, 10.0))
def test_cluster_distances_preserved(seed, scale):
    m = icosphere(1)
    rig = kmeans_cluster(m, 4, seed=1)
    motion = random_motion(np.random.default_rng(seed), 2, 4, scale)
    seq = drive_mesh(m, rig, motion)
    for k in range(4):
        idx = rig.members(k)
        for f in seq.frames:
            np.testing.assert_allclose(pairwise(f[idx]), pairwise(m.vertices[idx]), atol=1e-9)


def test_handle_follows_translation(rigged, rng):
    m, rig = rigged
    motion = random_motion(rng, 1, 3)
    seq = drive_mesh(m, rig, motion)
    for k in range(3):
        # rotations act about the handle, so the centroid lands on h + t
        np.testing.assert_allclose(seq.frames[0][rig.members(k)].mean(0), rig.handles[k] + motion.translations[0, k],
                                   atol=1e-12)


def test_drive_frame_single_vertex_by_hand():
    rest = np.array([[1.0, 0, 0]])
    R = quat_to_matrix(axis_angle_quat([0, 0, 1], np.pi / 2))[None]
    out = drive_frame(rest, np.array([0]), np.array([[0.0, 0, 0]]), R, np.array([[0.0, 0, 1]]))
    np.testing.assert_allclose(out, [[0, 1, 1]], atol=1e-15)


def test_threaded_driving_matches_serial(rigged, rng):
    m, rig = rigged
    motion = random_motion(rng, 6, 3)
    np.testing.assert_array_equal(drive_mesh(m, rig, motion, workers=3).frames, drive_mesh(m, rig, motion).frames)


def test_pack_unpack_round_trip(rng):
    motion = random_motion(rng, 5, 7)
    back = MotionParams.unpack(motion.pack(), 5, 7)
    np.testing.assert_array_equal(back.translations, motion.translations)
    np.testing.assert_array_equal(back.rotations, motion.rotations)
    assert motion.pack().shape == (5 * 7 * 7,)


def test_dimension_mismatch(rigged):
    m, rig = rigged
    with pytest.raises(ValidationError):
        drive_mesh(m, rig, MotionParams.identity(2, 4))
    with pytest.raises(ValidationError):
        KeyframeSequence(m, np.zeros((2, 5, 3)))


# ---------------------------------------------------------------- jacobian


def fd_jacobian(m, rig, motion, frame, h=1e-6):
    n, k = motion.n_frames, motion.n_clusters
    x0 = motion.pack().reshape(n, 7 * k)
    cols = []
    for p in range(7 * k):
        out = []
        for s in (1, -1):
            x = x0.copy()
            x[frame, p] += s * h
            out.append(drive_mesh(m, rig, MotionParams.unpack(x, n, k)).frames[frame].ravel())
        cols.append((out[0] - out[1]) / (2 * h))
    return np.stack(cols, axis=1)


def jacobian_rel_error(m, rig, motion, frame):
    J = motion_jacobian(m, rig, motion, frame).dense(rig.n_clusters)
    F = fd_jacobian(m, rig, motion, frame)
    return np.max(np.abs(J - F)) / np.max(np.abs(F))


def test_jacobian_against_finite_differences(rigged):
    m, rig = rigged
    rng = np.random.default_rng(0)
    motion = random_motion(rng, 4, 3)
    for frame in range(4):
        assert jacobian_rel_error(m, rig, motion, frame) < 1e-5


def test_jacobian_translation_block_is_identity(rigged, rng):
    m, rig = rigged
    jac = motion_jacobian(m, rig, random_motion(rng, 1, 3), 0)
    np.testing.assert_array_equal(jac.d_translation, np.broadcast_to(np.eye(3), (m.n_vertices, 3, 3)))


def test_motion_gradient_equals_jacobian_transpose(rigged, rng):
    m, rig = rigged
    motion = random_motion(rng, 3, 3)
    g = rng.standard_normal((3, m.n_vertices, 3))
    gt, gq = motion_gradient(m, rig, motion, g)
    for f in range(3):
        jac = motion_jacobian(m, rig, motion, f)
        flat = jac.dense(3).T @ g[f].ravel()
        np.testing.assert_allclose(np.concatenate([gt[f].ravel(), gq[f].ravel()]), flat, rtol=1e-10, atol=1e-12)
        pt, pq = jac.pullback(g[f], 3)
        np.testing.assert_allclose(pt, gt[f], atol=1e-12)
        np.testing.assert_allclose(pq, gq[f], atol=1e-12)


def test_quaternion_gradient_orthogonal_to_q(rigged, rng):
    m, rig = rigged
    motion = random_motion(rng, 2, 3)
    _, gq = motion_gradient(m, rig, motion, rng.standard_normal((2, m.n_vertices, 3)))
    # the loss does not depend on the quaternion norm
    np.testing.assert_allclose(np.einsum("nkc,nkc->nk", gq, motion.rotations), 0, atol=1e-10)


def test_jacobian_frame_range(rigged):
    m, rig = rigged
    with pytest.raises(ValidationError):
        motion_jacobian(m, rig, MotionParams.identity(2, 3), 2)
