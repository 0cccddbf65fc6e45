"""Handle-based keyframe driving.

Every vertex follows the rigid transform of its cluster's handle::

    v_{n,i} = R_{n,k}(v_i - h_k) + t_{n,k} + h_k,    k = cluster_of[i]

Quaternions are stored (w, x, y, z) and may be unnormalized; they are
normalized whenever a rotation matrix is formed, and the Jacobian accounts
for that normalization.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .mesh import TriangleMesh
from .rigging import Rig

QUAT_EPS = 1e-12


# ---------------------------------------------------------------- quaternions


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < QUAT_EPS):
        raise ValidationError("zero-norm quaternion")
    return q / norm


def _unit_quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a (batch of) quaternion(s) ``(w, x, y, z)``.

    Input is renormalized first, so ``q`` and ``c * q`` for any ``c != 0``
    give the same matrix.
    """
    return _unit_quat_to_matrix(normalize_quat(q))


def _unit_quat_matrix_grad(q: np.ndarray) -> np.ndarray:
    """d R / d q_c for unit q, treating the polynomial formula literally. Shape (..., 4, 3, 3)."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    g = np.zeros(q.shape[:-1] + (4, 3, 3))
    # d/dw
    g[..., 0, 0, 1] = -2 * z
    g[..., 0, 0, 2] = 2 * y
    g[..., 0, 1, 0] = 2 * z
    g[..., 0, 1, 2] = -2 * x
    g[..., 0, 2, 0] = -2 * y
    g[..., 0, 2, 1] = 2 * x
    # d/dx
    g[..., 1, 0, 1] = 2 * y
    g[..., 1, 0, 2] = 2 * z
    g[..., 1, 1, 0] = 2 * y
    g[..., 1, 1, 1] = -4 * x
    g[..., 1, 1, 2] = -2 * w
    g[..., 1, 2, 0] = 2 * z
    g[..., 1, 2, 1] = 2 * w
    g[..., 1, 2, 2] = -4 * x
    # d/dy
    g[..., 2, 0, 0] = -4 * y
    g[..., 2, 0, 1] = 2 * x
    g[..., 2, 0, 2] = 2 * w
    g[..., 2, 1, 0] = 2 * x
    g[..., 2, 1, 2] = 2 * z
    g[..., 2, 2, 0] = -2 * w
    g[..., 2, 2, 1] = 2 * z
    g[..., 2, 2, 2] = -4 * y
    # d/dz
    g[..., 3, 0, 0] = -4 * z
    g[..., 3, 0, 1] = -2 * w
    g[..., 3, 0, 2] = 2 * x
    g[..., 3, 1, 0] = 2 * w
    g[..., 3, 1, 1] = -4 * z
    g[..., 3, 1, 2] = 2 * y
    g[..., 3, 2, 0] = 2 * x
    g[..., 3, 2, 1] = 2 * y
    return g


def quat_matrix_grad(q) -> np.ndarray:
    """Derivative of ``quat_to_matrix(q)`` w.r.t. the raw (unnormalized) components.

    Returns shape ``(..., 4, 3, 3)``; entry ``[..., c, :, :]`` is ``dR/dq_c``.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < QUAT_EPS):
        raise ValidationError("zero-norm quaternion")
    u = q / norm
    gu = _unit_quat_matrix_grad(u)
    # d u_a / d q_c = (delta_ac - u_a u_c) / |q|
    proj = (np.eye(4) - u[..., :, None] * u[..., None, :]) / norm[..., None]
    return np.einsum("...ac,...aij->...cij", proj, gu)


def matrix_to_quat(m) -> np.ndarray:
    """Unit quaternion (w >= 0) of a proper rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((len(flat), 4))
    for n, r in enumerate(flat):
        tr = np.trace(r)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = (0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s)
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = ((r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s)
        elif r[1, 1] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = ((r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s)
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = ((r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s)
        q = np.array(q)
        q /= np.linalg.norm(q)
        out[n] = -q if q[0] < 0 else q
    return out.reshape(m.shape[:-2] + (4,))


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


# ------------------------------------------------------------------- motion


@dataclass(frozen=True, eq=False)
class MotionParams:
    """Per-keyframe, per-handle translations ``(N, K, 3)`` and quaternions ``(N, K, 4)``."""

    translations: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        t = np.array(self.translations, dtype=np.float64)
        r = np.array(self.rotations, dtype=np.float64)
        if t.ndim != 3 or t.shape[2] != 3:
            raise ValidationError(f"translations must be (N, K, 3), got {t.shape}")
        if r.shape != t.shape[:2] + (4,):
            raise ValidationError(f"rotations must be {t.shape[:2] + (4,)}, got {r.shape}")
        if t.shape[0] < 1:
            raise ValidationError("need at least one keyframe")
        if np.any(np.linalg.norm(r, axis=-1) < QUAT_EPS):
            raise ValidationError("zero-norm quaternion in motion")
        t.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "translations", t)
        object.__setattr__(self, "rotations", r)

    @classmethod
    def identity(cls, n_frames: int, n_clusters: int) -> "MotionParams":
        r = np.zeros((n_frames, n_clusters, 4))
        r[..., 0] = 1.0
        return cls(np.zeros((n_frames, n_clusters, 3)), r)

    @property
    def n_frames(self) -> int:
        return self.translations.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.translations.shape[1]

    def normalized(self) -> "MotionParams":
        return MotionParams(self.translations, normalize_quat(self.rotations))

    def matrices(self) -> np.ndarray:
        return quat_to_matrix(self.rotations)

    def pack(self) -> np.ndarray:
        """Flat parameter vector, per frame ``[t (K*3), q (K*4)]``."""
        n, k = self.translations.shape[:2]
        return np.concatenate([self.translations.reshape(n, k * 3), self.rotations.reshape(n, k * 4)], axis=1).ravel()

    @classmethod
    def unpack(cls, flat, n_frames: int, n_clusters: int) -> "MotionParams":
        a = np.asarray(flat, dtype=np.float64).reshape(n_frames, 7 * n_clusters)
        return cls(a[:, :3 * n_clusters].reshape(n_frames, n_clusters, 3),
                   a[:, 3 * n_clusters:].reshape(n_frames, n_clusters, 4))


@dataclass(frozen=True, eq=False)
class KeyframeSequence:
    """Driven keyframes sharing the rest mesh's faces. ``frames`` is ``(N, n_vertices, 3)``."""

    base: TriangleMesh
    frames: np.ndarray

    def __post_init__(self):
        f = np.array(self.frames, dtype=np.float64)
        if f.ndim != 3 or f.shape[1:] != self.base.vertices.shape:
            raise ValidationError(f"frames must be (N, {self.base.n_vertices}, 3), got {f.shape}")
        f.setflags(write=False)
        object.__setattr__(self, "frames", f)

    @property
    def faces(self) -> np.ndarray:
        return self.base.faces

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def frame_mesh(self, n: int) -> TriangleMesh:
        return self.base.with_vertices(self.frames[n])


def _check_dims(mesh: TriangleMesh, rig: Rig, motion: MotionParams):
    if rig.n_vertices != mesh.n_vertices:
        raise ValidationError(f"rig has {rig.n_vertices} vertices, mesh has {mesh.n_vertices}")
    if motion.n_clusters != rig.n_clusters:
        raise ValidationError(f"motion has {motion.n_clusters} handles, rig has {rig.n_clusters}")


def drive_frame(rest: np.ndarray, cluster_of: np.ndarray, handles: np.ndarray,
                rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """One keyframe: ``rot`` is ``(K, 3, 3)``, ``trans`` is ``(K, 3)``.

    Evaluated as ``v + (R - I)(v - h) + t``, which equals ``R(v - h) + t + h``
    but returns the rest positions bit-for-bit under identity motion.
    """
    local = rest - handles[cluster_of]
    delta = rot - np.eye(3)
    return rest + np.einsum("nij,nj->ni", delta[cluster_of], local) + trans[cluster_of]


def drive_mesh(mesh: TriangleMesh, rig: Rig, motion: MotionParams, workers: int = 1) -> KeyframeSequence:
    """Drive the rest mesh through every keyframe of ``motion``."""
    _check_dims(mesh, rig, motion)
    mats = motion.matrices()
    t = motion.translations

    def one(n):
        return drive_frame(mesh.vertices, rig.cluster_of, rig.handles, mats[n], t[n])

    if workers > 1 and motion.n_frames > 1:
        with ThreadPoolExecutor(workers) as ex:
            frames = list(ex.map(one, range(motion.n_frames)))
    else:
        frames = [one(n) for n in range(motion.n_frames)]
    return KeyframeSequence(mesh, np.stack(frames))


@dataclass(frozen=True)
class MotionJacobian:
    """Per-vertex derivative blocks for one keyframe.

    Only the vertex's own cluster has non-zero derivatives, so the blocks are
    stored compactly: ``d_translation[i]`` is ``dv_i/dt_k`` (3x3) and
    ``d_rotation[i]`` is ``dv_i/dq_k`` (3x4) for ``k = cluster_of[i]``.
    """

    cluster_of: np.ndarray
    d_translation: np.ndarray
    d_rotation: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(self.cluster_of.max()) + 1

    def dense(self, n_clusters: int | None = None) -> np.ndarray:
        """Full ``(n_vertices*3, n_clusters*7)`` matrix with columns ordered as one frame of
        ``MotionParams.pack``: all translations, then all quaternions."""
        k = self.n_clusters if n_clusters is None else n_clusters
        nv = len(self.cluster_of)
        J = np.zeros((nv, 3, 7 * k))
        idx = np.arange(nv)
        for a in range(3):
            J[idx, :, 3 * self.cluster_of + a] = self.d_translation[:, :, a]
        for c in range(4):
            J[idx, :, 3 * k + 4 * self.cluster_of + c] = self.d_rotation[:, :, c]
        return J.reshape(nv * 3, 7 * k)

    def pullback(self, vertex_grad: np.ndarray, n_clusters: int) -> tuple[np.ndarray, np.ndarray]:
        """Chain a loss gradient w.r.t. vertices ``(n_vertices, 3)`` back to ``(K, 3)`` and ``(K, 4)``."""
        g = np.asarray(vertex_grad)
        gt = np.stack([np.bincount(self.cluster_of, g[:, a], n_clusters) for a in range(3)], axis=1)
        per = np.einsum("nic,ni->nc", self.d_rotation, g)
        gq = np.stack([np.bincount(self.cluster_of, per[:, c], n_clusters) for c in range(4)], axis=1)
        return gt, gq


def motion_jacobian(mesh: TriangleMesh, rig: Rig, motion: MotionParams, frame: int) -> MotionJacobian:
    """Analytic derivatives of one keyframe's vertices w.r.t. that frame's handle parameters."""
    _check_dims(mesh, rig, motion)
    if not 0 <= frame < motion.n_frames:
        raise ValidationError(f"frame {frame} out of range [0, {motion.n_frames})")
    nv = mesh.n_vertices
    dR = quat_matrix_grad(motion.rotations[frame])  # (K, 4, 3, 3)
    local = mesh.vertices - rig.handles[rig.cluster_of]
    d_rot = np.einsum("ncij,nj->nic", dR[rig.cluster_of], local)
    d_trans = np.broadcast_to(np.eye(3), (nv, 3, 3)).copy()
    return MotionJacobian(rig.cluster_of, d_trans, d_rot)


def motion_gradient(mesh: TriangleMesh, rig: Rig, motion: MotionParams,
                    vertex_grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pull back ``(N, n_vertices, 3)`` vertex gradients to translation and quaternion gradients."""
    _check_dims(mesh, rig, motion)
    k = rig.n_clusters
    local = mesh.vertices - rig.handles[rig.cluster_of]
    dR = quat_matrix_grad(motion.rotations)  # (N, K, 4, 3, 3)
    gt = np.empty(motion.translations.shape)
    gq = np.empty(motion.rotations.shape)
    for n in range(motion.n_frames):
        g = vertex_grads[n]
        gt[n] = np.stack([np.bincount(rig.cluster_of, g[:, a], k) for a in range(3)], axis=1)
        # M_k = sum_i g_i (v_i - h_k)^T ; dL/dq_c = <dR/dq_c, M_k>
        outer = (g[:, :, None] * local[:, None, :]).reshape(-1, 9)
        M = np.stack([np.bincount(rig.cluster_of, outer[:, e], k) for e in range(9)], axis=1).reshape(k, 3, 3)
        gq[n] = np.einsum("kcij,kij->kc", dR[n], M)
    return gt, gq
