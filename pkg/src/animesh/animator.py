"""The animation loop: optimize handle motion, regulate periodically, refit handles."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .arap import RegulationResult, RegulationSolver, RigidityConfig, regulate, rigidity_terms
from .deform import KeyframeSequence, MotionParams, drive_frame, drive_mesh, matrix_to_quat, motion_gradient, quat_to_matrix
from .errors import NumericalError, ValidationError
from .mesh import CotanLaplacian, TriangleMesh, cotangent_weights
from .objectives import MotionObjective
from .rigging import Rig, fps_sample

log = logging.getLogger(__name__)

DEFAULT_KEYFRAMES = 16


@dataclass(frozen=True)
class AnimateSchedule:
    """Outer-loop settings.

    ``regulate_every`` and ``regulate_max`` override the corresponding fields
    of the ``RigidityConfig`` handed to ``animate``.
    """

    n_frames: int = DEFAULT_KEYFRAMES
    total_iters: int = 30_000
    regulate_every: int = 500
    regulate_max: int = 500
    lr: float = 1e-2
    lr_final: float | None = None  # cosine decay to this value when set
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    fd_step: float = 1e-2
    sds_weight: float = 0.1
    temporal_weight: float = 0.0
    workers: int = 1

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValidationError("total_iters must be >= 1")
        if self.regulate_every < 1:
            raise ValidationError("regulate_every must be >= 1")
        if self.regulate_max < 1:
            raise ValidationError("regulate_max must be >= 1")
        if self.n_frames < 1:
            raise ValidationError("n_frames must be >= 1")
        if not self.lr >= 0 or not self.fd_step > 0:
            raise ValidationError("lr must be >= 0 and fd_step > 0")

    def lr_at(self, it: int) -> float:
        if self.lr_final is None or self.total_iters == 1:
            return self.lr
        frac = (it - 1) / (self.total_iters - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, size: int, betas=(0.9, 0.999), eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0

    def step(self, x: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return x - lr * mhat / (np.sqrt(vhat) + self.eps)


# ------------------------------------------------------------------- refit


@dataclass
class RefitResult:
    motion: MotionParams
    degenerate: list[tuple[int, int]]  # (frame, cluster) fitted by translation only


def _kabsch(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Rotation minimizing ``sum |R p - q|^2`` for centered point sets."""
    U, _, Vt = np.linalg.svd(P.T @ Q)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


def refit_handles(rig: Rig, base: TriangleMesh, regulated, previous: MotionParams | None = None) -> RefitResult:
    """Least-squares rigid transform of every cluster onto the regulated positions.

    Quaternion signs follow ``previous`` when given, so the optimizer sees a
    continuous parameter path. Clusters with fewer than three non-collinear
    rest vertices get an identity rotation and are listed in ``degenerate``.
    """
    frames = regulated.frames if isinstance(regulated, KeyframeSequence) else np.asarray(regulated, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.shape[1] != base.n_vertices:
        raise ValidationError(f"regulated frames have {frames.shape[1]} vertices, mesh has {base.n_vertices}")
    n, k = len(frames), rig.n_clusters
    t = np.zeros((n, k, 3))
    q = np.zeros((n, k, 4))
    q[..., 0] = 1.0
    members = [rig.members(c) for c in range(k)]
    rest_local = []
    rigid_ok = []
    for c in range(k):
        P = base.vertices[members[c]] - rig.handles[c]
        rest_local.append(P)
        s = np.linalg.svd(P, compute_uv=False) if len(P) >= 3 else np.zeros(1)
        rigid_ok.append(len(P) >= 3 and s[1] > 1e-9 * max(s[0], 1e-300))
    degenerate = []
    for f in range(n):
        for c in range(k):
            Qp = frames[f, members[c]]
            centroid = Qp.mean(axis=0)
            t[f, c] = centroid - rig.handles[c]
            if not rigid_ok[c]:
                degenerate.append((f, c))
                continue
            R = _kabsch(rest_local[c], Qp - centroid)
            qq = matrix_to_quat(R)
            if previous is not None and np.dot(qq, previous.rotations[f, c]) < 0:
                qq = -qq
            q[f, c] = qq
    return RefitResult(MotionParams(t, q), degenerate)


# ------------------------------------------------------------------ animate


@dataclass
class HistoryRecord:
    iteration: int
    objective: float
    energy: float | None = None
    mse: float | None = None


@dataclass
class RegulationEvent:
    iteration: int
    initial_loss: float
    final_loss: float
    result: RegulationResult = field(repr=False)
    degenerate: list = field(default_factory=list)


@dataclass
class AnimationResult:
    motion: MotionParams
    frames: KeyframeSequence
    history: list[HistoryRecord]
    regulations: list[RegulationEvent]
    final_objective: float

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "objective", "energy", "mse"])
            for h in self.history:
                w.writerow([h.iteration, repr(h.objective),
                            "" if h.energy is None else repr(h.energy),
                            "" if h.mse is None else repr(h.mse)])


def _fd_gradient(mesh, rig, motion: MotionParams, objective: MotionObjective, step: float) -> np.ndarray:
    """Central differences of each frame's loss w.r.t. that frame's 7K parameters."""
    n, k = motion.n_frames, motion.n_clusters
    grad = np.zeros((n, 7 * k))
    for f in range(n):
        base = np.concatenate([motion.translations[f].ravel(), motion.rotations[f].ravel()])
        for p in range(7 * k):
            vals = []
            for sgn in (1.0, -1.0):
                x = base.copy()
                x[p] += sgn * step
                trans = x[:3 * k].reshape(k, 3)
                rot = quat_to_matrix(x[3 * k:].reshape(k, 4))
                verts = drive_frame(mesh.vertices, rig.cluster_of, rig.handles, rot, trans)
                vals.append(objective.frame_loss(f, verts))
            grad[f, p] = (vals[0] - vals[1]) / (2.0 * step)
    return grad.ravel()


def _temporal_penalty(motion: MotionParams, weight: float) -> tuple[float, np.ndarray]:
    n, k = motion.n_frames, motion.n_clusters
    g = np.zeros((n, 7 * k))
    if weight == 0.0 or n < 2:
        return 0.0, g.ravel()
    x = np.concatenate([motion.translations.reshape(n, -1), motion.rotations.reshape(n, -1)], axis=1)
    d = np.diff(x, axis=0)
    g[1:] += 2 * weight * d
    g[:-1] -= 2 * weight * d
    return float(weight * np.sum(d * d)), g.ravel()


def animate(mesh: TriangleMesh, rig: Rig, objective: MotionObjective, schedule: AnimateSchedule = AnimateSchedule(),
            cfg: RigidityConfig = RigidityConfig(), seed=0, lap: CotanLaplacian | None = None,
            initial: MotionParams | None = None) -> AnimationResult:
    """Optimize keyframe handle motion against ``objective``.

    Starts from identity motion (zero translations, identity quaternions)
    unless ``initial`` is given. After every ``schedule.regulate_every``
    optimizer steps the driven frames are regulated and the handle
    parameters refit to the regulated positions.
    """
    if rig.n_vertices != mesh.n_vertices:
        raise ValidationError("rig was built for a different mesh")
    cfg = replace(cfg, regulate_every=schedule.regulate_every, max_iters=schedule.regulate_max)
    n, k = schedule.n_frames, rig.n_clusters
    motion = initial if initial is not None else MotionParams.identity(n, k)
    if motion.n_frames != n or motion.n_clusters != k:
        raise ValidationError(f"initial motion is {motion.n_frames}x{motion.n_clusters}, expected {n}x{k}")
    rng = np.random.default_rng(seed)
    anchors = rig.fps_anchors if len(rig.fps_anchors) else fps_sample(mesh)

    solver = None
    if schedule.total_iters >= schedule.regulate_every:
        lap = lap if lap is not None else cotangent_weights(mesh)
        solver = RegulationSolver(mesh, lap, anchors, cfg)

    scale = schedule.sds_weight if objective.distill_backed else 1.0
    opt = Adam(7 * k * n, schedule.betas, schedule.adam_eps)
    x = motion.pack()
    history: list[HistoryRecord] = []
    regulations: list[RegulationEvent] = []

    for it in range(1, schedule.total_iters + 1):
        motion = MotionParams.unpack(x, n, k)
        frames = drive_mesh(mesh, rig, motion, schedule.workers)
        val = objective.evaluate(frames, rng)
        loss = scale * val.loss
        if not math.isfinite(loss):
            raise NumericalError("objective returned a non-finite loss", iteration=it)
        if objective.finite_difference:
            grad = scale * _fd_gradient(mesh, rig, motion, objective, schedule.fd_step)
        else:
            gt, gq = motion_gradient(mesh, rig, motion, scale * val.vertex_grad)
            grad = np.concatenate([gt.reshape(n, -1), gq.reshape(n, -1)], axis=1).ravel()
        tp, tg = _temporal_penalty(motion, schedule.temporal_weight)
        grad = grad + tg
        if not np.all(np.isfinite(grad)):
            raise NumericalError("objective gradient is not finite", iteration=it)
        history.append(HistoryRecord(it, loss + tp))
        x = opt.step(x, grad, schedule.lr_at(it))

        if solver is not None and it % schedule.regulate_every == 0:
            current = MotionParams.unpack(x, n, k)
            driven = drive_mesh(mesh, rig, current, schedule.workers)
            reg = regulate(mesh, driven, anchors, solver.lap, cfg, schedule.workers, solver=solver)
            refit = refit_handles(rig, mesh, reg.frames, previous=current)
            x = refit.motion.pack()
            e_sum, m_sum = rigidity_terms(mesh, driven, reg.frames, anchors, solver.lap)
            history[-1].energy, history[-1].mse = e_sum, m_sum
            regulations.append(RegulationEvent(it, reg.initial_loss, reg.final_loss, reg, refit.degenerate))
            log.info("iteration %d: regulation L_rig %.6g -> %.6g", it, reg.initial_loss, reg.final_loss)
            if refit.degenerate:
                log.warning("iteration %d: %d cluster fits were translation-only", it, len(refit.degenerate))

    motion = MotionParams.unpack(x, n, k)
    frames = drive_mesh(mesh, rig, motion, schedule.workers)
    final = scale * objective.evaluate(frames, rng).loss
    return AnimationResult(motion, frames, history, regulations, final)
