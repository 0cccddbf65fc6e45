"""As-rigid-as-possible energy and rigidity regulation.

The rigidity loss for a keyframe sequence is::

    L_rig = lambda1 * sum_n E(rest, V'_n) + lambda2 * sum_n MSE(V'_n[A] - V_n[A])

where ``E`` is the ARAP energy with per-vertex optimal rotations, ``V_n`` the
driven keyframe, ``V'_n`` its regulated version and ``A`` the anchor vertices.
Frames do not interact, so each is regulated on its own by alternating a
per-vertex rotation fit with one sparse linear solve for all positions.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .deform import KeyframeSequence
from .errors import SingularSystemError, ValidationError
from .mesh import CotanLaplacian, TriangleMesh, cotangent_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RigidityConfig:
    lambda1: float = 1e-4
    lambda2: float = 1.0
    max_iters: int = 500
    tol: float = 1e-7
    regulate_every: int = 500

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("lambda1 and lambda2 must be non-negative")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.regulate_every < 1:
            raise ValidationError("regulate_every must be >= 1")


def _check_shapes(rest: TriangleMesh, deformed: np.ndarray, lap: CotanLaplacian) -> np.ndarray:
    d = np.asarray(deformed, dtype=np.float64)
    if d.shape != rest.vertices.shape:
        raise ValidationError(f"deformed vertices {d.shape} do not match rest mesh {rest.vertices.shape}")
    if lap.n_vertices != rest.n_vertices:
        raise ValidationError("laplacian was built for a different mesh")
    return d


def _edge_stacks(lap: CotanLaplacian):
    return lap.edges[:, 0], lap.edges[:, 1], lap.weights


def covariances(rest: TriangleMesh, deformed, lap: CotanLaplacian) -> np.ndarray:
    """Per-vertex ``S_i = sum_j w_ij (v_i - v_j)(v'_i - v'_j)^T``, shape ``(n, 3, 3)``."""
    d = _check_shapes(rest, deformed, lap)
    i, j, w = _edge_stacks(lap)
    e = rest.vertices[i] - rest.vertices[j]
    ed = d[i] - d[j]
    outer = (w[:, None, None] * e[:, :, None] * ed[:, None, :]).reshape(-1, 9)
    n = rest.n_vertices
    # both endpoints see the same outer product (the signs cancel)
    S = np.stack([np.bincount(i, outer[:, c], n) + np.bincount(j, outer[:, c], n) for c in range(9)], axis=1)
    return S.reshape(n, 3, 3)


def optimal_rotations(rest: TriangleMesh, deformed, lap: CotanLaplacian) -> np.ndarray:
    """Best-fit rotation of every one-ring, ``(n_vertices, 3, 3)``.

    Taken from the SVD of the weighted edge covariance. When the polar factor
    is a reflection the singular vector of the smallest singular value is
    flipped so that every ``det(R_i) = +1``.
    """
    empty = [k for k, r in enumerate(lap.one_rings) if len(r) == 0]
    if empty:
        raise ValidationError(f"isolated vertices without a one-ring: {empty[:10]}")
    S = covariances(rest, deformed, lap)
    U, _, Vt = np.linalg.svd(S)
    R = np.einsum("nji,nkj->nik", Vt, U)  # V U^T
    flip = np.linalg.det(R) < 0
    if flip.any():
        Uf = U[flip].copy()
        Uf[:, :, -1] *= -1
        R[flip] = np.einsum("nji,nkj->nik", Vt[flip], Uf)
    return R


def arap_energy(rest: TriangleMesh, deformed, lap: CotanLaplacian, rotations=None) -> float:
    """ARAP energy ``sum_i sum_{j in N(i)} w_ij |(v'_i - v'_j) - R_i (v_i - v_j)|^2``.

    Rotations default to the optimal ones for ``deformed``.
    """
    d = _check_shapes(rest, deformed, lap)
    R = optimal_rotations(rest, d, lap) if rotations is None else np.asarray(rotations)
    i, j, w = _edge_stacks(lap)
    e = rest.vertices[i] - rest.vertices[j]
    ed = d[i] - d[j]
    ri = ed - np.einsum("nab,nb->na", R[i], e)
    rj = ed - np.einsum("nab,nb->na", R[j], e)
    return float(np.sum(w * (np.einsum("na,na->n", ri, ri) + np.einsum("na,na->n", rj, rj))))


def arap_rhs(rest: TriangleMesh, lap: CotanLaplacian, rotations: np.ndarray) -> np.ndarray:
    """``b_i = sum_j w_ij (R_i + R_j)(v_i - v_j)``, so that ``grad E = 4 L V' - 2 b``."""
    i, j, w = _edge_stacks(lap)
    e = rest.vertices[i] - rest.vertices[j]
    Re = np.einsum("nab,nb->na", rotations[i] + rotations[j], e) * w[:, None]
    n = rest.n_vertices
    return np.stack([np.bincount(i, Re[:, a], n) - np.bincount(j, Re[:, a], n) for a in range(3)], axis=1)


def arap_gradient(rest: TriangleMesh, deformed, lap: CotanLaplacian, rotations=None) -> np.ndarray:
    """Gradient of the ARAP energy w.r.t. deformed positions with rotations held fixed."""
    d = _check_shapes(rest, deformed, lap)
    R = optimal_rotations(rest, d, lap) if rotations is None else rotations
    return 4.0 * (lap.matrix() @ d) - 2.0 * arap_rhs(rest, lap, R)


def anchor_mse(regulated, driven, anchors) -> float:
    a = np.asarray(anchors, dtype=np.int64)
    if len(a) == 0:
        return 0.0
    diff = np.asarray(regulated)[a] - np.asarray(driven)[a]
    return float(np.mean(diff * diff))


def _frames_array(x, base: TriangleMesh) -> np.ndarray:
    arr = x.frames if isinstance(x, KeyframeSequence) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[1:] != base.vertices.shape:
        raise ValidationError(f"frames {arr.shape} do not match mesh with {base.n_vertices} vertices")
    return arr


def rigidity_terms(base: TriangleMesh, frames, regulated, anchors, lap: CotanLaplacian) -> tuple[float, float]:
    """Unweighted ``(sum_n E, sum_n MSE)`` for a sequence."""
    driven = _frames_array(frames, base)
    reg = _frames_array(regulated, base)
    if driven.shape != reg.shape:
        raise ValidationError(f"{len(driven)} driven frames vs {len(reg)} regulated frames")
    e_sum = sum(arap_energy(base, reg[n], lap) for n in range(len(reg)))
    m_sum = sum(anchor_mse(reg[n], driven[n], anchors) for n in range(len(reg)))
    return e_sum, m_sum


def rigidity_loss(base: TriangleMesh, frames, regulated, anchors, cfg: RigidityConfig,
                  lap: CotanLaplacian | None = None) -> float:
    lap = lap if lap is not None else cotangent_weights(base)
    e_sum, m_sum = rigidity_terms(base, frames, regulated, anchors, lap)
    return cfg.lambda1 * e_sum + cfg.lambda2 * m_sum


# ----------------------------------------------------------------- solver


@dataclass
class IterationRecord:
    iteration: int
    energy: float
    mse: float
    loss: float


@dataclass
class FrameReport:
    frame: int
    records: list[IterationRecord]
    stop_reason: str  # "converged", "max_iters" or "trivial"

    @property
    def iterations(self) -> int:
        return self.records[-1].iteration if self.records else 0

    @property
    def initial_loss(self) -> float:
        return self.records[0].loss

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss


@dataclass
class RegulationResult:
    frames: KeyframeSequence
    reports: list[FrameReport]
    cfg: RigidityConfig = field(repr=False)

    @property
    def initial_loss(self) -> float:
        return sum(r.initial_loss for r in self.reports)

    @property
    def final_loss(self) -> float:
        return sum(r.final_loss for r in self.reports)

    def log_lines(self) -> list[str]:
        out = []
        for rep in self.reports:
            for rec in rep.records:
                out.append(f"frame={rep.frame} iter={rec.iteration} E={rec.energy:.12g} "
                           f"MSE={rec.mse:.12g} L_rig={rec.loss:.12g}")
            out.append(f"frame={rep.frame} stop={rep.stop_reason} iterations={rep.iterations}")
        return out


class RegulationSolver:
    """Local/global minimizer of one frame's rigidity loss.

    The global step solves ``(2 l1 L + c P) V' = l1 b(R) + c P V`` with
    ``c = l2 / (3 |A|)`` and ``P`` the anchor selector. The matrix depends
    only on the weights, the anchors and the lambdas, so it is factorized once
    and shared read-only by every frame and iteration.
    """

    def __init__(self, rest: TriangleMesh, lap: CotanLaplacian, anchors, cfg: RigidityConfig):
        self.rest = rest
        self.lap = lap
        self.anchors = np.asarray(anchors, dtype=np.int64)
        self.cfg = cfg
        self.trivial = cfg.lambda1 == 0.0
        self._lu = None
        if lap.has_negative:
            log.warning("negative cotangent weights present; regulation is not guaranteed monotone")
        if self.trivial:
            return
        if cfg.lambda2 == 0.0 or len(self.anchors) == 0:
            raise SingularSystemError(
                "regulation system is singular without anchor terms: set lambda2 > 0 and provide fps anchors "
                "(or pin a vertex)")
        L = lap.matrix()
        n_comp, labels = connected_components(L, directed=False)
        missing = sorted(set(range(n_comp)) - set(labels[self.anchors].tolist()))
        if missing:
            raise SingularSystemError(
                f"{len(missing)} connected component(s) have no anchor vertex; the regulation system is singular. "
                "Increase the fps fraction or pin a vertex in each component.")
        self.c = cfg.lambda2 / (3.0 * len(self.anchors))
        pdiag = np.zeros(rest.n_vertices)
        pdiag[self.anchors] = self.c
        A = (2.0 * cfg.lambda1) * L + sp.diags(pdiag)
        self._lu = splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A")

    def global_step(self, rotations: np.ndarray, driven: np.ndarray) -> np.ndarray:
        rhs = self.cfg.lambda1 * arap_rhs(self.rest, self.lap, rotations)
        rhs[self.anchors] += self.c * driven[self.anchors]
        return self._lu.solve(rhs)

    def objective(self, positions, rotations, driven) -> tuple[float, float, float]:
        e = arap_energy(self.rest, positions, self.lap, rotations)
        m = anchor_mse(positions, driven, self.anchors)
        return e, m, self.cfg.lambda1 * e + self.cfg.lambda2 * m

    def run(self, driven, frame: int = 0) -> tuple[np.ndarray, FrameReport]:
        driven = np.asarray(driven, dtype=np.float64)
        V = driven.copy()
        R = optimal_rotations(self.rest, V, self.lap)
        e, m, loss = self.objective(V, R, driven)
        records = [IterationRecord(0, e, m, loss)]
        if self.trivial:
            # lambda1 = 0: the anchor term alone is already zero at the input
            return V, FrameReport(frame, records, "trivial")
        reason = "max_iters"
        for it in range(1, self.cfg.max_iters + 1):
            V = self.global_step(R, driven)
            R = optimal_rotations(self.rest, V, self.lap)
            e, m, new = self.objective(V, R, driven)
            records.append(IterationRecord(it, e, m, new))
            if new > loss + 1e-12 * max(1.0, abs(loss)):
                log.warning("frame %d: rigidity loss rose from %.12g to %.12g at iteration %d", frame, loss, new, it)
            done = abs(loss - new) < self.cfg.tol
            loss = new
            if done:
                reason = "converged"
                break
        return V, FrameReport(frame, records, reason)


def regulate(base: TriangleMesh, frames: KeyframeSequence, anchors, lap: CotanLaplacian,
             cfg: RigidityConfig, workers: int = 1, solver: RegulationSolver | None = None) -> RegulationResult:
    """Regulate every keyframe independently; anchors are pulled toward their driven positions."""
    if frames.base.n_vertices != base.n_vertices:
        raise ValidationError("keyframes were driven from a different mesh")
    solver = solver or RegulationSolver(base, lap, anchors, cfg)

    def one(n):
        return solver.run(frames.frames[n], n)

    if workers > 1 and frames.n_frames > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, range(frames.n_frames)))
    else:
        results = [one(n) for n in range(frames.n_frames)]
    out = KeyframeSequence(base, np.stack([r[0] for r in results]))
    return RegulationResult(out, [r[1] for r in results], cfg)
