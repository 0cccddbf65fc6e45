"""Motion objectives driving the animation loop.

An objective scores a ``KeyframeSequence``. Analytic objectives return the
gradient w.r.t. every frame's vertices; the others set
``finite_difference = True`` and expose ``frame_loss(n, vertices)`` so the
optimizer can difference each frame's handle parameters separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, rasterize
from .deform import KeyframeSequence
from .distill import DistillConfig, sds_gradient
from .errors import ValidationError
from .rigging import Rig


@dataclass
class ObjectiveValue:
    loss: float
    vertex_grad: np.ndarray | None = None


class MotionObjective:
    finite_difference = False
    distill_backed = False
    name = "objective"

    def evaluate(self, frames: KeyframeSequence, rng: np.random.Generator | None = None) -> ObjectiveValue:
        raise NotImplementedError

    def frame_loss(self, n: int, vertices: np.ndarray) -> float:
        raise NotImplementedError(f"{type(self).__name__} has no per-frame loss")


class VertexTargetObjective(MotionObjective):
    """Mean squared distance between selected vertices and per-frame targets."""

    name = "vertex-target"

    def __init__(self, targets, vertices=None):
        self.targets = np.asarray(targets, dtype=np.float64)
        if self.targets.ndim != 3 or self.targets.shape[2] != 3:
            raise ValidationError(f"vertex targets must be (N, n_vertices, 3), got {self.targets.shape}")
        nv = self.targets.shape[1]
        self.index = np.arange(nv) if vertices is None else np.asarray(vertices, dtype=np.int64)
        if len(self.index) == 0:
            raise ValidationError("vertex-target objective selects no vertices")

    def evaluate(self, frames, rng=None):
        if frames.frames.shape != self.targets.shape:
            raise ValidationError(f"frames {frames.frames.shape} vs targets {self.targets.shape}")
        diff = frames.frames[:, self.index] - self.targets[:, self.index]
        count = diff.shape[0] * diff.shape[1]
        grad = np.zeros_like(frames.frames)
        grad[:, self.index] = 2.0 * diff / count
        return ObjectiveValue(float(np.sum(diff * diff) / count), grad)


class TrajectoryObjective(MotionObjective):
    """Mean squared error between driven cluster centroids and target positions.

    ``targets`` is ``(N, K, 3)``; ``mask`` ``(N, K)`` picks which entries count.
    """

    name = "trajectory"

    def __init__(self, rig: Rig, targets, mask=None):
        self.rig = rig
        self.targets = np.asarray(targets, dtype=np.float64)
        if self.targets.shape[1:] != (rig.n_clusters, 3):
            raise ValidationError(f"trajectory targets must be (N, {rig.n_clusters}, 3), got {self.targets.shape}")
        self.mask = np.ones(self.targets.shape[:2], bool) if mask is None else np.asarray(mask, bool)
        if not self.mask.any():
            raise ValidationError("trajectory objective has no active targets")
        self.counts = np.bincount(rig.cluster_of, minlength=rig.n_clusters).astype(float)

    @classmethod
    def from_offsets(cls, rig: Rig, n_frames: int, offsets: list[tuple[int, int, tuple[float, float, float]]]):
        """Targets given as ``(frame, cluster, offset from the rest handle)`` triples."""
        targets = np.broadcast_to(rig.handles, (n_frames,) + rig.handles.shape).copy()
        mask = np.zeros((n_frames, rig.n_clusters), bool)
        for frame, cluster, off in offsets:
            if not (0 <= frame < n_frames and 0 <= cluster < rig.n_clusters):
                raise ValidationError(f"trajectory target (frame={frame}, cluster={cluster}) out of range")
            targets[frame, cluster] = rig.handles[cluster] + np.asarray(off, dtype=float)
            mask[frame, cluster] = True
        return cls(rig, targets, mask)

    def centroids(self, frames: np.ndarray) -> np.ndarray:
        k = self.rig.n_clusters
        c = self.rig.cluster_of
        return np.stack([np.stack([np.bincount(c, f[:, a], k) for a in range(3)], axis=1) for f in frames]) \
            / self.counts[None, :, None]

    def evaluate(self, frames, rng=None):
        if len(frames.frames) != len(self.targets):
            raise ValidationError(f"{len(frames.frames)} frames vs {len(self.targets)} trajectory frames")
        cen = self.centroids(frames.frames)
        diff = (cen - self.targets) * self.mask[:, :, None]
        m = self.mask.sum()
        per_cluster = 2.0 * diff / (m * self.counts[None, :, None])
        grad = per_cluster[:, self.rig.cluster_of]
        return ObjectiveValue(float(np.sum(diff * diff) / m), grad)


class SilhouetteObjective(MotionObjective):
    """Mean squared mask difference against per-frame target silhouettes."""

    name = "silhouette"
    finite_difference = True

    def __init__(self, camera: Camera, target_masks, faces):
        self.camera = camera
        self.targets = np.asarray(target_masks, dtype=np.float64)
        self.faces = np.asarray(faces)
        if self.targets.shape[1:] != tuple(camera.image_size):
            raise ValidationError(f"target masks {self.targets.shape[1:]} vs image size {camera.image_size}")

    def frame_loss(self, n, vertices):
        m = rasterize(self.camera, vertices, self.faces).astype(float)
        return float(np.mean((m - self.targets[n]) ** 2) / len(self.targets))

    def evaluate(self, frames, rng=None):
        return ObjectiveValue(sum(self.frame_loss(n, frames.frames[n]) for n in range(frames.n_frames)))


class SDSToyObjective(MotionObjective):
    """Silhouettes scored by score distillation against a toy denoiser.

    ``evaluate`` draws one SDS gradient per frame image and caches it; the
    per-frame surrogate ``<g_n, image_n(theta)>`` then has parameter gradient
    ``g_n . d image_n / d theta`` under finite differencing, which is the SDS
    update. The reported loss is ``0.5 * mean |g_n|^2``. ``denoiser`` may be
    a sequence with one denoiser per frame.
    """

    name = "sds-toy"
    finite_difference = True
    distill_backed = True

    def __init__(self, camera: Camera, denoiser, faces, cfg: DistillConfig = DistillConfig(), cond=None):
        self.camera = camera
        self.denoiser = denoiser
        self.faces = np.asarray(faces)
        self.cfg = cfg
        self.cond = cond
        self._grads: np.ndarray | None = None

    def denoiser_for(self, n: int):
        return self.denoiser[n] if isinstance(self.denoiser, (list, tuple)) else self.denoiser

    def render(self, vertices) -> np.ndarray:
        return rasterize(self.camera, vertices, self.faces).astype(float)

    def evaluate(self, frames, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        grads = np.stack([sds_gradient(self.render(frames.frames[n]), self.denoiser_for(n), self.cond, self.cfg, rng)
                          for n in range(frames.n_frames)])
        self._grads = grads
        return ObjectiveValue(float(0.5 * np.mean(np.sum(grads.reshape(len(grads), -1) ** 2, axis=1))))

    def frame_loss(self, n, vertices):
        if self._grads is None:
            raise ValidationError("evaluate() must run before frame_loss()")
        return float(np.sum(self._grads[n] * self.render(vertices)))
