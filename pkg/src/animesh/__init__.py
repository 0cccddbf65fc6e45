"""Handle-driven mesh animation with as-rigid-as-possible regulation.

Rest mesh -> k-means clusters ("pseudo-skinning") -> per-cluster rigid motion
of 16 keyframes -> periodic rigidity regulation of the driven frames.
"""

__version__ = "0.1.0"

from .animator import AnimateSchedule, AnimationResult, animate, refit_handles
from .arap import RegulationSolver, RigidityConfig, arap_energy, optimal_rotations, regulate, rigidity_loss
from .camera import Camera, CameraRanges, rasterize, render_silhouette, sample_camera
from .deform import KeyframeSequence, MotionParams, drive_mesh, motion_gradient, motion_jacobian
from .distill import DistillConfig, mv_sds_gradient, sds_gradient, vsd_gradient
from .errors import (AnimeshError, HashMismatchError, NumericalError, SchemaError, SingularSystemError,
                     UnsupportedVersionError, ValidationError)
from .mesh import TriangleMesh, cotangent_weights, load_obj, save_obj
from .rigging import Rig, build_rig, farthest_point_sampling, fps_sample, kmeans_cluster
from .scene import AnimationDoc, Placement, SceneDoc, compose, load_doc, save_doc

__all__ = [
    "AnimateSchedule", "AnimationResult", "animate", "refit_handles",
    "RegulationSolver", "RigidityConfig", "arap_energy", "optimal_rotations", "regulate", "rigidity_loss",
    "Camera", "CameraRanges", "rasterize", "render_silhouette", "sample_camera",
    "KeyframeSequence", "MotionParams", "drive_mesh", "motion_gradient", "motion_jacobian",
    "DistillConfig", "mv_sds_gradient", "sds_gradient", "vsd_gradient",
    "AnimeshError", "HashMismatchError", "NumericalError", "SchemaError", "SingularSystemError",
    "UnsupportedVersionError", "ValidationError",
    "TriangleMesh", "cotangent_weights", "load_obj", "save_obj",
    "Rig", "build_rig", "farthest_point_sampling", "fps_sample", "kmeans_cluster",
    "AnimationDoc", "Placement", "SceneDoc", "compose", "load_doc", "save_doc",
]
