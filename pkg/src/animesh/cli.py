"""animesh command line: cluster -> animate -> regulate -> compose / export.

Exit codes: 0 success, 2 usage, 3 validation, 4 I/O, 5 numerical failure.
Logs go to standard error; artifacts are written only to the named files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .animator import AnimateSchedule, animate, refit_handles
from .arap import RigidityConfig, regulate, rigidity_loss, rigidity_terms
from .camera import Camera, CameraRanges, rasterize, render_silhouette, sample_camera
from .config import PipelineConfig, resolve_config, seed_stream
from .deform import KeyframeSequence, MotionParams, drive_mesh
from .distill import DistillConfig, GaussianToyDenoiser
from .errors import AnimeshError, NumericalError, SchemaError, ValidationError
from .mesh import cotangent_weights, load_obj, save_obj
from .objectives import (SDSToyObjective, SilhouetteObjective, TrajectoryObjective,
                         VertexTargetObjective)
from .rigging import build_rig
from .scene import AnimationDoc, compose, load_doc, load_scene, save_doc

log = logging.getLogger("animesh")

EXIT_USAGE, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 2, 3, 4, 5

_pair_f = dict(type=float, nargs=2, metavar=("LO", "HI"))
FLAGS = {
    "seed": dict(type=int),
    "threads": dict(type=int, help="cap on worker threads"),
    "clusters": dict(type=int),
    "fps_fraction": dict(type=float),
    "fps_start": dict(type=int),
    "keyframes": dict(type=int),
    "face_budget": dict(type=int),
    "embed_mesh": dict(action=argparse.BooleanOptionalAction),
    "lambda1": dict(type=float),
    "lambda2": dict(type=float),
    "tol": dict(type=float),
    "max_iters": dict(type=int, help="local/global iteration cap per regulation"),
    "clamp_weights": dict(action=argparse.BooleanOptionalAction),
    "iters": dict(type=int, help="outer optimizer iterations"),
    "regulate_every": dict(type=int),
    "lr": dict(type=float),
    "lr_final": dict(type=float),
    "fd_step": dict(type=float),
    "temporal_weight": dict(type=float),
    "sds_weight": dict(type=float),
    "objective": dict(choices=["trajectory", "vertex-target", "silhouette", "sds-toy"]),
    "target": dict(help="objective target JSON"),
    "fov_range": _pair_f,
    "elevation_range": _pair_f,
    "azimuth_range": _pair_f,
    "distance_range": _pair_f,
    "image_size": dict(type=int, nargs=2, metavar=("H", "W")),
    "t_range": _pair_f,
    "guidance_scale": dict(type=float),
    "toy_sigma": dict(type=float),
    "out": dict(),
    "history": dict(help="loss history CSV"),
    "frames": dict(help="directory for frame_XXXX.obj files"),
}

_REG = ["lambda1", "lambda2", "tol", "max_iters", "clamp_weights"]
COMMANDS = {
    "cluster": ["clusters", "fps_fraction", "fps_start", "keyframes", "face_budget", "embed_mesh", "out"],
    "animate": ["objective", "target", "iters", "regulate_every", "lr", "lr_final", "fd_step", "temporal_weight",
                "sds_weight", "fov_range", "elevation_range", "azimuth_range", "distance_range", "image_size",
                "t_range", "guidance_scale", "toy_sigma", "out", "history"] + _REG,
    "regulate": _REG + ["out"],
    "compose": ["frames"],
    "export": ["frames"],
    "info": _REG,
}
_HELP = {
    "cluster": "build a rig from an OBJ mesh and write an animation document with identity motion",
    "animate": "optimize handle motion against an objective",
    "regulate": "apply one rigidity regulation to the stored frames and refit handles",
    "compose": "merge a scene of placed animations and export its frames",
    "export": "write the keyframes of an animation as OBJ files",
    "info": "summarize an animation document",
}
_INPUT = {"cluster": "mesh.obj", "compose": "scene.json"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="animesh", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        p.add_argument("input", metavar=_INPUT.get(name, "anim.json"))
        p.add_argument("--config", help="pipeline config JSON (default: $ANIMESH_CONFIG)")
        for key in ["seed", "threads"] + keys:
            flags = ["--" + key.replace("_", "-")] + (["-o"] if key == "out" else [])
            p.add_argument(*flags, dest=key, default=argparse.SUPPRESS, **FLAGS[key])
    return parser


def _flag_values(ns: argparse.Namespace) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in vars(ns).items() if k in FLAGS}


def _rigidity(cfg: PipelineConfig) -> RigidityConfig:
    return RigidityConfig(cfg.lambda1, cfg.lambda2, cfg.max_iters, cfg.tol, cfg.regulate_every)


def _require(cfg: PipelineConfig, key: str, command: str) -> str:
    value = getattr(cfg, key)
    if value is None:
        raise _UsageError(f"{command}: --{key.replace('_', '-')} is required (flag or config key {key!r})")
    return value


class _UsageError(Exception):
    pass


def _mesh_path_for(doc: AnimationDoc, src_dir: Path, dst_dir: Path) -> str | None:
    """Re-express a referenced OBJ path relative to the directory of the new document."""
    if doc.mesh_path is None or Path(doc.mesh_path).is_absolute():
        return doc.mesh_path
    return os.path.relpath(src_dir / doc.mesh_path, dst_dir)


def _derived(doc: AnimationDoc, motion: MotionParams, stage: dict, src: Path, dst: Path) -> AnimationDoc:
    prov = dict(doc.provenance)
    prov["stages"] = list(prov.get("stages", [])) + [stage]
    return AnimationDoc(doc.mesh, doc.rig, motion, prov, _mesh_path_for(doc, src.parent, dst.parent))


def _write_frames(seq: KeyframeSequence, directory) -> int:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for n in range(seq.n_frames):
        save_obj(seq.base, d / f"frame_{n:04d}.obj", vertices=seq.frames[n])
    return seq.n_frames


# ------------------------------------------------------------- objectives


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise SchemaError("$", f"{path} must hold a JSON object")
    return data


def _array(data: dict, key: str, dtype=float, ndim: int | None = None) -> np.ndarray:
    if key not in data:
        raise SchemaError(key, "missing")
    try:
        a = np.asarray(data[key], dtype=dtype)
    except (TypeError, ValueError):
        raise SchemaError(key, "must be a rectangular numeric array") from None
    if ndim is not None and a.ndim != ndim:
        raise SchemaError(key, f"expected {ndim} dimensions, got {a.ndim}")
    return a


def _camera(data: dict, cfg: PipelineConfig) -> Camera:
    cam = data.get("camera")
    if cam is None:
        ranges = CameraRanges(cfg.fov_range, cfg.elevation_range, cfg.azimuth_range, cfg.distance_range)
        return sample_camera(np.random.default_rng(seed_stream(cfg.seed, "camera")), ranges, cfg.image_size)
    if not isinstance(cam, dict):
        raise SchemaError("camera", "must be an object")
    allowed = {"position", "target", "up", "fov_deg", "image_size", "orthographic", "ortho_half_height"}
    extra = sorted(set(cam) - allowed)
    if extra:
        raise SchemaError(f"camera.{extra[0]}", "unknown camera field")
    if "position" not in cam:
        raise SchemaError("camera.position", "missing")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in cam.items()}
    kw.setdefault("image_size", tuple(cfg.image_size))
    try:
        return Camera(**kw)
    except (TypeError, ValueError) as exc:
        raise SchemaError("camera", str(exc)) from None


def _target_frames(data: dict, doc: AnimationDoc, key: str) -> KeyframeSequence:
    m = data[key]
    if not isinstance(m, dict):
        raise SchemaError(key, "must be an object with translations and rotations")
    try:
        motion = MotionParams(_array(m, "translations", ndim=3), _array(m, "rotations", ndim=3))
    except ValidationError as exc:
        raise SchemaError(key, str(exc)) from None
    if (motion.n_frames, motion.n_clusters) != (doc.motion.n_frames, doc.motion.n_clusters):
        raise SchemaError(key, f"target motion is {motion.n_frames}x{motion.n_clusters}, "
                               f"document is {doc.motion.n_frames}x{doc.motion.n_clusters}")
    return drive_mesh(doc.mesh, doc.rig, motion)


def build_objective(kind: str, target_path, doc: AnimationDoc, cfg: PipelineConfig):
    """Objective from a target JSON file; see the README for the formats."""
    data = _read_json(target_path)
    n, k = doc.motion.n_frames, doc.rig.n_clusters
    if kind == "trajectory":
        items = data.get("targets")
        if not isinstance(items, list) or not items:
            raise SchemaError("targets", "must be a non-empty list")
        targets = np.broadcast_to(doc.rig.handles, (n, k, 3)).copy()
        mask = np.zeros((n, k), bool)
        for i, item in enumerate(items):
            where = f"targets[{i}]"
            if not isinstance(item, dict) or "frame" not in item or "cluster" not in item:
                raise SchemaError(where, "needs frame and cluster")
            f, c = item["frame"], item["cluster"]
            if not (isinstance(f, int) and -n <= f < n):
                raise SchemaError(f"{where}.frame", f"must be an integer in [-{n}, {n})")
            if not (isinstance(c, int) and 0 <= c < k):
                raise SchemaError(f"{where}.cluster", f"must be an integer in [0, {k})")
            if ("offset" in item) == ("position" in item):
                raise SchemaError(where, "needs exactly one of offset or position")
            key = "offset" if "offset" in item else "position"
            v = _array(item, key, ndim=1)
            if v.shape != (3,):
                raise SchemaError(f"{where}.{key}", "must have 3 components")
            targets[f, c] = doc.rig.handles[c] + v if key == "offset" else v
            mask[f, c] = True
        return TrajectoryObjective(doc.rig, targets, mask)
    if kind == "vertex-target":
        pos = _array(data, "positions", ndim=3)
        idx = np.arange(doc.mesh.n_vertices) if "vertices" not in data else _array(data, "vertices", np.int64, 1)
        if len(idx) == 0 or idx.min() < 0 or idx.max() >= doc.mesh.n_vertices:
            raise SchemaError("vertices", "indices must be non-empty and within the mesh")
        if pos.shape != (n, len(idx), 3):
            raise SchemaError("positions", f"expected shape ({n}, {len(idx)}, 3), got {pos.shape}")
        full = np.broadcast_to(doc.mesh.vertices, (n,) + doc.mesh.vertices.shape).copy()
        full[:, idx] = pos
        return VertexTargetObjective(full, idx)
    camera = _camera(data, cfg)
    if kind == "silhouette":
        if "motion" in data:
            masks = render_silhouette(_target_frames(data, doc, "motion"), camera).astype(float)
        else:
            masks = _array(data, "masks", ndim=3)
        if masks.shape != (n,) + tuple(camera.image_size):
            raise SchemaError("masks", f"expected shape ({n}, {camera.image_size[0]}, {camera.image_size[1]})")
        return SilhouetteObjective(camera, masks, doc.mesh.faces)
    if kind == "sds-toy":
        if "motion" in data:
            seq = _target_frames(data, doc, "motion")
            means = [rasterize(camera, seq.frames[f], doc.mesh.faces).astype(float) for f in range(n)]
        else:
            mean = _array(data, "mean")
            if mean.ndim == 2:
                means = [mean] * n
            elif mean.ndim == 3 and len(mean) == n:
                means = list(mean)
            else:
                raise SchemaError("mean", f"must be (H, W) or ({n}, H, W)")
        if any(m.shape != tuple(camera.image_size) for m in means):
            raise SchemaError("mean", f"image shape must be {tuple(camera.image_size)}")
        sigma = data.get("sigma", cfg.toy_sigma)
        if not isinstance(sigma, (int, float)) or sigma <= 0:
            raise SchemaError("sigma", "must be a positive number")
        dcfg = DistillConfig(t_range=tuple(cfg.t_range), guidance_scale=cfg.guidance_scale)
        return SDSToyObjective(camera, [GaussianToyDenoiser(m, sigma) for m in means], doc.mesh.faces, dcfg)
    raise SchemaError("objective", f"unknown objective {kind!r}")


# ---------------------------------------------------------------- commands


def cmd_cluster(cfg: PipelineConfig, src: Path) -> None:
    out = Path(_require(cfg, "out", "cluster"))
    mesh = load_obj(src)
    mesh.check_face_budget(cfg.face_budget)
    rig = build_rig(mesh, cfg.clusters, seed_stream(cfg.seed, "clustering"), cfg.fps_fraction, cfg.fps_start)
    motion = MotionParams.identity(cfg.keyframes, cfg.clusters)
    mesh_path = None if cfg.embed_mesh else (str(src) if src.is_absolute() else os.path.relpath(src, out.parent))
    prov = {"seed": cfg.seed, "stages": [{"stage": "cluster", "config": cfg.algorithm_dict()}]}
    save_doc(AnimationDoc(mesh, rig, motion, prov, mesh_path), out)
    print(f"cluster: {mesh.n_vertices} vertices, {rig.n_clusters} clusters, {len(rig.fps_anchors)} anchors -> {out}")


def cmd_animate(cfg: PipelineConfig, src: Path) -> None:
    out = Path(_require(cfg, "out", "animate"))
    kind = _require(cfg, "objective", "animate")
    target = _require(cfg, "target", "animate")
    doc = load_doc(src)
    objective = build_objective(kind, target, doc, cfg)
    schedule = AnimateSchedule(n_frames=doc.motion.n_frames, total_iters=cfg.iters,
                               regulate_every=cfg.regulate_every, regulate_max=cfg.max_iters, lr=cfg.lr,
                               lr_final=cfg.lr_final, fd_step=cfg.fd_step, sds_weight=cfg.sds_weight,
                               temporal_weight=cfg.temporal_weight, workers=cfg.threads)
    lap = cotangent_weights(doc.mesh, clamp=cfg.clamp_weights)
    res = animate(doc.mesh, doc.rig, objective, schedule, _rigidity(cfg), seed=seed_stream(cfg.seed, "sds"),
                  lap=lap, initial=doc.motion)
    stage = {"stage": "animate", "config": cfg.algorithm_dict(), "final_objective": res.final_objective}
    save_doc(_derived(doc, res.motion, stage, src, out), out)
    if cfg.history:
        res.write_history_csv(cfg.history)
    print(f"animate: {kind} objective {res.history[0].objective:.6g} -> {res.final_objective:.6g} "
          f"over {cfg.iters} iterations, {len(res.regulations)} regulations -> {out}")


def cmd_regulate(cfg: PipelineConfig, src: Path) -> None:
    out = Path(_require(cfg, "out", "regulate"))
    doc = load_doc(src)
    rcfg = _rigidity(cfg)
    lap = cotangent_weights(doc.mesh, clamp=cfg.clamp_weights)
    frames = doc.drive(cfg.threads)
    result = regulate(doc.mesh, frames, doc.rig.fps_anchors, lap, rcfg, cfg.threads)
    for line in result.log_lines():
        log.info("%s", line)
    refit = refit_handles(doc.rig, doc.mesh, result.frames, previous=doc.motion)
    stage = {"stage": "regulate", "config": cfg.algorithm_dict(),
             "initial_loss": result.initial_loss, "final_loss": result.final_loss}
    save_doc(_derived(doc, refit.motion, stage, src, out), out)
    print(f"regulate: L_rig {result.initial_loss:.6g} -> {result.final_loss:.6g} "
          f"over {doc.motion.n_frames} frames -> {out}")


def cmd_compose(cfg: PipelineConfig, src: Path) -> None:
    frames_dir = _require(cfg, "frames", "compose")
    scene = load_scene(src)
    composed = compose(scene, base_dir=src.parent, workers=cfg.threads)
    count = _write_frames(composed.frames, frames_dir)
    print(f"compose: {len(scene.placements)} placements, {composed.frames.base.n_vertices} vertices, "
          f"{count} frames -> {frames_dir}")


def cmd_export(cfg: PipelineConfig, src: Path) -> None:
    frames_dir = _require(cfg, "frames", "export")
    doc = load_doc(src)
    count = _write_frames(doc.drive(cfg.threads), frames_dir)
    print(f"export: {count} frames -> {frames_dir}")


def cmd_info(cfg: PipelineConfig, src: Path) -> None:
    doc = load_doc(src)
    frames = doc.drive(cfg.threads)
    lap = cotangent_weights(doc.mesh, clamp=cfg.clamp_weights)
    anchors = doc.rig.fps_anchors
    energy, _ = rigidity_terms(doc.mesh, frames, frames, anchors, lap)
    l_rig = rigidity_loss(doc.mesh, frames, frames, anchors, _rigidity(cfg), lap)
    print(f"frames N: {doc.motion.n_frames}")
    print(f"clusters N_k: {doc.rig.n_clusters}")
    print(f"vertices N_v: {doc.mesh.n_vertices}")
    print(f"faces N_f: {doc.mesh.n_faces}")
    print(f"anchors: {len(anchors)}")
    print(f"sum E: {energy:.12g}")
    print(f"L_rig: {l_rig:.12g}")


HANDLERS = {"cluster": cmd_cluster, "animate": cmd_animate, "regulate": cmd_regulate,
            "compose": cmd_compose, "export": cmd_export, "info": cmd_info}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(_flag_values(ns), ns.config)
        HANDLERS[ns.command](cfg, Path(ns.input))
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"animesh: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"animesh: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, AnimeshError) as exc:
        print(f"animesh: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"animesh: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
