"""Animation documents and multi-object scene composition.

``anim.json`` (format version 1)::

    {
      "format": "animesh-animation",
      "version": 1,
      "mesh": {"vertices": [[x, y, z], ...], "faces": [[i, j, k], ...], "sha256": "..."}
              | {"path": "relative/or/absolute.obj", "sha256": "..."},
      "rig": {"cluster_of": [...], "handles": [[x, y, z], ...], "fps_anchors": [...]},
      "motion": {"translations": N x K x 3, "rotations": N x K x 4 (w, x, y, z)},
      "provenance": {...}
    }

Embedded meshes hash the little-endian float64 vertex bytes followed by the
int64 face bytes; referenced meshes hash the OBJ file bytes. Coordinates are
right-handed, Y-up.

``scene.json``::

    {"format": "animesh-scene", "version": 1,
     "placements": [{"animation": "anim.json", "rotation": [w, x, y, z],
                     "translation": [x, y, z], "frame_offset": 0}, ...]}
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .deform import KeyframeSequence, MotionParams, drive_mesh, quat_to_matrix
from .errors import HashMismatchError, SchemaError, UnsupportedVersionError, ValidationError
from .mesh import TriangleMesh, load_obj
from .rigging import Rig

FORMAT_VERSION = 1
ANIMATION_FORMAT = "animesh-animation"
SCENE_FORMAT = "animesh-scene"

_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_quat = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
_idx = {"type": "integer", "minimum": 0}

ANIMATION_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "mesh", "rig", "motion", "provenance"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": ANIMATION_FORMAT},
        "version": {},
        "mesh": {
            "type": "object",
            "required": ["sha256"],
            "additionalProperties": False,
            "properties": {
                "vertices": {"type": "array", "items": _vec3, "minItems": 3},
                "faces": {"type": "array", "items": {"type": "array", "items": _idx, "minItems": 3, "maxItems": 3},
                          "minItems": 1},
                "path": {"type": "string"},
                "sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
            },
            "oneOf": [{"required": ["vertices", "faces"], "not": {"required": ["path"]}},
                      {"required": ["path"], "not": {"anyOf": [{"required": ["vertices"]}, {"required": ["faces"]}]}}],
        },
        "rig": {
            "type": "object",
            "required": ["cluster_of", "handles", "fps_anchors"],
            "additionalProperties": False,
            "properties": {
                "cluster_of": {"type": "array", "items": _idx, "minItems": 1},
                "handles": {"type": "array", "items": _vec3, "minItems": 1},
                "fps_anchors": {"type": "array", "items": _idx},
            },
        },
        "motion": {
            "type": "object",
            "required": ["translations", "rotations"],
            "additionalProperties": False,
            "properties": {
                "translations": {"type": "array", "minItems": 1, "items": {"type": "array", "items": _vec3}},
                "rotations": {"type": "array", "minItems": 1, "items": {"type": "array", "items": _quat}},
            },
        },
        "provenance": {"type": "object"},
    },
}

SCENE_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "placements"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": SCENE_FORMAT},
        "version": {},
        "placements": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["animation"],
                "additionalProperties": False,
                "properties": {
                    "animation": {"type": "string"},
                    "rotation": _quat,
                    "translation": _vec3,
                    "frame_offset": _idx,
                },
            },
        },
    },
}


def mesh_hash(mesh: TriangleMesh) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(mesh.faces, dtype="<i8").tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _validate(data, schema, what: str):
    if not isinstance(data, dict):
        raise SchemaError("$", f"{what} must be a JSON object")
    version = data.get("version")
    if version is not None and version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported {what} version {version!r} (expected {FORMAT_VERSION})")
    try:
        jsonschema.validate(data, schema)
    except jsonschema.ValidationError as exc:
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in exc.absolute_path)
        raise SchemaError(path, exc.message) from None


def _dump(data) -> str:
    return json.dumps(data, indent=1, sort_keys=True, allow_nan=False) + "\n"


@dataclass(eq=False)
class AnimationDoc:
    mesh: TriangleMesh
    rig: Rig
    motion: MotionParams
    provenance: dict = field(default_factory=dict)
    mesh_path: str | None = None  # reference the OBJ instead of embedding it

    def __post_init__(self):
        if self.rig.n_vertices != self.mesh.n_vertices:
            raise ValidationError(f"rig covers {self.rig.n_vertices} vertices, mesh has {self.mesh.n_vertices}")
        if self.motion.n_clusters != self.rig.n_clusters:
            raise ValidationError(f"motion has {self.motion.n_clusters} handles, rig has {self.rig.n_clusters}")

    def drive(self, workers: int = 1) -> KeyframeSequence:
        return drive_mesh(self.mesh, self.rig, self.motion, workers)

    def to_json(self, base_dir=None) -> dict:
        if self.mesh_path is None:
            mesh = {"vertices": self.mesh.vertices.tolist(), "faces": self.mesh.faces.tolist(),
                    "sha256": mesh_hash(self.mesh)}
        else:
            p = Path(self.mesh_path)
            full = p if p.is_absolute() or base_dir is None else Path(base_dir) / p
            mesh = {"path": self.mesh_path, "sha256": file_hash(full)}
        return {
            "format": ANIMATION_FORMAT,
            "version": FORMAT_VERSION,
            "mesh": mesh,
            "rig": {"cluster_of": self.rig.cluster_of.tolist(), "handles": self.rig.handles.tolist(),
                    "fps_anchors": self.rig.fps_anchors.tolist()},
            "motion": {"translations": self.motion.translations.tolist(),
                       "rotations": self.motion.rotations.tolist()},
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, data: dict, base_dir=None) -> "AnimationDoc":
        _validate(data, ANIMATION_SCHEMA, "animation")
        m = data["mesh"]
        mesh_path = None
        if "path" in m:
            mesh_path = m["path"]
            p = Path(mesh_path)
            full = p if p.is_absolute() or base_dir is None else Path(base_dir) / p
            if file_hash(full) != m["sha256"]:
                raise HashMismatchError(f"mesh file {full} does not match its recorded sha256")
            mesh = load_obj(full)
        else:
            mesh = TriangleMesh(np.array(m["vertices"], dtype=float), np.array(m["faces"], dtype=np.int64))
            if mesh_hash(mesh) != m["sha256"]:
                raise HashMismatchError("embedded mesh does not match its recorded sha256")
        r = data["rig"]
        try:
            rig = Rig(np.array(r["cluster_of"], dtype=np.int64), np.array(r["handles"], dtype=float),
                      np.array(r["fps_anchors"], dtype=np.int64))
        except ValidationError as exc:
            raise SchemaError("$.rig", str(exc)) from None
        mo = data["motion"]
        try:
            motion = MotionParams(np.array(mo["translations"], dtype=float), np.array(mo["rotations"], dtype=float))
        except (ValidationError, ValueError) as exc:
            raise SchemaError("$.motion", str(exc)) from None
        try:
            return cls(mesh, rig, motion, dict(data["provenance"]), mesh_path)
        except ValidationError as exc:
            raise SchemaError("$", str(exc)) from None


def save_doc(doc: AnimationDoc, path) -> None:
    path = Path(path)
    text = _dump(doc.to_json(path.parent))
    path.write_text(text, encoding="utf-8")


def load_doc(path) -> AnimationDoc:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from None
    return AnimationDoc.from_json(data, path.parent)


# ------------------------------------------------------------------ scenes


@dataclass(eq=False)
class Placement:
    animation: "AnimationDoc | str"
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    frame_offset: int = 0

    def __post_init__(self):
        if self.frame_offset < 0:
            raise ValidationError("frame_offset must be >= 0")

    def apply(self, points: np.ndarray) -> np.ndarray:
        R = quat_to_matrix(np.asarray(self.rotation, dtype=float))
        return points @ R.T + np.asarray(self.translation, dtype=float)


@dataclass(eq=False)
class SceneDoc:
    placements: list[Placement]

    def __post_init__(self):
        if not self.placements:
            raise ValidationError("scene needs at least one placement")

    def to_json(self) -> dict:
        out = []
        for p in self.placements:
            if not isinstance(p.animation, str):
                raise ValidationError("scene placements must reference animation files to be saved")
            out.append({"animation": p.animation, "rotation": list(map(float, p.rotation)),
                        "translation": list(map(float, p.translation)), "frame_offset": int(p.frame_offset)})
        return {"format": SCENE_FORMAT, "version": FORMAT_VERSION, "placements": out}

    @classmethod
    def from_json(cls, data: dict) -> "SceneDoc":
        _validate(data, SCENE_SCHEMA, "scene")
        return cls([Placement(p["animation"], tuple(p.get("rotation", (1.0, 0.0, 0.0, 0.0))),
                              tuple(p.get("translation", (0.0, 0.0, 0.0))), p.get("frame_offset", 0))
                    for p in data["placements"]])


def save_scene(scene: SceneDoc, path) -> None:
    Path(path).write_text(_dump(scene.to_json()), encoding="utf-8")


def load_scene(path) -> SceneDoc:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from None
    return SceneDoc.from_json(data)


@dataclass
class ComposedScene:
    frames: KeyframeSequence
    vertex_ranges: list[tuple[int, int]]  # [start, stop) block per placement


def compose(scene: SceneDoc, base_dir=None, workers: int = 1) -> ComposedScene:
    """Place every animated object and merge them into one keyframe sequence.

    The output has ``max(offset + N)`` frames. A track shows its first
    keyframe before its offset and holds its last keyframe after it ends.
    """
    tracks = []
    for k, p in enumerate(scene.placements):
        doc = p.animation
        if isinstance(doc, (str, os.PathLike)):
            ref = Path(doc)
            full = ref if ref.is_absolute() or base_dir is None else Path(base_dir) / ref
            if not full.exists():
                raise FileNotFoundError(f"placement {k}: animation {full} not found")
            doc = load_doc(full)
        seq = doc.drive(workers)
        tracks.append((p, doc.mesh, seq))
    total = max(p.frame_offset + seq.n_frames for p, _, seq in tracks)

    rest_blocks, face_blocks, ranges = [], [], []
    frames = [[] for _ in range(total)]
    offset = 0
    for p, mesh, seq in tracks:
        rest_blocks.append(p.apply(mesh.vertices))
        face_blocks.append(mesh.faces + offset)
        ranges.append((offset, offset + mesh.n_vertices))
        placed = [p.apply(seq.frames[n]) for n in range(seq.n_frames)]
        for f in range(total):
            frames[f].append(placed[min(max(f - p.frame_offset, 0), seq.n_frames - 1)])
        offset += mesh.n_vertices
    base = TriangleMesh(np.concatenate(rest_blocks), np.concatenate(face_blocks))
    return ComposedScene(KeyframeSequence(base, np.stack([np.concatenate(b) for b in frames])), ranges)
