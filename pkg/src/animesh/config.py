"""Pipeline configuration and seeding.

A config file is a JSON object with a ``version`` key plus any subset of the
``PipelineConfig`` fields. Every field has a command-line flag spelled with
dashes (``fps_fraction`` -> ``--fps-fraction``). Resolution order is
flag > config file > built-in default; the config file comes from
``--config`` or, failing that, the ``ANIMESH_CONFIG`` environment variable.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import SchemaError, UnsupportedVersionError
from .mesh import DEFAULT_FACE_BUDGET

CONFIG_VERSION = 1
CONFIG_ENV = "ANIMESH_CONFIG"

# Fixed indices keep a stage's stream stable when other stages are added.
SEED_STREAMS = {"clustering": 0, "camera": 1, "sds": 2}


def seed_stream(seed: int, name: str) -> np.random.SeedSequence:
    """Independent, reproducible substream of the root seed for one pipeline stage."""
    if name not in SEED_STREAMS:
        raise KeyError(f"unknown seed stream {name!r}")
    return np.random.SeedSequence(seed, spawn_key=(SEED_STREAMS[name],))


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    # rigging
    clusters: int = 80
    fps_fraction: float = 0.1
    fps_start: int = 0
    keyframes: int = 16
    face_budget: int = DEFAULT_FACE_BUDGET
    embed_mesh: bool = True
    # regulation
    lambda1: float = 1e-4
    lambda2: float = 1.0
    tol: float = 1e-7
    max_iters: int = 500
    clamp_weights: bool = False
    # animation
    iters: int = 30_000
    regulate_every: int = 500
    lr: float = 1e-2
    lr_final: float | None = None
    fd_step: float = 1e-2
    temporal_weight: float = 0.0
    sds_weight: float = 0.1
    objective: str | None = None
    target: str | None = None
    # cameras and distillation
    fov_range: tuple[float, float] = (15.0, 60.0)
    elevation_range: tuple[float, float] = (10.0, 45.0)
    azimuth_range: tuple[float, float] = (0.0, 360.0)
    distance_range: tuple[float, float] = (2.5, 3.0)
    image_size: tuple[int, int] = (64, 64)
    t_range: tuple[float, float] = (0.02, 0.98)
    guidance_scale: float = 1.0
    toy_sigma: float = 0.5
    # runtime and paths
    threads: int = 1
    out: str | None = None
    history: str | None = None
    frames: str | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        self._check()

    def _check(self):
        def need(ok, name, msg):
            if not ok:
                raise SchemaError(name, msg)

        for name in ("seed", "clusters", "fps_start", "keyframes", "face_budget", "max_iters", "iters",
                     "regulate_every", "threads"):
            v = getattr(self, name)
            need(isinstance(v, int) and not isinstance(v, bool), name, f"expected an integer, got {v!r}")
        need(self.seed >= 0, "seed", "must be >= 0")
        need(self.clusters >= 1, "clusters", "must be >= 1")
        need(isinstance(self.fps_fraction, (int, float)) and 0.0 < self.fps_fraction <= 1.0,
             "fps_fraction", "must lie in (0, 1]")
        need(self.fps_start >= 0, "fps_start", "must be >= 0")
        need(self.keyframes >= 1, "keyframes", "must be >= 1")
        need(self.face_budget >= 1, "face_budget", "must be >= 1")
        for name in ("lambda1", "lambda2", "temporal_weight", "sds_weight"):
            v = getattr(self, name)
            need(isinstance(v, (int, float)) and v >= 0, name, "must be a non-negative number")
        for name in ("tol", "fd_step", "toy_sigma"):
            v = getattr(self, name)
            need(isinstance(v, (int, float)) and v > 0, name, "must be a positive number")
        for name in ("max_iters", "iters", "regulate_every", "threads"):
            need(getattr(self, name) >= 1, name, "must be >= 1")
        need(isinstance(self.lr, (int, float)) and self.lr >= 0, "lr", "must be >= 0")
        need(self.lr_final is None or (isinstance(self.lr_final, (int, float)) and self.lr_final >= 0),
             "lr_final", "must be null or >= 0")
        need(isinstance(self.guidance_scale, (int, float)), "guidance_scale", "must be a number")
        for name in ("embed_mesh", "clamp_weights"):
            need(isinstance(getattr(self, name), bool), name, "must be a boolean")
        for name in ("fov_range", "elevation_range", "azimuth_range", "distance_range", "t_range", "image_size"):
            v = getattr(self, name)
            need(isinstance(v, tuple) and len(v) == 2 and all(isinstance(x, (int, float)) for x in v),
                 name, "must be a pair of numbers")
            need(v[0] <= v[1] or name == "image_size", name, "range is inverted")
        need(0.0 < self.fov_range[0] and self.fov_range[1] < 180.0, "fov_range", "must lie in (0, 180)")
        need(self.distance_range[0] > 0, "distance_range", "must be positive")
        need(0.0 <= self.t_range[0] < self.t_range[1] <= 1.0, "t_range", "must satisfy 0 <= lo < hi <= 1")
        need(all(isinstance(x, int) and x >= 16 for x in self.image_size), "image_size",
             "must be two integers >= 16")
        need(self.objective in (None, "trajectory", "vertex-target", "silhouette", "sds-toy"),
             "objective", f"unknown objective {self.objective!r}")
        for name in ("target", "out", "history", "frames"):
            v = getattr(self, name)
            need(v is None or isinstance(v, str), name, "must be a path string or null")

    def to_dict(self) -> dict:
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}
        return {"version": CONFIG_VERSION, **d}

    def algorithm_dict(self) -> dict:
        """``to_dict`` minus output paths, for provenance records."""
        d = self.to_dict()
        for k in ("out", "history", "frames"):
            d.pop(k)
        return d

    @classmethod
    def from_dict(cls, data: dict, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise SchemaError("$", "config must be a JSON object")
        if "version" not in data:
            raise SchemaError("version", "missing")
        if data["version"] != CONFIG_VERSION:
            raise UnsupportedVersionError(f"unsupported config version {data['version']!r}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known - {"version"})
        if unknown:
            raise SchemaError(unknown[0], "unknown config key")
        values = {k: v for k, v in data.items() if k != "version"}
        return replace(base or cls(), **values)

    def merged(self, overrides: dict) -> "PipelineConfig":
        unknown = sorted(set(overrides) - {f.name for f in fields(self)})
        if unknown:
            raise SchemaError(unknown[0], "unknown config key")
        return replace(self, **overrides)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON in {path}: {exc}") from None
    return PipelineConfig.from_dict(data)


def resolve_config(flags: dict, config_path=None, environ=None) -> PipelineConfig:
    """Defaults, then the config file (explicit path or environment), then flags."""
    environ = os.environ if environ is None else environ
    path = config_path or environ.get(CONFIG_ENV) or None
    cfg = load_config(path) if path else PipelineConfig()
    return cfg.merged(flags)
