"""Rig and run configuration: JSON loading and validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError
from .geometry import RigidTransform, nearest_rotation

IGNORE_ID = 65535
RIG_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def scaled(self, width: int, height: int) -> "Intrinsics":
        """Intrinsics of the same camera resampled to ``width`` x ``height``."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                          width, height, self.k1, self.k2, self.p1, self.p2)


@dataclass(frozen=True)
class RigConfig:
    intrinsics: Intrinsics
    extrinsics: RigidTransform  # lidar -> camera
    min_depth: float = 0.1

    def __post_init__(self) -> None:
        k = self.intrinsics
        if not (k.fx > 0 and k.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={k.fx}, fy={k.fy}")
        if k.width < 1 or k.height < 1:
            raise ConfigError(f"image size must be positive, got {k.width}x{k.height}")
        if not self.min_depth > 0:
            raise ConfigError(f"min_depth must be positive, got {self.min_depth}")

    def to_dict(self) -> dict[str, Any]:
        k = self.intrinsics
        return {
            "intrinsics": {
                "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                "width": k.width, "height": k.height,
                "distortion": {"k1": k.k1, "k2": k.k2, "p1": k.p1, "p2": k.p2},
            },
            "extrinsics": {
                "rotation": self.extrinsics.rotation.tolist(),
                "translation": self.extrinsics.translation.tolist(),
            },
            "min_depth": self.min_depth,
        }


def _require(d: dict, key: str, where: str) -> Any:
    if not isinstance(d, dict) or key not in d:
        raise ConfigError(f"{where}: missing required key '{key}'")
    return d[key]


def rig_from_dict(d: dict, where: str = "rig") -> RigConfig:
    intr = _require(d, "intrinsics", where)
    dist = intr.get("distortion") or {}
    try:
        k = Intrinsics(
            fx=float(_require(intr, "fx", where)),
            fy=float(_require(intr, "fy", where)),
            cx=float(_require(intr, "cx", where)),
            cy=float(_require(intr, "cy", where)),
            width=int(_require(intr, "width", where)),
            height=int(_require(intr, "height", where)),
            k1=float(dist.get("k1", 0.0)),
            k2=float(dist.get("k2", 0.0)),
            p1=float(dist.get("p1", 0.0)),
            p2=float(dist.get("p2", 0.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: bad intrinsics value: {exc}") from exc

    ext = _require(d, "extrinsics", where)
    R = np.asarray(_require(ext, "rotation", where), dtype=np.float64)
    t = np.asarray(_require(ext, "translation", where), dtype=np.float64)
    if R.shape != (3, 3) or t.shape != (3,):
        raise ConfigError(f"{where}: extrinsics need a 3x3 rotation and a 3-vector translation")
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
        raise ConfigError(f"{where}: extrinsics contain non-finite values")
    if np.max(np.abs(R.T @ R - np.eye(3))) > RIG_ORTHO_TOL:
        raise ConfigError(f"{where}: rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > RIG_ORTHO_TOL:
        raise ConfigError(f"{where}: rotation determinant is {np.linalg.det(R):.6f}, expected +1")
    # JSON round-off is absorbed here so RigidTransform can hold its tighter tolerance.
    extr = RigidTransform(nearest_rotation(R), t)
    try:
        return RigConfig(k, extr, float(d.get("min_depth", 0.1)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_rig_config(path: str | Path) -> RigConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return rig_from_dict(d, where=str(path))


def save_rig_config(rig: RigConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(rig.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass
class StudentSection:
    embed_dim: int = 32
    depth: int = 4
    grid_cells: int = 64
    cell_size_m: float = 0.15
    centered_inputs: bool = False


@dataclass
class DistillSection:
    epochs: int = 25
    lr: float = 0.002
    weight_decay: float = 0.03
    batch: int = 8
    eq1_pooling: str = "per_batch"
    yaw_augment: bool = True  # rotate each training frame by a random yaw about the lidar z axis


@dataclass
class ProbeSection:
    epochs: int = 20
    lr: float = 0.001
    weight_decay: float = 0.003
    batch: int = 8


@dataclass
class FinetuneSection:
    lr: float = 0.002
    layer_decay: float = 0.99
    epochs: int = 20
    weight_decay: float = 0.03
    batch: int = 8


@dataclass
class SyncSection:
    max_dt_ns: int = 50_000_000


@dataclass
class TeacherSize:
    w: int = 448
    h: int = 224


@dataclass
class SynthSection:
    """Synthetic dataset knobs used by the ``synth`` stage."""

    frames: int = 20
    rings: int = 16
    azimuths: int = 360
    elevation_min_deg: float = -30.0
    elevation_max_deg: float = 30.0
    max_range_m: float = 30.0
    image_width: int = 160
    image_height: int = 120
    focal_px: float = 80.0
    camera_offset_m: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    noise_sigma: float = 0.1
    jitter_ns: int = 5_000_000
    max_obstacles: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    classes: int = 4
    class_names: list[str] = field(
        default_factory=lambda: ["wall", "floor", "ceiling", "non_structural"])
    ignore_id: int = IGNORE_ID
    teacher_dim: int = 8
    student: StudentSection = field(default_factory=StudentSection)
    distill: DistillSection = field(default_factory=DistillSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    sync: SyncSection = field(default_factory=SyncSection)
    teacher_size: TeacherSize = field(default_factory=TeacherSize)
    synth: SynthSection = field(default_factory=SynthSection)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


_SECTIONS = {
    "student": StudentSection,
    "distill": DistillSection,
    "probe": ProbeSection,
    "finetune": FinetuneSection,
    "sync": SyncSection,
    "teacher_size": TeacherSize,
    "synth": SynthSection,
}


def run_config_from_dict(d: dict, where: str = "config") -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: top level must be a JSON object")
    kwargs: dict[str, Any] = {}
    for key, value in d.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: '{key}' must be an object")
            known = set(cls.__dataclass_fields__)
            unknown = set(value) - known
            if unknown:
                raise ConfigError(f"{where}: unknown keys in '{key}': {sorted(unknown)}")
            kwargs[key] = cls(**value)
        elif key in RunConfig.__dataclass_fields__:
            kwargs[key] = value
        else:
            raise ConfigError(f"{where}: unknown key '{key}'")
    cfg = RunConfig(**kwargs)
    _validate_run(cfg, where)
    return cfg


def _validate_run(cfg: RunConfig, where: str) -> None:
    if cfg.ignore_id != IGNORE_ID:
        raise ConfigError(f"{where}: ignore_id is fixed at {IGNORE_ID}")
    if not 1 <= cfg.classes < IGNORE_ID:
        raise ConfigError(f"{where}: classes must be in [1, {IGNORE_ID})")
    if len(cfg.class_names) != cfg.classes:
        raise ConfigError(f"{where}: class_names has {len(cfg.class_names)} entries, "
                          f"classes is {cfg.classes}")
    if cfg.teacher_dim < 1:
        raise ConfigError(f"{where}: teacher_dim must be >= 1")
    s = cfg.student
    if s.depth < 1 or s.grid_cells < 2 or not s.cell_size_m > 0 or s.embed_dim < 1:
        raise ConfigError(f"{where}: student needs depth>=1, grid_cells>=2, cell_size_m>0")
    if cfg.distill.eq1_pooling not in ("per_batch", "per_frame"):
        raise ConfigError(f"{where}: eq1_pooling must be 'per_batch' or 'per_frame'")
    for name in ("distill", "probe", "finetune"):
        sec = getattr(cfg, name)
        if sec.epochs < 0 or sec.batch < 1 or sec.lr < 0 or sec.weight_decay < 0:
            raise ConfigError(f"{where}: '{name}' needs epochs>=0, batch>=1, lr>=0, weight_decay>=0")
    if cfg.sync.max_dt_ns <= 0:
        raise ConfigError(f"{where}: sync.max_dt_ns must be positive")
    if cfg.teacher_size.w < 1 or cfg.teacher_size.h < 1:
        raise ConfigError(f"{where}: teacher_size must be positive")


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return run_config_from_dict(d, where=str(path))
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
