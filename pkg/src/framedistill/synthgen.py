"""Synthetic indoor scenes: box rooms with box obstacles, ray-cast ring lidar
scans, ray-cast camera masks and prototype teacher features.

All geometry is axis-aligned so every intersection has a closed form. The
room spans ``[0, width] x [0, depth] x [0, height]`` in world coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import IGNORE_ID, Intrinsics, RigConfig, SynthSection, save_rig_config
from .frameio import (
    FeatureMap,
    ImageFrame,
    LidarFrame,
    SemanticMask,
    write_feature_map,
    write_image,
    write_lidar_frame,
    write_mask,
)
from .geometry import RigidTransform, compose, invert
from .labelspace import CEILING, FLOOR, NON_STRUCTURAL, WALL
from .sync import PairManifest, pair_frames, write_manifest

PALETTE = np.array([
    [200, 200, 200],  # wall
    [120, 80, 40],  # floor
    [80, 160, 230],  # ceiling
    [220, 60, 60],  # non-structural
], dtype=np.uint8)

FLOOR_GAP = 0.02
LIDAR_TO_CAMERA_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclass
class SceneSpec:
    width: float
    depth: float
    height: float
    obstacles: list[Box] = field(default_factory=list)
    # wall patches rays pass through (doorways); each is a flat Box on a wall plane
    openings: list[Box] = field(default_factory=list)

    def __post_init__(self) -> None:
        if min(self.width, self.depth, self.height) <= 0:
            raise ValueError("room extents must be positive")
        hi = (self.width, self.depth, self.height)
        for b in self.obstacles:
            if not all(0 < b.lo[i] < b.hi[i] < hi[i] for i in range(3)):
                raise ValueError(f"obstacle {b} is not strictly inside the room")

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=np.float64)
        inside_room = (0 < p[0] < self.width and 0 < p[1] < self.depth and 0 < p[2] < self.height)
        return inside_room and not any(
            all(b.lo[i] <= p[i] <= b.hi[i] for i in range(3)) for b in self.obstacles)


@dataclass
class SensorSpec:
    rings: int = 16
    azimuths: int = 360
    elevation_min_deg: float = -30.0
    elevation_max_deg: float = 30.0
    max_range: float = 30.0
    pose: RigidTransform = field(default_factory=RigidTransform.identity)  # world -> sensor

    def __post_init__(self) -> None:
        if self.rings < 1 or self.azimuths < 1:
            raise ValueError("rings and azimuths must be >= 1")
        if not -90.0 < self.elevation_min_deg <= self.elevation_max_deg < 90.0:
            raise ValueError("elevation span must lie inside (-90, 90) degrees")

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, ring-major."""
        if self.rings == 1:
            el = np.array([0.5 * (self.elevation_min_deg + self.elevation_max_deg)])
        else:
            el = np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.rings)
        el = np.deg2rad(el)[:, None]
        az = (2.0 * np.pi / self.azimuths) * np.arange(self.azimuths)[None, :]
        shape = (el.shape[0], az.shape[1])
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                      np.broadcast_to(np.sin(el), shape)], axis=-1)
        return d.reshape(-1, 3)


# -- scene generation -------------------------------------------------------

def generate_scene(seed: int, n_obstacles: int | None = None, max_obstacles: int = 5,
                   openings: bool = False) -> SceneSpec:
    """Random room of 4-12 m x 4-12 m x 2.5-3.5 m with 1-``max_obstacles`` boxes.

    Obstacles are furniture-sized boxes at most 1.2 m tall, raised 2 cm off the
    floor so they stay strictly inside the room. ``n_obstacles=0`` gives an empty room.
    """
    rng = np.random.default_rng(seed)
    w, d = rng.uniform(4.0, 12.0, size=2)
    h = rng.uniform(2.5, 3.5)
    if n_obstacles is None:
        n_obstacles = int(rng.integers(1, max_obstacles + 1))
    obstacles = []
    margin = 0.3
    for _ in range(n_obstacles):
        sx, sy = rng.uniform(0.4, 1.5, size=2)
        sz = rng.uniform(0.4, 1.2)
        x0 = rng.uniform(margin, w - margin - sx)
        y0 = rng.uniform(margin, d - margin - sy)
        obstacles.append(Box((float(x0), float(y0), FLOOR_GAP),
                             (float(x0 + sx), float(y0 + sy), float(FLOOR_GAP + sz))))
    ops = []
    if openings:
        x0 = rng.uniform(0.5, w - 1.5)
        ops.append(Box((float(x0), 0.0, 0.0), (float(x0 + 1.0), 0.0, 2.1)))
    return SceneSpec(float(w), float(d), float(h), obstacles, ops)


# -- ray casting --------------------------------------------------------------

def _slab(o: np.ndarray, d: np.ndarray, lo: float, hi: float):
    """Entry/exit ray parameters for one axis slab, handling zero components."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    return tmin, tmax


def cast_rays(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray,
              max_range: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit distance and surface label per ray; misses get ``inf`` / IGNORE.

    Origins must lie inside the room; directions must be unit length.
    """
    o = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs))
    d = np.asarray(dirs, dtype=np.float64)
    n = d.shape[0]
    ext = (scene.width, scene.depth, scene.height)
    t_exit = np.full(n, np.inf)
    axis = np.full(n, -1)
    for k in range(3):
        with np.errstate(divide="ignore"):
            tk = np.where(d[:, k] > 0, (ext[k] - o[:, k]) / d[:, k],
                          np.where(d[:, k] < 0, -o[:, k] / d[:, k], np.inf))
        closer = tk < t_exit
        t_exit = np.where(closer, tk, t_exit)
        axis = np.where(closer, k, axis)
    labels = np.where(axis == 2, np.where(d[:, 2] < 0, FLOOR, CEILING), WALL).astype(np.uint16)
    t = t_exit.copy()

    if scene.openings:
        hit = o + t[:, None] * d
        for op in scene.openings:
            inside = np.ones(n, dtype=bool)
            for k in range(3):
                inside &= (hit[:, k] >= op.lo[k] - 1e-9) & (hit[:, k] <= op.hi[k] + 1e-9)
            t = np.where(inside, np.inf, t)
        labels = np.where(np.isinf(t), IGNORE_ID, labels).astype(np.uint16)

    for b in scene.obstacles:
        tn = np.full(n, -np.inf)
        tf = np.full(n, np.inf)
        for k in range(3):
            a0, a1 = _slab(o[:, k], d[:, k], b.lo[k], b.hi[k])
            tn = np.maximum(tn, a0)
            tf = np.minimum(tf, a1)
        hit = (tn <= tf) & (tn > 0) & (tn < t)
        t = np.where(hit, tn, t)
        labels = np.where(hit, NON_STRUCTURAL, labels).astype(np.uint16)

    miss = ~(t <= max_range)
    t = np.where(miss, np.inf, t)
    labels = np.where(miss, IGNORE_ID, labels).astype(np.uint16)
    return t, labels


def sensor_origin(pose: RigidTransform) -> np.ndarray:
    return invert(pose).translation


def simulate_lidar(scene: SceneSpec, sensor: SensorSpec, timestamp_ns: int = 1,
                   range_noise_m: float = 0.0, rng: np.random.Generator | None = None) -> LidarFrame:
    """Ray-cast one ring-lidar sweep; points are in the sensor frame with GT labels."""
    origin = sensor_origin(sensor.pose)
    if not scene.contains(origin):
        raise ValueError(f"sensor origin {origin} is outside the free space of the room")
    dirs_s = sensor.directions()
    dirs_w = dirs_s @ sensor.pose.rotation  # rows: R^T d
    t, labels = cast_rays(scene, origin, dirs_w, sensor.max_range)
    hit = np.isfinite(t)
    r = t[hit]
    if range_noise_m > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        r = np.maximum(r + rng.normal(0.0, range_noise_m, size=r.shape), 1e-3)
    xyz = dirs_s[hit] * r[:, None]
    intensity = 1.0 / (1.0 + r)
    pts = np.column_stack([xyz, intensity]).astype(np.float32)
    return LidarFrame(timestamp_ns, pts, labels[hit])


def undistort(xd: np.ndarray, yd: np.ndarray, intr: Intrinsics, iters: int = 20):
    if intr.k1 == intr.k2 == intr.p1 == intr.p2 == 0.0:
        return xd, yd
    from .geometry import distort

    x, y = xd.copy(), yd.copy()
    for _ in range(iters):
        fx, fy = distort(x, y, intr.k1, intr.k2, intr.p1, intr.p2)
        x = x + (xd - fx)
        y = y + (yd - fy)
    return x, y


def _camera_rays(rig: RigConfig, pose: RigidTransform, intr: Intrinsics | None = None):
    intr = intr or rig.intrinsics
    cam_pose = compose(rig.extrinsics, pose)  # world -> camera
    u = np.arange(intr.width) + 0.5
    v = np.arange(intr.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    xd = (uu.reshape(-1) - intr.cx) / intr.fx
    yd = (vv.reshape(-1) - intr.cy) / intr.fy
    xn, yn = undistort(xd, yd, intr)
    d_cam = np.column_stack([xn, yn, np.ones_like(xn)])
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    d_world = d_cam @ cam_pose.rotation
    return sensor_origin(cam_pose), d_world, intr


def render_mask(scene: SceneSpec, rig: RigConfig, pose: RigidTransform,
                intr: Intrinsics | None = None, max_range: float = np.inf) -> SemanticMask:
    """Label of the surface seen through each pixel centre (IGNORE on miss).

    ``pose`` is the world->lidar transform; the camera follows through the rig
    extrinsics. ``intr`` overrides the rig intrinsics (e.g. a resized teacher input).
    """
    origin, dirs, intr = _camera_rays(rig, pose, intr)
    _, labels = cast_rays(scene, origin, dirs, max_range)
    return SemanticMask(intr.width, intr.height, labels)


def render_image(scene: SceneSpec, rig: RigConfig, pose: RigidTransform,
                 timestamp_ns: int = 1) -> ImageFrame:
    """Flat-shaded RGB rendering, one colour per label."""
    mask = render_mask(scene, rig, pose)
    rgb = np.zeros((mask.ids.size, 3), dtype=np.uint8)
    known = mask.ids < len(PALETTE)
    rgb[known] = PALETTE[mask.ids[known]]
    return ImageFrame(timestamp_ns, mask.width, mask.height, 3, rgb.reshape(-1))


def class_prototypes(n_classes: int, dim: int, seed: int) -> np.ndarray:
    """``n_classes`` orthonormal rows: a seeded rotation of the canonical basis."""
    if dim < n_classes:
        raise ValueError(f"teacher dim {dim} < number of classes {n_classes}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))[None, :]
    return q[:n_classes]


def render_teacher_features(mask: SemanticMask, C: int, noise_sigma: float, seed: int,
                            n_classes: int = 4, prototypes: np.ndarray | None = None) -> FeatureMap:
    """Per-pixel ``normalize(prototype[label] + N(0, sigma^2))``; IGNORE pixels are zero."""
    if C < n_classes:
        raise ValueError(f"teacher dim {C} < number of classes {n_classes}")
    if prototypes is None:
        prototypes = class_prototypes(n_classes, C, seed)
    ids = mask.ids
    known = ids != IGNORE_ID
    if np.any(ids[known] >= n_classes):
        raise ValueError("mask holds ids beyond the prototype table")
    rng = np.random.default_rng(seed)
    feats = np.zeros((ids.size, C))
    feats[known] = prototypes[ids[known]]
    if noise_sigma > 0:
        feats[known] += rng.normal(0.0, noise_sigma, size=(int(known.sum()), C))
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = np.where(norms > 0, feats / np.where(norms > 0, norms, 1.0), 0.0)
    return FeatureMap(feats.reshape(mask.height, mask.width, C).astype(np.float32))


# -- datasets ---------------------------------------------------------------

def synthetic_rig(s: SynthSection) -> RigConfig:
    """Forward-looking pinhole camera on the lidar; lidar axes x-forward, z-up."""
    R = LIDAR_TO_CAMERA_AXES
    offset = np.asarray(s.camera_offset_m, dtype=np.float64)  # camera centre in lidar frame
    intr = Intrinsics(s.focal_px, s.focal_px, s.image_width / 2.0, s.image_height / 2.0,
                      s.image_width, s.image_height)
    return RigConfig(intr, RigidTransform(R, -R @ offset), min_depth=0.1)


def sensor_spec(s: SynthSection, pose: RigidTransform) -> SensorSpec:
    return SensorSpec(s.rings, s.azimuths, s.elevation_min_deg, s.elevation_max_deg,
                      s.max_range_m, pose)


def random_pose(scene: SceneSpec, rng: np.random.Generator) -> RigidTransform:
    """World->sensor pose at 1.3-1.7 m height (above every obstacle), random yaw."""
    for _ in range(1000):
        p = np.array([rng.uniform(0.5, scene.width - 0.5),
                      rng.uniform(0.5, scene.depth - 0.5),
                      rng.uniform(1.3, min(1.7, scene.height - 0.3))])
        if scene.contains(p):
            break
    yaw = rng.uniform(-np.pi, np.pi)
    sensor_to_world = RigidTransform.from_yaw(yaw, p)
    return invert(sensor_to_world)


@dataclass
class SyntheticFrame:
    lidar: LidarFrame
    image: ImageFrame
    mask: SemanticMask
    features: FeatureMap


def make_frame(index: int, seed: int, s: SynthSection, rig: RigConfig, teacher_size: tuple[int, int],
               teacher_dim: int, prototypes: np.ndarray, frames_per_scene: int = 5,
               base_ts: int = 1_000_000_000, period_ns: int = 100_000_000) -> SyntheticFrame:
    """Frame ``index`` of the dataset defined by ``seed``; independent of other frames."""
    scene = generate_scene(seed * 100_003 + index // frames_per_scene, max_obstacles=s.max_obstacles)
    rng = np.random.default_rng([seed, index])
    pose = random_pose(scene, rng)
    lidar_ts = base_ts + index * period_ns
    jitter = int(rng.integers(-s.jitter_ns, s.jitter_ns + 1)) if s.jitter_ns > 0 else 0
    image_ts = lidar_ts + jitter
    lidar = simulate_lidar(scene, sensor_spec(s, pose), lidar_ts)
    mask = render_mask(scene, rig, pose)
    rgb = np.zeros((mask.ids.size, 3), dtype=np.uint8)
    known = mask.ids < len(PALETTE)
    rgb[known] = PALETTE[mask.ids[known]]
    image = ImageFrame(image_ts, mask.width, mask.height, 3, rgb.reshape(-1))
    tw, th = teacher_size
    teacher_mask = render_mask(scene, rig, pose, rig.intrinsics.scaled(tw, th))
    feats = render_teacher_features(teacher_mask, teacher_dim, s.noise_sigma,
                                    int(rng.integers(2**31)), n_classes=len(prototypes),
                                    prototypes=prototypes)
    return SyntheticFrame(lidar, image, mask, feats)


def emit_dataset(n_frames: int, seed: int, out_dir: str | Path, synth: SynthSection | None = None,
                 teacher_size: tuple[int, int] = (448, 224), teacher_dim: int = 8,
                 n_classes: int = 4, max_dt_ns: int = 50_000_000) -> PairManifest:
    """Write a complete synthetic dataset and its manifest under ``out_dir``.

    Layout: ``lidar/<ts>.lfrm`` (with ground-truth labels), ``images/<ts>.ppm``,
    ``masks/<ts>.pgm``, ``features/<ts>.fmap``, an empty ``labels/``, ``rig.json``
    and ``manifest.jsonl``. The teacher features are rendered at
    ``teacher_size`` (w, h), as a resized-input teacher would produce them.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    s = synth or SynthSection()
    out = Path(out_dir)
    for sub in ("lidar", "images", "masks", "features", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rig = synthetic_rig(s)
    save_rig_config(rig, out / "rig.json")
    prototypes = class_prototypes(n_classes, teacher_dim, seed)
    lidar_ts, image_ts, lp, ip, mp, fp = [], [], [], [], [], []
    for i in range(n_frames):
        f = make_frame(i, seed, s, rig, teacher_size, teacher_dim, prototypes)
        lt, it = f.lidar.timestamp_ns, f.image.timestamp_ns
        write_lidar_frame(f.lidar, out / "lidar" / f"{lt}.lfrm")
        write_image(f.image, out / "images" / f"{it}.ppm")
        write_mask(f.mask, out / "masks" / f"{it}.pgm")
        write_feature_map(f.features, out / "features" / f"{it}.fmap")
        lidar_ts.append(lt)
        image_ts.append(it)
        lp.append(f"lidar/{lt}.lfrm")
        ip.append(f"images/{it}.ppm")
        mp.append(f"masks/{it}.pgm")
        fp.append(f"features/{it}.fmap")
    order = np.argsort(image_ts, kind="stable")
    manifest = pair_frames(lidar_ts, [image_ts[k] for k in order], max_dt_ns, lp,
                           [ip[k] for k in order], [mp[k] for k in order], [fp[k] for k in order])
    manifest.root = out
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest
