"""Rigid transforms and pinhole projection of lidar points into camera pixels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

ORTHO_TOL = 1e-9
INVALID = -1


def nearest_rotation(R: np.ndarray) -> np.ndarray:
    """Closest proper rotation to ``R`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``p -> rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
                and np.allclose(self.translation, other.translation, rtol=0, atol=atol))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return RigidTransform(nearest_rotation(a.rotation @ b.rotation),
                          a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T
    return RigidTransform(Rt, -Rt @ t.translation)


def transform_points(t: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Apply ``t`` to an (N, 3) array; extra columns are not accepted."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"points must have shape (N, 3), got {p.shape}")
    return p @ t.rotation.T + t.translation


@dataclass
class ProjectionMap:
    """Per-point pixel assignment; invalid entries hold ``INVALID`` (-1)."""

    valid: np.ndarray  # bool (N,)
    u: np.ndarray  # float64 (N,)
    v: np.ndarray
    px: np.ndarray  # int64 (N,)
    py: np.ndarray
    depth: np.ndarray  # float64 (N,)
    width: int
    height: int

    def __len__(self) -> int:
        return len(self.valid)


def distort(xn: np.ndarray, yn: np.ndarray, k1: float, k2: float,
            p1: float, p2: float) -> tuple[np.ndarray, np.ndarray]:
    """Brown-Conrady radial + tangential distortion of normalized coordinates."""
    r2 = xn * xn + yn * yn
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
    yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
    return xd, yd


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def project_camera_points(cam: np.ndarray, intr, min_depth: float) -> ProjectionMap:
    """Project points already expressed in the camera frame (z forward)."""
    cam = np.asarray(cam, dtype=np.float64)
    z = cam[:, 2]
    in_front = z >= min_depth
    zs = np.where(in_front, z, 1.0)
    xd, yd = distort(cam[:, 0] / zs, cam[:, 1] / zs, intr.k1, intr.k2, intr.p1, intr.p2)
    u = intr.fx * xd + intr.cx
    v = intr.fy * yd + intr.cy
    finite = np.isfinite(u) & np.isfinite(v)
    u = np.where(finite, u, 0.0)
    v = np.where(finite, v, 0.0)
    # clip only guards the int cast; clipped values are far outside any image
    px = round_half_up(np.clip(u, -1e12, 1e12))
    py = round_half_up(np.clip(v, -1e12, 1e12))
    valid = (in_front & finite & (px >= 0) & (px < intr.width)
             & (py >= 0) & (py < intr.height))
    sentinel = float(INVALID)
    return ProjectionMap(
        valid=valid,
        u=np.where(valid, u, sentinel),
        v=np.where(valid, v, sentinel),
        px=np.where(valid, px, INVALID),
        py=np.where(valid, py, INVALID),
        depth=np.where(valid, z, sentinel),
        width=intr.width,
        height=intr.height,
    )


def project_points(rig, frame) -> ProjectionMap:
    """Map every lidar point to its camera pixel through the rig extrinsics and intrinsics."""
    xyz = np.asarray(frame.points, dtype=np.float64)[:, :3]
    cam = transform_points(rig.extrinsics, xyz)
    return project_camera_points(cam, rig.intrinsics, rig.min_depth)


def render_overlay(image, proj: ProjectionMap, colors: np.ndarray):
    """Draw each valid point as a single pixel; later points overwrite earlier ones."""
    from .frameio import ImageFrame

    if (image.width, image.height) != (proj.width, proj.height):
        raise ValidationError(
            f"overlay image is {image.width}x{image.height}, projection expects "
            f"{proj.width}x{proj.height}")
    colors = np.asarray(colors, dtype=np.uint8).reshape(len(proj), -1)
    pix = image.pixels.reshape(image.height, image.width, image.channels).copy()
    idx = np.flatnonzero(proj.valid)
    if idx.size:
        flat = proj.py[idx] * proj.width + proj.px[idx]
        # keep only the last point per pixel so the result does not rely on
        # numpy's unspecified behaviour for duplicate fancy-index writes
        _, last_rev = np.unique(flat[::-1], return_index=True)
        keep = idx[idx.size - 1 - last_rev]
        c = colors[keep]
        if image.channels == 1:
            c = c.mean(axis=1, keepdims=True).astype(np.uint8) if c.shape[1] != 1 else c
        pix[proj.py[keep], proj.px[keep]] = c[:, : image.channels]
    return ImageFrame(image.timestamp_ns, image.width, image.height, image.channels,
                      pix.reshape(-1))
