"""Lidar/image timestamp pairing, manifests, and temporal train/val/test splits."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FormatError, ValidationError

MANIFEST_KEYS = ("lidar", "image", "mask", "featmap", "labels", "dt_ns")


@dataclass(frozen=True)
class ManifestRecord:
    lidar: str
    image: str | None = None
    mask: str | None = None
    featmap: str | None = None
    labels: str | None = None
    dt_ns: int | None = None

    @property
    def paired(self) -> bool:
        return self.image is not None


@dataclass
class PairManifest:
    records: list[ManifestRecord]
    root: Path | None = None  # directory that relative paths are resolved against

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def validate(self, max_dt_ns: int | None = None) -> None:
        seen = set()
        for r in self.records:
            if r.lidar in seen:
                raise ValidationError(f"manifest: duplicate lidar path {r.lidar}")
            seen.add(r.lidar)
            if max_dt_ns is not None and r.paired and r.dt_ns is not None and abs(r.dt_ns) > max_dt_ns:
                raise ValidationError(f"manifest: record {r.lidar} has |dt| {abs(r.dt_ns)} > {max_dt_ns}")


def _check_sorted(ts: Sequence[int], what: str) -> None:
    for a, b in zip(ts, ts[1:]):
        if b < a:
            raise ValueError(f"{what} timestamps must be sorted ascending")


def nearest_indices(lidar_ts: Sequence[int], image_ts: Sequence[int]) -> list[int | None]:
    """Index of the closest image per lidar stamp; ties go to the earlier image.

    Two-pointer scan, O(n + m). Both inputs must be sorted ascending.
    """
    _check_sorted(lidar_ts, "lidar")
    _check_sorted(image_ts, "image")
    out: list[int | None] = []
    m = len(image_ts)
    j = 0  # first image with ts > current lidar ts
    for t in lidar_ts:
        while j < m and image_ts[j] <= t:
            j += 1
        before = j - 1 if j > 0 else None
        after = j if j < m else None
        if before is None:
            out.append(after)
        elif after is None:
            out.append(before)
        else:
            out.append(before if t - image_ts[before] <= image_ts[after] - t else after)
    return out


def pair_frames(lidar_ts: Sequence[int], image_ts: Sequence[int], max_dt_ns: int,
                lidar_paths: Sequence[str] | None = None,
                image_paths: Sequence[str] | None = None,
                mask_paths: Sequence[str | None] | None = None,
                featmap_paths: Sequence[str | None] | None = None) -> PairManifest:
    """Pair every lidar frame with its temporally closest image.

    Frames whose nearest image is further than ``max_dt_ns`` away stay in the
    manifest unpaired. Paths default to the decimal timestamps; mask and feature
    paths, when given, follow the image they belong to.
    """
    if max_dt_ns <= 0:
        raise ValueError("max_dt_ns must be positive")
    lidar_paths = list(lidar_paths) if lidar_paths is not None else [str(t) for t in lidar_ts]
    image_paths = list(image_paths) if image_paths is not None else [str(t) for t in image_ts]
    if len(lidar_paths) != len(lidar_ts) or len(image_paths) != len(image_ts):
        raise ValueError("path lists must match timestamp lists")
    records = []
    for i, j in enumerate(nearest_indices(lidar_ts, image_ts)):
        if j is None or abs(image_ts[j] - lidar_ts[i]) > max_dt_ns:
            records.append(ManifestRecord(lidar=lidar_paths[i]))
            continue
        records.append(ManifestRecord(
            lidar=lidar_paths[i],
            image=image_paths[j],
            mask=mask_paths[j] if mask_paths is not None else None,
            featmap=featmap_paths[j] if featmap_paths is not None else None,
            dt_ns=int(image_ts[j]) - int(lidar_ts[i]),
        ))
    return PairManifest(records)


def split_counts(n: int, ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)) -> tuple[int, int, int]:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_manifest(m: PairManifest, ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
                   ) -> tuple[PairManifest, PairManifest, PairManifest]:
    """Contiguous temporal split: first block train, then val, then test."""
    if len(m) == 0:
        raise ValidationError("cannot split an empty manifest")
    n_train, n_val, _ = split_counts(len(m), ratios)
    r = m.records
    return (PairManifest(r[:n_train], m.root),
            PairManifest(r[n_train:n_train + n_val], m.root),
            PairManifest(r[n_train + n_val:], m.root))


# -- manifest files ---------------------------------------------------------

def dumps_manifest(m: PairManifest) -> str:
    lines = [json.dumps({k: asdict(r)[k] for k in MANIFEST_KEYS}) for r in m.records]
    return "".join(line + "\n" for line in lines)


def write_manifest(m: PairManifest, path: str | Path) -> None:
    Path(path).write_text(dumps_manifest(m), encoding="utf-8")


def read_manifest(path: str | Path) -> PairManifest:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(d, dict) or not isinstance(d.get("lidar"), str):
            raise FormatError(f"{path}:{lineno}: record needs a string 'lidar' path")
        extra = set(d) - set(MANIFEST_KEYS)
        if extra:
            raise FormatError(f"{path}:{lineno}: unknown keys {sorted(extra)}")
        dt = d.get("dt_ns")
        if dt is not None and not isinstance(dt, int):
            raise FormatError(f"{path}:{lineno}: dt_ns must be an integer or null")
        records.append(ManifestRecord(**{k: d.get(k) for k in MANIFEST_KEYS}))
    m = PairManifest(records, path.parent)
    try:
        m.validate()
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return m


def with_labels(m: PairManifest, label_paths: Iterable[str | None]) -> PairManifest:
    label_paths = list(label_paths)
    if len(label_paths) != len(m):
        raise ValueError(f"{len(label_paths)} label paths for {len(m)} records")
    return PairManifest([replace(r, labels=lp) for r, lp in zip(m.records, label_paths)], m.root)
