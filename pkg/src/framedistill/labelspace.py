"""Class taxonomies, remapping into the four-class structural space, and
mask-to-point label transfer."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import IGNORE_ID
from .errors import FormatError, ValidationError
from .frameio import SemanticMask
from .geometry import ProjectionMap

WALL, FLOOR, CEILING, NON_STRUCTURAL = 0, 1, 2, 3
STRUCTURAL_NAMES = ("wall", "floor", "ceiling", "non_structural")

STRUCTURAL_GROUPS = {
    "wall": WALL,
    "building": WALL,
    "floor": FLOOR,
    "sidewalk": FLOOR,
    "road": FLOOR,
    "ceiling": CEILING,
}
# Object categories the pseudo-label mapping drops instead of calling them non-structural.
DEFAULT_PSEUDO_IGNORED = ("chair", "desk", "furniture")


@dataclass(eq=False)
class LabelMap:
    """Lookup table from 16-bit source ids to target ids (or IGNORE)."""

    table: np.ndarray  # uint16, length 65536
    n_targets: int
    target_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self.table = np.asarray(self.table, dtype=np.uint16)
        if self.table.shape != (65536,):
            raise ValueError("label map table must cover all 65536 source ids")
        if self.table[IGNORE_ID] != IGNORE_ID:
            raise ValueError("IGNORE must map to IGNORE")
        bad = (self.table >= self.n_targets) & (self.table != IGNORE_ID)
        if np.any(bad):
            raise ValueError(f"label map targets must be < {self.n_targets} or IGNORE")

    @classmethod
    def from_pairs(cls, pairs: dict[int, int], n_targets: int,
                   target_names: Sequence[str] = ()) -> "LabelMap":
        table = np.full(65536, IGNORE_ID, dtype=np.uint16)
        for src, dst in pairs.items():
            table[src] = dst
        return cls(table, n_targets, tuple(target_names))

    @classmethod
    def identity(cls, n_classes: int) -> "LabelMap":
        return cls.from_pairs({k: k for k in range(n_classes)}, n_classes)

    def apply(self, ids: np.ndarray) -> np.ndarray:
        return self.table[np.asarray(ids, dtype=np.uint16)]


def remap_mask(mask: SemanticMask, label_map: LabelMap) -> SemanticMask:
    return SemanticMask(mask.width, mask.height, label_map.apply(mask.ids), mask.ignore_id)


def remap_labels(labels: np.ndarray, label_map: LabelMap) -> np.ndarray:
    return label_map.apply(labels)


def transfer_labels(proj: ProjectionMap, mask: SemanticMask,
                    occlusion_tol_m: float | None = None) -> np.ndarray:
    """Give every validly projected point the mask id under its pixel.

    Invalid points get IGNORE. With ``occlusion_tol_m`` set, a point is also
    IGNOREd when another point on the same pixel is more than the tolerance
    closer to the camera.
    """
    if (mask.width, mask.height) != (proj.width, proj.height):
        raise ValidationError(
            f"mask is {mask.width}x{mask.height}, projection expects {proj.width}x{proj.height}")
    labels = np.full(len(proj), IGNORE_ID, dtype=np.uint16)
    idx = np.flatnonzero(proj.valid)
    if idx.size == 0:
        return labels
    flat = proj.py[idx] * proj.width + proj.px[idx]
    labels[idx] = mask.ids[flat]
    if occlusion_tol_m is not None:
        nearest = np.full(proj.width * proj.height, np.inf)
        np.minimum.at(nearest, flat, proj.depth[idx])
        hidden = proj.depth[idx] > nearest[flat] + occlusion_tol_m
        labels[idx[hidden]] = IGNORE_ID
    return labels


def builtin_structural_map(source_names: Sequence[str], variant: str = "pseudo",
                           ignored: Sequence[str] | None = None) -> LabelMap:
    """Map a named source taxonomy onto wall / floor / ceiling / non-structural.

    ``variant="pseudo"`` drops the ``ignored`` categories (chair, desk, furniture
    by default); ``variant="real"`` groups everything that is not wall, floor or
    ceiling into non-structural. Source id = position in ``source_names``.
    """
    if variant not in ("pseudo", "real"):
        raise ValueError(f"variant must be 'pseudo' or 'real', got {variant!r}")
    if len(source_names) >= IGNORE_ID:
        raise ValueError("source taxonomy too large for 16-bit ids")
    if ignored is None:
        ignored = DEFAULT_PSEUDO_IGNORED if variant == "pseudo" else ()
    drop = {n.strip().lower() for n in ignored}
    pairs = {}
    for src, name in enumerate(source_names):
        key = name.strip().lower()
        if key in STRUCTURAL_GROUPS:
            pairs[src] = STRUCTURAL_GROUPS[key]
        elif key in drop:
            pairs[src] = IGNORE_ID
        else:
            pairs[src] = NON_STRUCTURAL
    return LabelMap.from_pairs(pairs, 4, STRUCTURAL_NAMES)


def parse_label_map(text: str, n_targets: int, target_names: Sequence[str] = (),
                    source: str = "<text>") -> LabelMap:
    pairs: dict[int, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise FormatError(f"{source}:{lineno}: expected 'src_id<TAB>target_id|IGNORE'")
        try:
            src = int(parts[0])
            dst = IGNORE_ID if parts[1].strip().upper() == "IGNORE" else int(parts[1])
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: non-integer id") from exc
        if not 0 <= src < IGNORE_ID:
            raise FormatError(f"{source}:{lineno}: source id {src} out of range")
        if src in pairs:
            raise FormatError(f"{source}:{lineno}: duplicate source id {src}")
        if dst != IGNORE_ID and not 0 <= dst < n_targets:
            raise FormatError(f"{source}:{lineno}: target {dst} out of range [0, {n_targets})")
        pairs[src] = dst
    return LabelMap.from_pairs(pairs, n_targets, target_names)


def load_label_map(path: str | Path, n_targets: int = 4,
                   target_names: Sequence[str] = STRUCTURAL_NAMES) -> LabelMap:
    path = Path(path)
    return parse_label_map(path.read_text(encoding="utf-8"), n_targets, target_names, str(path))
