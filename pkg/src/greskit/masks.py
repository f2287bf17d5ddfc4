"""Dense binary masks and the numeric bedrock built on them.

A mask is a plain 2-D numpy bool array (height x width). Run-length
encoding is column-major with the first run counting background pixels
(the COCO uncompressed convention), so converted annotation files stay
bit-compatible. Boxes are inclusive pixel coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import RleError


class BBox(NamedTuple):
    """Axis-aligned box over pixel indices, inclusive on all four edges."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)


@dataclass(frozen=True)
class Rle:
    """Column-major alternating-run encoding; first run counts zeros.

    A leading 0 expresses a mask that starts with a foreground pixel;
    interior zero-length runs are forbidden so the form is canonical.
    """

    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise RleError(f"mask dimensions must be positive, got {self.height}x{self.width}")
        counts = self.counts
        if any(c < 0 for c in counts):
            raise RleError("run lengths must be non-negative")
        if any(c == 0 for c in counts[1:]):
            raise RleError("interior zero-length run; only a leading zero is allowed")
        total = sum(counts)
        if total != self.height * self.width:
            raise RleError(
                f"run sum {total} does not cover a {self.height}x{self.width} mask "
                f"({self.height * self.width} pixels)"
            )

    def to_json(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "Rle":
        try:
            size = obj["size"]
            counts = obj["counts"]
        except (KeyError, TypeError) as exc:
            raise RleError(f"RLE object must carry 'size' and 'counts': {obj!r}") from exc
        if len(size) != 2:
            raise RleError(f"RLE size must be [height, width], got {size!r}")
        return cls(int(size[0]), int(size[1]), tuple(int(c) for c in counts))


def decode_rle(rle: Rle) -> np.ndarray:
    """Expand runs back into a dense bool mask (inverse of encode_rle)."""
    values = np.arange(len(rle.counts)) % 2 == 1
    flat = np.repeat(values, np.asarray(rle.counts, dtype=np.int64))
    return flat.reshape((rle.height, rle.width), order="F")


def encode_rle(mask: np.ndarray) -> Rle:
    """Encode a bool mask into canonical column-major runs."""
    mask = _as_mask(mask)
    h, w = mask.shape
    flat = mask.ravel(order="F")
    if flat.size == 0:
        raise RleError("cannot encode an empty mask")
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    counts = np.diff(edges)
    if flat[0]:
        counts = np.concatenate(([0], counts))
    return Rle(h, w, tuple(int(c) for c in counts))


def intersection_area(a: np.ndarray, b: np.ndarray) -> int:
    """Popcount of the pixelwise AND."""
    a, b = _same_shape(a, b)
    return int(np.count_nonzero(a & b))


def union_area(a: np.ndarray, b: np.ndarray) -> int:
    """Popcount of the pixelwise OR."""
    a, b = _same_shape(a, b)
    return int(np.count_nonzero(a | b))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union.

    Both masks empty yields 1.0: an empty prediction against an empty
    ground truth is a perfect match (the credit rule for correct
    rejections depends on this convention).
    """
    a, b = _same_shape(a, b)
    union = union_area(a, b)
    if union == 0:
        return 1.0
    return intersection_area(a, b) / union


def merge_masks(masks: Sequence[np.ndarray], height: int, width: int) -> np.ndarray:
    """Pixelwise OR of all masks; an empty list gives an all-background mask."""
    out = np.zeros((height, width), dtype=bool)
    for m in masks:
        m = _as_mask(m)
        if m.shape != (height, width):
            raise ValueError(f"mask shape {m.shape} does not match target {(height, width)}")
        out |= m
    return out


def mask_to_bbox(mask: np.ndarray) -> Optional[BBox]:
    """Tight inclusive box over foreground pixels; None when the mask is empty."""
    mask = _as_mask(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def bbox_iou(a: BBox, b: BBox) -> float:
    """IoU of two inclusive-pixel boxes; disjoint boxes give 0.0."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area() + b.area() - inter)


def positive_pixel_count(mask: np.ndarray) -> int:
    """Exact foreground popcount."""
    return int(np.count_nonzero(_as_mask(mask)))


def _as_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    return mask.astype(bool, copy=False)


def _same_shape(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask dimensions differ: {a.shape} vs {b.shape}")
    return a, b
