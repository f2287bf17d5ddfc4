"""Referring-expression dataset: images, object annotations, refs.

One JSON schema serves synthetic and converted data alike, so the metric
suite never cares where a dataset came from. Refs map an expression to
zero, one, or many annotated objects; an empty object list marks an
empty target. Segmentations stay run-length encoded until asked for.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .masks import Rle, decode_rle, merge_masks

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "testA", "testB", "test")


@dataclass(frozen=True)
class ImageEntry:
    image_id: int
    file_name: str
    height: int
    width: int


@dataclass(frozen=True)
class ObjectAnnotation:
    ann_id: int
    image_id: int
    segmentation: Rle


@dataclass(frozen=True)
class ReferringSample:
    ref_id: int
    image_id: int
    expression: str
    ann_ids: tuple[int, ...]
    split: str

    @property
    def is_empty_target(self) -> bool:
        return not self.ann_ids

    @property
    def is_multi_target(self) -> bool:
        return len(self.ann_ids) >= 2


class Dataset:
    """Keyed, referentially-checked collections of images/annotations/refs."""

    def __init__(
        self,
        images: dict[int, ImageEntry],
        annotations: dict[int, ObjectAnnotation],
        refs: dict[int, ReferringSample],
    ):
        self.images = images
        self.annotations = annotations
        self.refs = refs
        self._validate()
        self._split_index: dict[str, list[int]] = {}
        for ref_id in sorted(refs):
            self._split_index.setdefault(refs[ref_id].split, []).append(ref_id)

    def _validate(self) -> None:
        for ann in self.annotations.values():
            img = self.images.get(ann.image_id)
            if img is None:
                raise DatasetError(f"annotation {ann.ann_id} references missing image {ann.image_id}")
            seg = ann.segmentation
            if (seg.height, seg.width) != (img.height, img.width):
                raise DatasetError(
                    f"annotation {ann.ann_id}: segmentation is {seg.height}x{seg.width} but "
                    f"image {img.image_id} is {img.height}x{img.width}"
                )
        for ref in self.refs.values():
            if ref.image_id not in self.images:
                raise DatasetError(f"ref {ref.ref_id} references missing image {ref.image_id}")
            if ref.split not in SPLITS:
                raise DatasetError(f"ref {ref.ref_id} has unknown split {ref.split!r}")
            for ann_id in ref.ann_ids:
                ann = self.annotations.get(ann_id)
                if ann is None:
                    raise DatasetError(f"ref {ref.ref_id} references missing annotation {ann_id}")
                if ann.image_id != ref.image_id:
                    raise DatasetError(
                        f"ref {ref.ref_id} on image {ref.image_id} references annotation "
                        f"{ann_id} belonging to image {ann.image_id}"
                    )

    def image_for_ref(self, ref_id: int) -> ImageEntry:
        return self.images[self.refs[ref_id].image_id]

    def to_json(self) -> dict:
        return {
            "images": [
                {"id": i.image_id, "file_name": i.file_name, "height": i.height, "width": i.width}
                for i in (self.images[k] for k in sorted(self.images))
            ],
            "annotations": [
                {"id": a.ann_id, "image_id": a.image_id, "segmentation": a.segmentation.to_json()}
                for a in (self.annotations[k] for k in sorted(self.annotations))
            ],
            "refs": [
                {
                    "ref_id": r.ref_id,
                    "image_id": r.image_id,
                    "expression": r.expression,
                    "ann_ids": list(r.ann_ids),
                    "split": r.split,
                }
                for r in (self.refs[k] for k in sorted(self.refs))
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    """Load and validate a dataset file; masks stay encoded until used."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path} is not valid JSON: {exc}") from exc
    for key in ("images", "annotations", "refs"):
        if key not in raw:
            raise DatasetError(f"{path} is missing the '{key}' collection")
    images: dict[int, ImageEntry] = {}
    for rec in raw["images"]:
        entry = ImageEntry(
            image_id=_field(rec, "id", "image"),
            file_name=str(_field(rec, "file_name", "image")),
            height=_field(rec, "height", "image"),
            width=_field(rec, "width", "image"),
        )
        if entry.height < 1 or entry.width < 1:
            raise DatasetError(f"image {entry.image_id} has non-positive dimensions")
        if entry.image_id in images:
            raise DatasetError(f"duplicate image id {entry.image_id}")
        images[entry.image_id] = entry
    annotations: dict[int, ObjectAnnotation] = {}
    for rec in raw["annotations"]:
        ann_id = _field(rec, "id", "annotation")
        try:
            seg = Rle.from_json(_field(rec, "segmentation", "annotation"))
        except ValueError as exc:
            raise DatasetError(f"annotation {ann_id}: {exc}") from exc
        if ann_id in annotations:
            raise DatasetError(f"duplicate annotation id {ann_id}")
        annotations[ann_id] = ObjectAnnotation(ann_id, _field(rec, "image_id", "annotation"), seg)
    refs: dict[int, ReferringSample] = {}
    for rec in raw["refs"]:
        ref_id = _field(rec, "ref_id", "ref")
        if ref_id in refs:
            raise DatasetError(f"duplicate ref id {ref_id}")
        refs[ref_id] = ReferringSample(
            ref_id=ref_id,
            image_id=_field(rec, "image_id", "ref"),
            expression=str(_field(rec, "expression", "ref")),
            ann_ids=tuple(_field(rec, "ann_ids", "ref")),
            split=str(_field(rec, "split", "ref")),
        )
    return Dataset(images, annotations, refs)


def ground_truth_mask(dataset: Dataset, ref_id: int) -> np.ndarray:
    """Merged mask over every referenced object; empty targets give all-background."""
    ref = dataset.refs.get(ref_id)
    if ref is None:
        raise DatasetError(f"unknown ref id {ref_id}")
    img = dataset.images[ref.image_id]
    parts = [decode_rle(dataset.annotations[a].segmentation) for a in ref.ann_ids]
    return merge_masks(parts, img.height, img.width)


def split_refs(dataset: Dataset, split: str) -> list[int]:
    """Ref ids in a split, sorted for reproducibility; unknown splits warn."""
    refs = dataset._split_index.get(split)
    if refs is None:
        logger.warning("split %r has no refs in this dataset", split)
        return []
    return list(refs)


def _field(rec: dict, key: str, kind: str):
    try:
        return rec[key]
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"{kind} record missing field {key!r}: {rec!r}") from exc
