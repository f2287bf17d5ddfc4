"""Randomized micro-datasets and prediction streams for metric testing."""

from __future__ import annotations

import numpy as np

from greskit.dataset import Dataset, ImageEntry, ObjectAnnotation, ReferringSample
from greskit.masks import encode_rle
from greskit.metrics import Prediction
from greskit.protocol import Decision


def random_micro_dataset(rng: np.random.Generator, max_refs: int = 64, max_side: int = 32) -> Dataset:
    """Images with random blob annotations; refs mix empty/single/multi targets."""
    n_images = int(rng.integers(1, 5))
    images = {}
    for i in range(n_images):
        h = int(rng.integers(4, max_side + 1))
        w = int(rng.integers(4, max_side + 1))
        images[i] = ImageEntry(i, f"{i:06d}.png", h, w)
    annotations = {}
    refs = {}
    ann_id = 0
    n_refs = int(rng.integers(2, max_refs + 1))
    for rid in range(n_refs):
        img = images[int(rng.integers(n_images))]
        kind = rng.random()
        split = "val" if rng.random() < 0.8 else "train"
        if kind < 0.3:
            refs[rid] = ReferringSample(rid, img.image_id, f"ref {rid}", (), split)
            continue
        n_objs = 1 if kind < 0.75 else int(rng.integers(2, 4))
        ids = []
        for _ in range(n_objs):
            mask = rng.random((img.height, img.width)) < rng.uniform(0.05, 0.5)
            annotations[ann_id] = ObjectAnnotation(ann_id, img.image_id, encode_rle(mask))
            ids.append(ann_id)
            ann_id += 1
        refs[rid] = ReferringSample(rid, img.image_id, f"ref {rid}", tuple(ids), split)
    return Dataset(images, annotations, refs)


def random_predictions(rng: np.random.Generator, dataset: Dataset, split_ids) -> dict[int, Prediction]:
    """Mix of rejections, empty-ish masks, blobs, and exact ground truths."""
    from greskit.dataset import ground_truth_mask

    preds = {}
    for rid in split_ids:
        ref = dataset.refs[rid]
        img = dataset.images[ref.image_id]
        u = rng.random()
        if u < 0.25:
            preds[rid] = Prediction(rid, Decision.REJ, None)
        elif u < 0.45:
            density = rng.choice([0.0, 0.01, 0.08])
            mask = rng.random((img.height, img.width)) < density
            preds[rid] = Prediction(rid, Decision.SEG, encode_rle(mask))
        elif u < 0.7:
            preds[rid] = Prediction(rid, Decision.SEG, encode_rle(ground_truth_mask(dataset, rid)))
        else:
            mask = rng.random((img.height, img.width)) < rng.uniform(0.2, 0.7)
            preds[rid] = Prediction(rid, Decision.SEG, encode_rle(mask))
    return preds
