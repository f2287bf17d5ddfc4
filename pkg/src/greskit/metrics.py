"""GRES, Ref-ZOM, and REC scoring with exact empty-target semantics.

The empty-target rules: a correctly classified empty target scores 1.0
toward gIoU and stays out of cIoU entirely; a misclassified one scores
0.0 and its predicted area lands in the cIoU union. A rejected non-empty
target is scored as an all-zero prediction, so the ground-truth area
accumulates in the union. Two empty-classification policies exist: the
explicit rejection decision, and the pixel-threshold fallback (fewer
than N positive pixels, default 50, strict).

Accumulators are integer-exact and merge commutatively, so evaluation
parallelizes over refs and never depends on stream order.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .dataset import Dataset, ground_truth_mask, split_refs
from .errors import PredictionError, ValidationError
from .masks import (
    Rle,
    bbox_iou,
    decode_rle,
    intersection_area,
    mask_to_bbox,
    positive_pixel_count,
    union_area,
)
from .protocol import Decision

DEFAULT_PIXEL_THRESHOLD = 50
_EVAL_CHUNKS = 32  # fixed chunk count keeps results identical for any worker count


@dataclass(frozen=True)
class EmptyPolicy:
    """How a prediction is classified as empty."""

    kind: str  # "explicit" | "pixel"
    threshold: int = DEFAULT_PIXEL_THRESHOLD

    def __post_init__(self) -> None:
        if self.kind not in ("explicit", "pixel"):
            raise ValidationError(f"unknown empty policy {self.kind!r}")
        if self.kind == "pixel" and self.threshold < 1:
            raise ValidationError("pixel threshold must be at least 1")

    @classmethod
    def parse(cls, text: str) -> "EmptyPolicy":
        if text == "explicit":
            return cls("explicit")
        if text == "pixel":
            return cls("pixel")
        if text.startswith("pixel:"):
            return cls("pixel", int(text.split(":", 1)[1]))
        raise ValidationError(f"policy must be 'explicit' or 'pixel:<N>', got {text!r}")

    def describe(self) -> str:
        return "explicit" if self.kind == "explicit" else f"pixel:{self.threshold}"


@dataclass(frozen=True)
class Prediction:
    ref_id: int
    decision: Decision
    mask: Optional[Rle]

    @classmethod
    def from_json(cls, obj: dict) -> "Prediction":
        try:
            ref_id = int(obj["ref_id"])
            decision = Decision(obj["decision"])
            mask = obj["mask"]
        except (KeyError, TypeError, ValueError) as exc:
            raise PredictionError(f"malformed prediction record: {obj!r}") from exc
        if decision is Decision.REJ:
            if mask is not None:
                raise PredictionError(f"ref {ref_id}: rejection must carry a null mask")
            return cls(ref_id, decision, None)
        if mask is None:
            raise PredictionError(f"ref {ref_id}: segmentation decision needs a mask")
        return cls(ref_id, decision, Rle.from_json(mask))

    def to_json(self) -> dict:
        return {
            "ref_id": self.ref_id,
            "decision": self.decision.value,
            "mask": None if self.mask is None else self.mask.to_json(),
        }

    def effective_mask(self, height: int, width: int) -> np.ndarray:
        """The mask this prediction stands for; rejections are all-zero."""
        if self.mask is None:
            return np.zeros((height, width), dtype=bool)
        m = decode_rle(self.mask)
        if m.shape != (height, width):
            raise PredictionError(
                f"ref {self.ref_id}: predicted mask is {m.shape}, image is {(height, width)}"
            )
        return m


@dataclass
class GresAccumulator:
    giou_sum: float = 0.0
    sample_count: int = 0
    inter_sum: int = 0
    union_sum: int = 0
    empty_total: int = 0
    empty_correct: int = 0

    def merge(self, other: "GresAccumulator") -> None:
        self.giou_sum += other.giou_sum
        self.sample_count += other.sample_count
        self.inter_sum += other.inter_sum
        self.union_sum += other.union_sum
        self.empty_total += other.empty_total
        self.empty_correct += other.empty_correct

    def to_json(self) -> dict:
        return {
            "giou_sum": self.giou_sum,
            "sample_count": self.sample_count,
            "inter_sum": self.inter_sum,
            "union_sum": self.union_sum,
            "empty_total": self.empty_total,
            "empty_correct": self.empty_correct,
        }


@dataclass(frozen=True)
class GresReport:
    gIoU: float
    cIoU: float
    N_acc: Optional[float]
    accumulators: GresAccumulator
    split: str
    policy: str
    per_ref: Optional[list[dict]] = None

    def to_json(self) -> dict:
        out = {
            "metric_suite": "gres",
            "split": self.split,
            "policy": self.policy,
            "gIoU": self.gIoU,
            "cIoU": self.cIoU,
            "N_acc": self.N_acc,
            "accumulators": self.accumulators.to_json(),
        }
        if self.per_ref is not None:
            out["per_ref"] = self.per_ref
        return out


@dataclass(frozen=True)
class RefZomReport:
    oIoU: Optional[float]
    mIoU: Optional[float]
    Acc: Optional[float]
    accumulators: dict
    split: str
    per_ref: Optional[list[dict]] = None

    def to_json(self) -> dict:
        out = {
            "metric_suite": "refzom",
            "split": self.split,
            "oIoU": self.oIoU,
            "mIoU": self.mIoU,
            "Acc": self.Acc,
            "accumulators": dict(self.accumulators),
        }
        if self.per_ref is not None:
            out["per_ref"] = self.per_ref
        return out


@dataclass(frozen=True)
class RecReport:
    precision: Optional[float]
    correct: int
    total: int
    split: str
    per_ref: Optional[list[dict]] = None

    def to_json(self) -> dict:
        out = {
            "metric_suite": "rec",
            "split": self.split,
            "iou_threshold": 0.5,
            "precision": self.precision,
            "accumulators": {"correct": self.correct, "total": self.total},
        }
        if self.per_ref is not None:
            out["per_ref"] = self.per_ref
        return out


def classify_empty(decision: Optional[Decision], mask: Optional[np.ndarray], policy: EmptyPolicy) -> bool:
    """Is this prediction an empty-target claim under the given policy?"""
    if policy.kind == "explicit":
        if decision is None:
            raise ValidationError("explicit policy requires a decision")
        return decision is Decision.REJ
    if mask is None:
        raise ValidationError("pixel policy requires a mask")
    return positive_pixel_count(mask) < policy.threshold


@dataclass(frozen=True)
class GresSampleScore:
    giou_term: float
    inter: int
    union: int
    counts_for_ciou: bool
    empty_outcome: Optional[bool]  # None unless the ground truth is empty


def score_gres_sample(
    pred_decision: Decision,
    pred_mask: Optional[np.ndarray],
    gt: np.ndarray,
    gt_empty: bool,
    policy: EmptyPolicy,
) -> GresSampleScore:
    """Score one ref under the GRES rules; see module docstring."""
    height, width = gt.shape
    effective = pred_mask if pred_mask is not None else np.zeros((height, width), dtype=bool)
    if effective.shape != gt.shape:
        raise ValidationError(f"prediction {effective.shape} vs ground truth {gt.shape}")
    pred_empty = classify_empty(pred_decision, effective, policy)
    if gt_empty:
        if pred_empty:
            return GresSampleScore(1.0, 0, 0, counts_for_ciou=False, empty_outcome=True)
        return GresSampleScore(
            0.0, 0, positive_pixel_count(effective), counts_for_ciou=True, empty_outcome=False
        )
    inter = intersection_area(effective, gt)
    union = union_area(effective, gt)
    return GresSampleScore(inter / union, inter, union, counts_for_ciou=True, empty_outcome=None)


def load_predictions(source: str | Path | Iterable[dict], dataset: Dataset) -> dict[int, Prediction]:
    """Read a prediction stream and index it by ref, rejecting duplicates and strays."""
    if isinstance(source, (str, Path)):
        records = []
        for line_no, line in enumerate(Path(source).read_text().splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise PredictionError(f"line {line_no}: not valid JSON: {exc}") from exc
    else:
        records = list(source)
    out: dict[int, Prediction] = {}
    for rec in records:
        pred = Prediction.from_json(rec)
        if pred.ref_id in out:
            raise PredictionError(f"duplicate prediction for ref {pred.ref_id}")
        if pred.ref_id not in dataset.refs:
            raise PredictionError(f"prediction for unknown ref {pred.ref_id}")
        out[pred.ref_id] = pred
    return out


def _eval_refs(dataset: Dataset, split: str, ref_ids: Optional[Sequence[int]]) -> list[int]:
    refs = split_refs(dataset, split)
    if ref_ids is None:
        return refs
    allowed = set(refs)
    chosen = []
    for rid in ref_ids:
        if rid not in allowed:
            raise PredictionError(f"ref {rid} is not part of split {split!r}")
        chosen.append(rid)
    return sorted(set(chosen))


def _require(predictions: dict[int, Prediction], ref_id: int) -> Prediction:
    pred = predictions.get(ref_id)
    if pred is None:
        raise PredictionError(f"missing prediction for ref {ref_id}")
    return pred


def _chunked(refs: list[int]) -> list[list[int]]:
    if not refs:
        return []
    size = max(1, -(-len(refs) // _EVAL_CHUNKS))
    return [refs[i : i + size] for i in range(0, len(refs), size)]


def evaluate_gres(
    predictions: str | Path | Iterable[dict] | dict[int, Prediction],
    dataset: Dataset,
    split: str,
    policy: EmptyPolicy = EmptyPolicy("explicit"),
    ref_ids: Optional[Sequence[int]] = None,
    include_per_ref: bool = False,
    jobs: int = 1,
) -> GresReport:
    """gIoU / cIoU / N-acc over one split (optionally a subset of its refs)."""
    preds = predictions if isinstance(predictions, dict) else load_predictions(predictions, dataset)
    refs = _eval_refs(dataset, split, ref_ids)

    def score_chunk(chunk: list[int]) -> tuple[GresAccumulator, list[dict]]:
        acc = GresAccumulator()
        rows = []
        for rid in chunk:
            ref = dataset.refs[rid]
            img = dataset.images[ref.image_id]
            pred = _require(preds, rid)
            gt = ground_truth_mask(dataset, rid)
            s = score_gres_sample(
                pred.decision,
                pred.effective_mask(img.height, img.width),
                gt,
                ref.is_empty_target,
                policy,
            )
            acc.giou_sum += s.giou_term
            acc.sample_count += 1
            if s.counts_for_ciou:
                acc.inter_sum += s.inter
                acc.union_sum += s.union
            if s.empty_outcome is not None:
                acc.empty_total += 1
                acc.empty_correct += int(s.empty_outcome)
            if include_per_ref:
                rows.append({"ref_id": rid, "giou_term": s.giou_term, "inter": s.inter, "union": s.union})
        return acc, rows

    total = GresAccumulator()
    per_ref: list[dict] = []
    for acc, rows in _map_chunks(score_chunk, _chunked(refs), jobs):
        total.merge(acc)
        per_ref.extend(rows)
    giou = total.giou_sum / total.sample_count if total.sample_count else 0.0
    ciou = total.inter_sum / total.union_sum if total.union_sum else 1.0
    n_acc = total.empty_correct / total.empty_total if total.empty_total else None
    return GresReport(
        gIoU=giou,
        cIoU=ciou,
        N_acc=n_acc,
        accumulators=total,
        split=split,
        policy=policy.describe(),
        per_ref=per_ref if include_per_ref else None,
    )


def evaluate_refzom(
    predictions: str | Path | Iterable[dict] | dict[int, Prediction],
    dataset: Dataset,
    split: str,
    ref_ids: Optional[Sequence[int]] = None,
    include_per_ref: bool = False,
    jobs: int = 1,
) -> RefZomReport:
    """oIoU / mIoU over refs with targets, plus strictly-all-zero accuracy on empties."""
    preds = predictions if isinstance(predictions, dict) else load_predictions(predictions, dataset)
    refs = _eval_refs(dataset, split, ref_ids)

    def score_chunk(chunk: list[int]) -> tuple[dict, list[dict]]:
        acc = {"iou_sum": 0.0, "targets": 0, "inter": 0, "union": 0, "empty_total": 0, "empty_correct": 0}
        rows = []
        for rid in chunk:
            ref = dataset.refs[rid]
            img = dataset.images[ref.image_id]
            pred = _require(preds, rid)
            effective = pred.effective_mask(img.height, img.width)
            if ref.is_empty_target:
                acc["empty_total"] += 1
                correct = positive_pixel_count(effective) == 0
                acc["empty_correct"] += int(correct)
                if include_per_ref:
                    rows.append({"ref_id": rid, "empty_correct": correct})
                continue
            gt = ground_truth_mask(dataset, rid)
            inter = intersection_area(effective, gt)
            union = union_area(effective, gt)
            acc["iou_sum"] += inter / union if union else 1.0
            acc["targets"] += 1
            acc["inter"] += inter
            acc["union"] += union
            if include_per_ref:
                rows.append({"ref_id": rid, "inter": inter, "union": union})
        return acc, rows

    total = {"iou_sum": 0.0, "targets": 0, "inter": 0, "union": 0, "empty_total": 0, "empty_correct": 0}
    per_ref: list[dict] = []
    for acc, rows in _map_chunks(score_chunk, _chunked(refs), jobs):
        for key in total:
            total[key] += acc[key]
        per_ref.extend(rows)
    oiou = total["inter"] / total["union"] if total["union"] else (1.0 if total["targets"] else None)
    miou = total["iou_sum"] / total["targets"] if total["targets"] else None
    acc_rate = total["empty_correct"] / total["empty_total"] if total["empty_total"] else None
    return RefZomReport(
        oIoU=oiou,
        mIoU=miou,
        Acc=acc_rate,
        accumulators=total,
        split=split,
        per_ref=per_ref if include_per_ref else None,
    )


def evaluate_rec(
    predictions: str | Path | Iterable[dict] | dict[int, Prediction],
    dataset: Dataset,
    split: str,
    ref_ids: Optional[Sequence[int]] = None,
    include_per_ref: bool = False,
    jobs: int = 1,
) -> RecReport:
    """Box precision at the strict 0.5 IoU threshold, derived from masks.

    Only refs with targets participate; the comprehension task has no
    empty targets, so empty-GT refs in the split are skipped.
    """
    preds = predictions if isinstance(predictions, dict) else load_predictions(predictions, dataset)
    refs = [r for r in _eval_refs(dataset, split, ref_ids) if not dataset.refs[r].is_empty_target]

    def score_chunk(chunk: list[int]) -> tuple[dict, list[dict]]:
        acc = {"correct": 0, "total": 0}
        rows = []
        for rid in chunk:
            ref = dataset.refs[rid]
            img = dataset.images[ref.image_id]
            pred = _require(preds, rid)
            gt_box = mask_to_bbox(ground_truth_mask(dataset, rid))
            pred_box = mask_to_bbox(pred.effective_mask(img.height, img.width))
            correct = pred_box is not None and gt_box is not None and bbox_iou(pred_box, gt_box) > 0.5
            acc["correct"] += int(correct)
            acc["total"] += 1
            if include_per_ref:
                rows.append({"ref_id": rid, "correct": correct})
        return acc, rows

    total = {"correct": 0, "total": 0}
    per_ref: list[dict] = []
    for acc, rows in _map_chunks(score_chunk, _chunked(refs), jobs):
        total["correct"] += acc["correct"]
        total["total"] += acc["total"]
        per_ref.extend(rows)
    precision = total["correct"] / total["total"] if total["total"] else None
    return RecReport(
        precision=precision,
        correct=total["correct"],
        total=total["total"],
        split=split,
        per_ref=per_ref if include_per_ref else None,
    )


def _map_chunks(fn, chunks: list, jobs: int):
    if jobs <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, chunks))


def format_report_table(report: GresReport | RefZomReport | RecReport) -> str:
    """Fixed-width single-row table, one column per headline metric."""
    data = report.to_json()
    if data["metric_suite"] == "gres":
        cols = [("gIoU", data["gIoU"]), ("cIoU", data["cIoU"]), ("N-acc.", data["N_acc"])]
    elif data["metric_suite"] == "refzom":
        cols = [("oIoU", data["oIoU"]), ("mIoU", data["mIoU"]), ("Acc", data["Acc"])]
    else:
        cols = [("Prec@0.5", data["precision"])]
    header = " | ".join(f"{name:>8s}" for name, _ in cols)
    values = " | ".join(f"{(100.0 * v):8.2f}" if v is not None else f"{'-':>8s}" for _, v in cols)
    width = max(len(header), len(values))
    return "\n".join(["-" * width, header, "-" * width, values, "-" * width])
