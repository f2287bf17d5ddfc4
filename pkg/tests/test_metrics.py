import numpy as np
import pytest

from greskit.dataset import split_refs
from greskit.errors import PredictionError, ValidationError
from greskit.masks import Rle, encode_rle
from greskit.metrics import (
    EmptyPolicy,
    Prediction,
    classify_empty,
    evaluate_gres,
    evaluate_rec,
    evaluate_refzom,
    load_predictions,
    score_gres_sample,
)
from greskit.protocol import Decision

from micro import random_micro_dataset, random_predictions
from oracles import naive_gres, naive_rec, naive_refzom

EXPLICIT = EmptyPolicy("explicit")
PIXEL50 = EmptyPolicy("pixel", 50)


def mask_with(area, h=16, w=16):
    mask = np.zeros((h, w), dtype=bool)
    mask.ravel()[:area] = True
    return mask


class TestClassifyEmpty:
    def test_explicit_rej(self):
        assert classify_empty(Decision.REJ, None, EXPLICIT) is True
        assert classify_empty(Decision.SEG, mask_with(5), EXPLICIT) is False

    def test_pixel_threshold_strict_at_boundary(self):
        assert classify_empty(Decision.SEG, mask_with(49), PIXEL50) is True
        assert classify_empty(Decision.SEG, mask_with(50), PIXEL50) is False

    def test_missing_requirements(self):
        with pytest.raises(ValidationError):
            classify_empty(None, mask_with(3), EXPLICIT)
        with pytest.raises(ValidationError):
            classify_empty(Decision.SEG, None, PIXEL50)

    def test_policy_parse(self):
        assert EmptyPolicy.parse("explicit").kind == "explicit"
        assert EmptyPolicy.parse("pixel:7").threshold == 7
        with pytest.raises(ValidationError):
            EmptyPolicy.parse("fuzzy")


class TestScoreGresSample:
    """The four ground-truth-empty x prediction-empty branches."""

    def test_empty_gt_correct_rejection(self):
        gt = np.zeros((8, 8), dtype=bool)
        s = score_gres_sample(Decision.REJ, None, gt, True, EXPLICIT)
        assert s.giou_term == 1.0
        assert not s.counts_for_ciou
        assert s.empty_outcome is True

    def test_empty_gt_missed_rejection_accumulates_pred_area(self):
        gt = np.zeros((8, 8), dtype=bool)
        s = score_gres_sample(Decision.SEG, mask_with(30, 8, 8), gt, True, EXPLICIT)
        assert s.giou_term == 0.0
        assert (s.inter, s.union) == (0, 30)
        assert s.counts_for_ciou
        assert s.empty_outcome is False

    def test_nonempty_gt_rejection_accumulates_gt_area(self):
        gt = mask_with(10, 8, 8)
        s = score_gres_sample(Decision.REJ, None, gt, False, EXPLICIT)
        assert s.giou_term == 0.0
        assert (s.inter, s.union) == (0, 10)
        assert s.counts_for_ciou
        assert s.empty_outcome is None

    def test_nonempty_gt_normal_iou(self):
        gt = mask_with(10, 8, 8)
        pred = mask_with(5, 8, 8)
        s = score_gres_sample(Decision.SEG, pred, gt, False, EXPLICIT)
        assert s.giou_term == pytest.approx(0.5)
        assert (s.inter, s.union) == (5, 10)

    def test_pixel_policy_small_mask_counts_as_rejection(self):
        gt = np.zeros((16, 16), dtype=bool)
        s = score_gres_sample(Decision.SEG, mask_with(30), gt, True, PIXEL50)
        assert s.giou_term == 1.0 and not s.counts_for_ciou


def _as_records(preds):
    return [p.to_json() for p in preds.values()]


class TestEvaluateGres:
    def test_perfect_predictions_all_ones(self):
        rng = np.random.default_rng(0)
        ds = random_micro_dataset(rng)
        split = split_refs(ds, "val")
        preds = {}
        from greskit.dataset import ground_truth_mask

        for rid in split:
            ref = ds.refs[rid]
            if ref.is_empty_target:
                preds[rid] = Prediction(rid, Decision.REJ, None)
            else:
                preds[rid] = Prediction(rid, Decision.SEG, encode_rle(ground_truth_mask(ds, rid)))
        rep = evaluate_gres(preds, ds, "val", EXPLICIT)
        assert rep.gIoU == 1.0 and rep.cIoU == 1.0
        assert rep.N_acc in (None, 1.0)

    def test_hand_accumulated_two_refs(self):
        rng = np.random.default_rng(1)
        # craft: one non-empty ref scored at IoU 0.5, one empty correctly rejected
        from greskit.dataset import Dataset, ImageEntry, ObjectAnnotation, ReferringSample

        gt = mask_with(10, 8, 8)
        ds = Dataset(
            {0: ImageEntry(0, "x.png", 8, 8)},
            {0: ObjectAnnotation(0, 0, encode_rle(gt))},
            {
                0: ReferringSample(0, 0, "thing", (0,), "val"),
                1: ReferringSample(1, 0, "nothing", (), "val"),
            },
        )
        preds = {
            0: Prediction(0, Decision.SEG, encode_rle(mask_with(5, 8, 8))),
            1: Prediction(1, Decision.REJ, None),
        }
        rep = evaluate_gres(preds, ds, "val", EXPLICIT)
        assert rep.gIoU == pytest.approx((0.5 + 1.0) / 2)
        assert rep.cIoU == pytest.approx(5 / 10)
        assert rep.N_acc == 1.0

    def test_all_seg_predictor_zero_nacc(self):
        rng = np.random.default_rng(2)
        ds = random_micro_dataset(rng)
        split = split_refs(ds, "val")
        preds = {
            rid: Prediction(rid, Decision.SEG, encode_rle(mask_with(60, ds.images[ds.refs[rid].image_id].height, ds.images[ds.refs[rid].image_id].width)))
            for rid in split
        }
        rep = evaluate_gres(preds, ds, "val", EXPLICIT)
        if rep.accumulators.empty_total:
            assert rep.N_acc == 0.0

    def test_missing_prediction_raises(self):
        rng = np.random.default_rng(3)
        ds = random_micro_dataset(rng)
        with pytest.raises(PredictionError, match="missing"):
            evaluate_gres({}, ds, "val", EXPLICIT)

    def test_duplicate_and_foreign_rejected(self):
        rng = np.random.default_rng(4)
        ds = random_micro_dataset(rng)
        split = split_refs(ds, "val")
        preds = random_predictions(rng, ds, split)
        records = _as_records(preds)
        with pytest.raises(PredictionError, match="duplicate"):
            load_predictions(records + records[:1], ds)
        stray = dict(records[0])
        stray["ref_id"] = 10_000
        with pytest.raises(PredictionError, match="unknown ref"):
            load_predictions(records + [stray], ds)

    def test_order_invariance_bit_identical(self):
        rng = np.random.default_rng(5)
        ds = random_micro_dataset(rng)
        split = split_refs(ds, "val")
        preds = random_predictions(rng, ds, split)
        records = _as_records(preds)
        fwd = evaluate_gres(list(records), ds, "val", EXPLICIT)
        rev = evaluate_gres(list(reversed(records)), ds, "val", EXPLICIT)
        assert fwd.to_json() == rev.to_json()

    def test_jobs_do_not_change_results(self):
        rng = np.random.default_rng(6)
        ds = random_micro_dataset(rng)
        split = split_refs(ds, "val")
        preds = random_predictions(rng, ds, split)
        a = evaluate_gres(preds, ds, "val", EXPLICIT, jobs=1)
        b = evaluate_gres(preds, ds, "val", EXPLICIT, jobs=4)
        assert a.to_json() == b.to_json()

    def test_policy_equivalence_rej_vs_zero_mask_threshold_one(self):
        # Precondition of the property: segmentation decisions carry at
        # least one positive pixel, so the only all-zero masks after the
        # rewrite are the ones that stood for rejections.
        rng = np.random.default_rng(7)
        ds = random_micro_dataset(rng)
        split = split_refs(ds, "val")
        preds = {}
        for rid, p in random_predictions(rng, ds, split).items():
            if p.decision is Decision.SEG and sum(p.mask.counts[1::2]) == 0:
                img = ds.images[ds.refs[rid].image_id]
                one = np.zeros((img.height, img.width), dtype=bool)
                one[0, 0] = True
                p = Prediction(rid, Decision.SEG, encode_rle(one))
            preds[rid] = p
        under_explicit = evaluate_gres(preds, ds, "val", EXPLICIT)
        rewritten = {}
        for rid, p in preds.items():
            if p.decision is Decision.REJ:
                img = ds.images[ds.refs[rid].image_id]
                zero = np.zeros((img.height, img.width), dtype=bool)
                rewritten[rid] = Prediction(rid, Decision.SEG, encode_rle(zero))
            else:
                rewritten[rid] = p
        under_pixel = evaluate_gres(rewritten, ds, "val", EmptyPolicy("pixel", 1))
        assert under_explicit.gIoU == under_pixel.gIoU
        assert under_explicit.cIoU == under_pixel.cIoU
        assert under_explicit.N_acc == under_pixel.N_acc
        assert under_explicit.accumulators.to_json() == under_pixel.accumulators.to_json()

    def test_all_reject_predictor_identity(self):
        rng = np.random.default_rng(8)
        ds = random_micro_dataset(rng)
        split = split_refs(ds, "val")
        preds = {rid: Prediction(rid, Decision.REJ, None) for rid in split}
        rep = evaluate_gres(preds, ds, "val", EXPLICIT)
        acc = rep.accumulators
        if acc.empty_total:
            assert rep.N_acc == 1.0
        assert rep.gIoU == pytest.approx(acc.empty_total / acc.sample_count)


class TestEvaluateRefZom:
    def test_strictly_all_zero_rule(self):
        from greskit.dataset import Dataset, ImageEntry, ReferringSample

        ds = Dataset(
            {0: ImageEntry(0, "x.png", 8, 8)},
            {},
            {0: ReferringSample(0, 0, "nothing", (), "val")},
        )
        one_pixel = mask_with(1, 8, 8)
        rep = evaluate_refzom({0: Prediction(0, Decision.SEG, encode_rle(one_pixel))}, ds, "val")
        assert rep.Acc == 0.0
        rep2 = evaluate_refzom({0: Prediction(0, Decision.REJ, None)}, ds, "val")
        assert rep2.Acc == 1.0

    def test_no_empty_refs_acc_absent(self):
        rng = np.random.default_rng(9)
        ds = random_micro_dataset(rng)
        split = [r for r in split_refs(ds, "val") if not ds.refs[r].is_empty_target]
        preds = random_predictions(rng, ds, split)
        rep = evaluate_refzom(preds, ds, "val", ref_ids=split)
        assert rep.Acc is None

    def test_matches_independent_accumulation(self):
        rng = np.random.default_rng(10)
        ds = random_micro_dataset(rng)
        split = split_refs(ds, "val")
        preds = random_predictions(rng, ds, split)
        rep = evaluate_refzom(preds, ds, "val")
        ref = naive_refzom(preds, ds, "val")
        assert rep.accumulators == ref


class TestEvaluateRec:
    def test_exact_mask_correct(self):
        rng = np.random.default_rng(11)
        ds = random_micro_dataset(rng)
        split = split_refs(ds, "val")
        from greskit.dataset import ground_truth_mask

        preds = {}
        for rid in split:
            ref = ds.refs[rid]
            if ref.is_empty_target:
                preds[rid] = Prediction(rid, Decision.REJ, None)
            else:
                preds[rid] = Prediction(rid, Decision.SEG, encode_rle(ground_truth_mask(ds, rid)))
        rep = evaluate_rec(preds, ds, "val")
        if rep.total:
            assert rep.precision == 1.0

    def test_empty_prediction_incorrect(self):
        from greskit.dataset import Dataset, ImageEntry, ObjectAnnotation, ReferringSample

        gt = mask_with(12, 8, 8)
        ds = Dataset(
            {0: ImageEntry(0, "x.png", 8, 8)},
            {0: ObjectAnnotation(0, 0, encode_rle(gt))},
            {0: ReferringSample(0, 0, "thing", (0,), "val")},
        )
        rep = evaluate_rec({0: Prediction(0, Decision.REJ, None)}, ds, "val")
        assert rep.precision == 0.0

    def test_exactly_half_iou_is_incorrect(self):
        from greskit.dataset import Dataset, ImageEntry, ObjectAnnotation, ReferringSample
        from greskit.masks import BBox, bbox_iou

        # gt box rows 0..3 cols 0..1 (area 8); pred rows 0..1 cols 0..1 (area 4)
        # box IoU = 4/8 = 0.5 exactly -> strict rule says incorrect
        gt = np.zeros((8, 8), dtype=bool)
        gt[0:4, 0:2] = True
        pred = np.zeros((8, 8), dtype=bool)
        pred[0:2, 0:2] = True
        assert bbox_iou(BBox(0, 0, 1, 3), BBox(0, 0, 1, 1)) == 0.5
        ds = Dataset(
            {0: ImageEntry(0, "x.png", 8, 8)},
            {0: ObjectAnnotation(0, 0, encode_rle(gt))},
            {0: ReferringSample(0, 0, "thing", (0,), "val")},
        )
        rep = evaluate_rec({0: Prediction(0, Decision.SEG, encode_rle(pred))}, ds, "val")
        assert rep.precision == 0.0


class TestOracleEquivalence:
    @pytest.mark.parametrize("policy", [EXPLICIT, PIXEL50], ids=["explicit", "pixel50"])
    def test_gres_matches_naive(self, policy):
        rng = np.random.default_rng(100)
        for _ in range(6):
            ds = random_micro_dataset(rng, max_refs=24, max_side=20)
            split = split_refs(ds, "val")
            preds = random_predictions(rng, ds, split)
            rep = evaluate_gres(preds, ds, "val", policy)
            ref = naive_gres(preds, ds, "val", policy)
            assert rep.accumulators.to_json() == ref

    def test_rec_matches_naive(self):
        rng = np.random.default_rng(101)
        for _ in range(4):
            ds = random_micro_dataset(rng, max_refs=24, max_side=20)
            split = split_refs(ds, "val")
            preds = random_predictions(rng, ds, split)
            rep = evaluate_rec(preds, ds, "val")
            ref = naive_rec(preds, ds, "val")
            assert {"correct": rep.correct, "total": rep.total} == ref


class TestPredictionSchema:
    def test_rej_with_mask_rejected(self):
        with pytest.raises(PredictionError):
            Prediction.from_json({"ref_id": 0, "decision": "rej", "mask": Rle(2, 2, (4,)).to_json()})

    def test_seg_without_mask_rejected(self):
        with pytest.raises(PredictionError):
            Prediction.from_json({"ref_id": 0, "decision": "seg", "mask": None})

    def test_roundtrip(self):
        p = Prediction(3, Decision.SEG, Rle(2, 2, (0, 4)))
        assert Prediction.from_json(p.to_json()) == p
