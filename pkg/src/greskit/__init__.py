"""Generalized referring expression segmentation at desk scale.

Library surface: binary-mask primitives and the run-length codec,
dataset loading and synthesis, the segmentation/rejection token
protocol, GRES / Ref-ZOM / REC metric suites, the combined training
objective, and a small trainable model that exercises all of it.
"""

from .dataset import Dataset, ground_truth_mask, load_dataset, split_refs
from .losses import LossBreakdown, LossWeights, bce_with_logits, dice_loss, lm_cross_entropy, total_loss
from .masks import (
    BBox,
    Rle,
    bbox_iou,
    decode_rle,
    encode_rle,
    intersection_area,
    iou,
    mask_to_bbox,
    merge_masks,
    positive_pixel_count,
    union_area,
)
from .metrics import EmptyPolicy, evaluate_gres, evaluate_rec, evaluate_refzom
from .model import ModelState, ToyConfig, decode_masks, encode_image, extract_queries, forward, generate, init_model
from .protocol import (
    Decision,
    PromptPlan,
    ResponseParse,
    SpecialVocab,
    Vocab,
    assign_masks,
    build_answer,
    build_question,
    parse_response,
    select_seg_positions,
)
from .synth import SynthConfig, synth_generate
from .train import TrainConfig, gradient_check, load_checkpoint, save_checkpoint, train_model, train_step

__version__ = "0.1.0"
