"""Training objective: token cross-entropy plus per-mask BCE and DICE.

All three losses accept either autodiff tensors (for training) or plain
arrays (for analysis); they always return a scalar Tensor so gradients
can flow when the inputs are tracked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    lm: float = 1.0
    bce: float = 2.0
    dice: float = 0.5

    def __post_init__(self) -> None:
        if min(self.lm, self.bce, self.dice) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    lm: float
    bce: float
    dice: float
    total: float

    def to_json(self) -> dict:
        return {"lm": self.lm, "bce": self.bce, "dice": self.dice, "total": self.total}


def lm_cross_entropy(logits, targets: np.ndarray, ignore: np.ndarray | None = None) -> Tensor:
    """Mean negative log-softmax probability of the target tokens.

    `ignore` marks positions excluded from supervision (question tokens);
    at least one position must remain.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n_pos = logits.shape[0]
    if targets.shape != (n_pos,):
        raise ValueError(f"targets shape {targets.shape} does not match {n_pos} positions")
    if ignore is None:
        keep = np.arange(n_pos)
    else:
        ignore = np.asarray(ignore, dtype=bool)
        if ignore.shape != (n_pos,):
            raise ValueError("ignore mask must align with the sequence")
        keep = np.flatnonzero(~ignore)
    if keep.size == 0:
        raise ValueError("all positions ignored; nothing to supervise")
    logp = ad.log_softmax(logits, axis=-1)
    picked = logp[(keep, targets[keep])]
    return -ad.mean(picked)


def bce_with_logits(mask_logits, gt: np.ndarray) -> Tensor:
    """Per-pixel mean binary cross-entropy in the overflow-safe log form."""
    mask_logits = _as_tensor(mask_logits)
    y = _as_float_target(mask_logits, gt)
    pos = ad.log_sigmoid(mask_logits)
    neg = ad.log_sigmoid(-mask_logits)
    return -ad.mean(y * pos + (1.0 - y) * neg)


def dice_loss(mask_logits, gt: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft DICE on sigmoid probabilities; smoothing keeps empty targets finite."""
    mask_logits = _as_tensor(mask_logits)
    y = _as_float_target(mask_logits, gt)
    p = ad.sigmoid(mask_logits)
    overlap = ad.sum(p * y)
    denom = ad.sum(p) + float(y.sum())
    return 1.0 - (2.0 * overlap + smooth) / (denom + smooth)


def dice_loss_batched(mask_logits, gts: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """Mean soft DICE over a stack of (N, H, W) mask logits."""
    mask_logits = _as_tensor(mask_logits)
    y = _as_float_target(mask_logits, gts)
    p = ad.sigmoid(mask_logits)
    overlap = ad.sum(p * y, axis=(1, 2))
    denom = ad.sum(p, axis=(1, 2)) + y.sum(axis=(1, 2))
    per_mask = 1.0 - (2.0 * overlap + smooth) / (denom + smooth)
    return ad.mean(per_mask)


def total_loss(lm: float, bce: float, dice: float, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted combination of the three already-reduced loss terms."""
    total = weights.lm * lm + weights.bce * bce + weights.dice * dice
    return LossBreakdown(lm=float(lm), bce=float(bce), dice=float(dice), total=float(total))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _as_float_target(logits: Tensor, gt: np.ndarray) -> np.ndarray:
    y = np.asarray(gt).astype(np.float64)
    if y.shape != logits.shape:
        raise ValueError(f"target shape {y.shape} does not match logits {logits.shape}")
    return y
