"""Training: prompt construction, batched objective, optimizers, checkpoints.

A prompt supervises one ref's referents: each non-empty referent carries
a segmentation token paired with its ground-truth mask, each empty one a
rejection token with no mask at all. Turning rejections off supervises
empty referents with segmentation tokens against all-zero masks instead.
Samples whose answer holds only rejection tokens contribute language
loss only and leave the mask decoder untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Dataset, split_refs
from .errors import ConfigError, DivergenceError, ValidationError
from .losses import LossBreakdown, LossWeights, bce_with_logits, dice_loss_batched, total_loss
from .masks import decode_rle, merge_masks
from .model import (
    ModelState,
    ToyConfig,
    apply_query_projector,
    decode_masks_grouped,
    encode_images_batch,
    forward_batch,
    init_model,
    logits_at,
    normalize_image,
    patchify,
)
from .protocol import Decision, PromptPlan, build_answer, build_question, chunk_referents
from .synth import split_expression

CHECKPOINT_MAGIC = b"GRSKCKP1"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    batch_size: int = 8
    lr: float = 0.5
    optimizer: str = "sgd"
    grad_clip: float = 1.0
    warmup_steps: int = 0
    lr_decay: str = "none"  # none | linear
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_decay not in ("none", "linear"):
            raise ConfigError(f"unknown lr decay {self.lr_decay!r}")

    def lr_at(self, step: int) -> float:
        lr = self.lr
        if self.warmup_steps and step < self.warmup_steps:
            return lr * (step + 1) / self.warmup_steps
        if self.lr_decay == "linear" and self.steps > self.warmup_steps:
            frac = (step - self.warmup_steps) / max(1, self.steps - self.warmup_steps)
            return lr * max(0.05, 1.0 - frac)
        return lr

    def to_json(self) -> dict:
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "optimizer": self.optimizer,
            "grad_clip": self.grad_clip,
            "warmup_steps": self.warmup_steps,
            "lr_decay": self.lr_decay,
            "loss_weights": [self.weights.lm, self.weights.bce, self.weights.dice],
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        kwargs = dict(obj)
        lw = kwargs.pop("loss_weights", None)
        if lw is not None:
            kwargs["weights"] = LossWeights(*lw)
        return cls(**kwargs)


@dataclass(frozen=True)
class PromptItem:
    """One training prompt: referent texts, decisions, and mask targets."""

    ref_id: int
    image_id: int
    referents: tuple[str, ...]
    decisions: tuple[Decision, ...]
    gt_masks: tuple[Optional[np.ndarray], ...]  # None exactly for REJ referents


@dataclass(frozen=True)
class PreparedSample:
    """Token-level view of a prompt, ready for the batched forward."""

    image_id: int
    tokens: np.ndarray
    lm_positions: np.ndarray  # spliced rows whose logits are supervised
    lm_targets: np.ndarray
    seg_positions: np.ndarray  # spliced rows of segmentation tokens
    gt_masks: np.ndarray  # (n_seg, H, W) float


def build_prompt_items(dataset: Dataset, cfg: ToyConfig, split: str = "train") -> list[PromptItem]:
    """Expand a split into training prompts under the current protocol flags."""
    items: list[PromptItem] = []
    for rid in split_refs(dataset, split):
        ref = dataset.refs[rid]
        img = dataset.images[ref.image_id]
        if ref.is_empty_target:
            per_part: list[tuple[str, Decision, Optional[np.ndarray]]] = []
            zero = np.zeros((img.height, img.width))
            for part in split_expression(ref.expression) if cfg.multi_seg else [ref.expression]:
                if cfg.use_rej:
                    per_part.append((part, Decision.REJ, None))
                else:
                    per_part.append((part, Decision.SEG, zero))
        elif cfg.multi_seg:
            parts = split_expression(ref.expression)
            if len(parts) == len(ref.ann_ids):
                per_part = [
                    (part, Decision.SEG, decode_rle(dataset.annotations[a].segmentation).astype(np.float64))
                    for part, a in zip(parts, ref.ann_ids)
                ]
            else:
                # Parts don't line up with annotations; fall back to one
                # merged-target referent rather than guessing a pairing.
                per_part = [(ref.expression, Decision.SEG, _merged(dataset, rid))]
        else:
            per_part = [(ref.expression, Decision.SEG, _merged(dataset, rid))]
        for chunk in chunk_referents([p[0] for p in per_part], cfg.max_targets):
            n = len(chunk)
            sub, per_part = per_part[:n], per_part[n:]
            items.append(
                PromptItem(
                    ref_id=rid,
                    image_id=ref.image_id,
                    referents=tuple(p[0] for p in sub),
                    decisions=tuple(p[1] for p in sub),
                    gt_masks=tuple(p[2] for p in sub),
                )
            )
    return items


def _merged(dataset: Dataset, rid: int) -> np.ndarray:
    ref = dataset.refs[rid]
    img = dataset.images[ref.image_id]
    parts = [decode_rle(dataset.annotations[a].segmentation) for a in ref.ann_ids]
    return merge_masks(parts, img.height, img.width).astype(np.float64)


def prompt_token_ids(state: ModelState, referents: Iterable[str]) -> list[int]:
    """[bos, image, question...] ids for a referent group."""
    cfg = state.config
    vocab = state.vocab
    question = build_question(PromptPlan(tuple(referents), cfg.template))
    return [vocab.special.bos_id, vocab.special.image_placeholder_id] + vocab.encode_text(question)


def prepare_sample(item: PromptItem, state: ModelState) -> PreparedSample:
    cfg = state.config
    vocab = state.vocab
    prompt = prompt_token_ids(state, item.referents)
    answer = build_answer(
        list(zip(item.referents, item.decisions)),
        vocab,
        prefix_expressions=cfg.prefix_expressions,
        shared_seg=cfg.share_seg_embedding,
    )
    full = prompt + answer + [vocab.special.eos_id]
    n_img = cfg.n_img
    ans_start = len(prompt)
    lm_positions = np.array([t + n_img - 2 for t in range(ans_start, len(full))], dtype=np.int64)
    lm_targets = np.array(full[ans_start:], dtype=np.int64)
    seg_positions = np.array(
        [t + n_img - 1 for t in range(ans_start, len(full)) if vocab.special.is_seg(full[t])],
        dtype=np.int64,
    )
    masks = [m for m, d in zip(item.gt_masks, item.decisions) if d is Decision.SEG]
    if len(masks) != len(seg_positions):
        raise ValidationError("segmentation tokens and ground-truth masks are out of step")
    stack = (
        np.stack(masks)
        if masks
        else np.zeros((0, cfg.image_size, cfg.image_size))
    )
    return PreparedSample(
        image_id=item.image_id,
        tokens=np.array(full, dtype=np.int64),
        lm_positions=lm_positions,
        lm_targets=lm_targets,
        seg_positions=seg_positions,
        gt_masks=stack,
    )


class ImageCache:
    """Patchified views of each rendered image, computed once."""

    def __init__(self, cfg: ToyConfig, images: dict[int, np.ndarray]):
        self.patches: dict[int, np.ndarray] = {}
        self.seg_patches: dict[int, np.ndarray] = {}
        for image_id, img in images.items():
            norm = normalize_image(img, cfg)
            self.patches[image_id] = patchify(norm, cfg.patch_size)
            self.seg_patches[image_id] = patchify(norm, cfg.seg_patch)


def batch_loss(
    state: ModelState,
    samples: list[PreparedSample],
    cache: ImageCache,
    weights: LossWeights,
) -> tuple[Tensor, LossBreakdown]:
    """Combined objective over a batch; returns the graph root and the numbers."""
    cfg = state.config
    vocab = state.vocab
    batch = len(samples)
    if batch == 0:
        raise ValidationError("empty batch")
    width = max(len(s.tokens) for s in samples)
    ids = np.full((batch, width), vocab.special.pad_id, dtype=np.int64)
    for b, s in enumerate(samples):
        ids[b, : len(s.tokens)] = s.tokens
    patch_stack = np.stack([cache.patches[s.image_id] for s in samples])
    need_masks = any(len(s.seg_positions) for s in samples)
    seg_stack = np.stack([cache.seg_patches[s.image_id] for s in samples]) if need_masks else None
    visual, seg_feats = encode_images_batch(state, patch_stack, seg_stack)
    hidden = forward_batch(state, visual, ids)

    lm_b = np.concatenate([np.full(len(s.lm_positions), b, dtype=np.int64) for b, s in enumerate(samples)])
    lm_pos = np.concatenate([s.lm_positions for s in samples])
    lm_tgt = np.concatenate([s.lm_targets for s in samples])
    # Mean over each sample's positions, then over samples.
    lm_w = np.concatenate(
        [np.full(len(s.lm_positions), 1.0 / (batch * len(s.lm_positions))) for s in samples]
    )
    rows = hidden[(lm_b, lm_pos)]
    logp = ad.log_softmax(logits_at(state, rows), axis=-1)
    picked = logp[(np.arange(len(lm_tgt)), lm_tgt)]
    lm = -ad.sum(picked * lm_w)

    if need_masks:
        seg_b = np.concatenate(
            [np.full(len(s.seg_positions), b, dtype=np.int64) for b, s in enumerate(samples)]
        )
        seg_pos = np.concatenate([s.seg_positions for s in samples])
        gt = np.concatenate([s.gt_masks for s in samples])
        queries = apply_query_projector(state, hidden[(seg_b, seg_pos)])
        mask_logits = decode_masks_grouped(queries, seg_feats, seg_b, state)
        bce = bce_with_logits(mask_logits, gt)
        dice = dice_loss_batched(mask_logits, gt)
        total = weights.lm * lm + weights.bce * bce + weights.dice * dice
        breakdown = total_loss(lm.item(), bce.item(), dice.item(), weights)
    else:
        total = weights.lm * lm
        breakdown = total_loss(lm.item(), 0.0, 0.0, weights)
    return total, breakdown


def clip_gradients(state: ModelState, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    sq = 0.0
    for p in state.params.values():
        if p.grad is not None:
            sq += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(sq))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in state.params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class SgdOptimizer:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, state: ModelState) -> None:
        for p in state.params.values():
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


class AdamWOptimizer:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, state: ModelState) -> None:
        self.t += 1
        for name, p in state.params.items():
            if p.grad is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m = self.m[name] = self.beta1 * m + (1 - self.beta1) * p.grad
            v = self.v[name] = self.beta2 * v + (1 - self.beta2) * p.grad * p.grad
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(tcfg: TrainConfig):
    return AdamWOptimizer(tcfg.lr) if tcfg.optimizer == "adamw" else SgdOptimizer(tcfg.lr)


def train_step(
    state: ModelState,
    samples: list[PreparedSample],
    cache: ImageCache,
    weights: LossWeights,
    lr: float,
    grad_clip: float = 1.0,
    optimizer=None,
) -> tuple[ModelState, LossBreakdown]:
    """One clipped gradient-descent update; raises on non-finite loss."""
    total, breakdown = batch_loss(state, samples, cache, weights)
    if not np.isfinite(breakdown.total):
        raise DivergenceError(f"non-finite loss: {breakdown}")
    state.zero_grad()
    total.backward()
    clip_gradients(state, grad_clip)
    (optimizer or SgdOptimizer(lr)).step(state)
    state.zero_grad()
    return state, breakdown


def train_model(
    state: ModelState,
    dataset: Dataset,
    images: dict[int, np.ndarray],
    tcfg: TrainConfig,
    split: str = "train",
) -> list[LossBreakdown]:
    """Run the full loop over a split; returns the per-step loss log."""
    items = build_prompt_items(dataset, state.config, split)
    if not items:
        raise ValidationError(f"no training prompts in split {split!r}")
    prepared = [prepare_sample(i, state) for i in items]
    cache = ImageCache(state.config, {i: images[i] for i in {p.image_id for p in prepared}})
    rng = np.random.default_rng(np.random.SeedSequence((tcfg.seed, 0xB47C4)))
    optimizer = make_optimizer(tcfg)
    log: list[LossBreakdown] = []
    for step in range(tcfg.steps):
        optimizer.lr = tcfg.lr_at(step)
        picks = rng.integers(0, len(prepared), size=tcfg.batch_size)
        batch = [prepared[i] for i in picks]
        _, breakdown = train_step(
            state, batch, cache, tcfg.weights, tcfg.lr, tcfg.grad_clip, optimizer
        )
        log.append(breakdown)
    return log


def gradient_check(
    state: ModelState,
    samples: list[PreparedSample],
    cache: ImageCache,
    weights: LossWeights = LossWeights(),
    epsilon: float = 1e-4,
    n_entries: int = 120,
    seed: int = 0,
    floor: float = 1e-3,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples parameter entries uniformly across the whole model; the floor
    keeps finite-difference cancellation noise on near-zero gradients
    from dominating the ratio.
    """
    total, _ = batch_loss(state, samples, cache, weights)
    state.zero_grad()
    total.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in state.params.items()
    }
    state.zero_grad()

    def value() -> float:
        with ad.no_grad():
            t, _ = batch_loss(state, samples, cache, weights)
        return t.item()

    names = list(state.params)
    sizes = np.array([state.params[n].data.size for n in names])
    cumulative = np.cumsum(sizes)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xFD)))
    worst = 0.0
    for flat in rng.integers(0, cumulative[-1], size=n_entries):
        which = int(np.searchsorted(cumulative, flat, side="right"))
        name = names[which]
        inner = int(flat - (cumulative[which] - sizes[which]))
        index = np.unravel_index(inner, state.params[name].data.shape)
        numeric = ad.finite_difference(value, state.params[name].data, index, epsilon)
        err = ad.relative_error(float(np.asarray(analytic[name])[index]), numeric, floor)
        worst = max(worst, err)
    return worst


def save_checkpoint(path: str | Path, state: ModelState) -> None:
    """Shape-tagged little-endian float64 dump; byte-stable across reruns."""
    names = list(state.params)
    header = {
        "version": 1,
        "config": state.config.to_json(),
        "tensors": [{"name": n, "shape": list(state.params[n].data.shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(state.params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path} is not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    blob_len = int.from_bytes(raw[offset : offset + 8], "little")
    offset += 8
    header = json.loads(raw[offset : offset + blob_len])
    offset += blob_len
    if header.get("version") != 1:
        raise ValidationError(f"unsupported checkpoint version {header.get('version')!r}")
    state = init_model(ToyConfig.from_json(header["config"]))
    for spec in header["tensors"]:
        name = spec["name"]
        shape = tuple(spec["shape"])
        if name not in state.params or state.params[name].data.shape != shape:
            raise ValidationError(f"checkpoint tensor {name} {shape} does not fit the model")
        n_bytes = int(np.prod(shape)) * 8 if shape else 8
        chunk = np.frombuffer(raw[offset : offset + n_bytes], dtype="<f8").reshape(shape)
        state.params[name].data = chunk.astype(np.float64).copy()
        offset += n_bytes
    return state
