"""Inference: turn a trained model plus a dataset split into predictions.

Each ref becomes one or more prompts (its expression parts, grouped at
the protocol's referent cap). The generated answer is parsed; matched
segmentation entries are decoded into masks from the teacher-forced
hidden states, rejections get nothing, and unmatched referents count as
rejections with a diagnostic. A ref's prediction is the union of its
decoded masks, or a rejection when nothing was segmented.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import Dataset, split_refs
from .model import (
    ModelState,
    apply_query_projector,
    decode_masks_grouped,
    encode_images_batch,
    forward_batch,
    generate_batch,
)
from .protocol import DEFAULT_MAX_REFERENTS, Decision, chunk_referents, parse_response
from .synth import split_expression
from .train import ImageCache, prompt_token_ids
from .errors import ValidationError

INFER_BATCH = 32
MAX_ANSWER_TOKENS = 64


@dataclass
class InferStats:
    prompts: int = 0
    missing_entries: int = 0
    extra_entries: int = 0
    diagnostics: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "prompts": self.prompts,
            "missing_entries": self.missing_entries,
            "extra_entries": self.extra_entries,
        }


@dataclass
class _Prompt:
    ref_id: int
    image_id: int
    n_parts: int
    tokens: list[int]
    answer: list[int] | None = None
    part_decisions: list[Decision] | None = None
    seg_positions: list[int] | None = None  # spliced rows, teacher-forced layout
    masks: list[np.ndarray] | None = None


def ref_prompts(state: ModelState, dataset: Dataset, ref_id: int) -> list[_Prompt]:
    ref = dataset.refs[ref_id]
    cfg = state.config
    parts = split_expression(ref.expression) if cfg.multi_seg else [ref.expression]
    prompts = []
    for group in chunk_referents(parts, DEFAULT_MAX_REFERENTS):
        prompts.append(
            _Prompt(
                ref_id=ref_id,
                image_id=ref.image_id,
                n_parts=len(group),
                tokens=prompt_token_ids(state, group),
            )
        )
    return prompts


def run_inference(
    state: ModelState,
    dataset: Dataset,
    images: dict[int, np.ndarray],
    split: str,
    batch_size: int = INFER_BATCH,
) -> tuple[list[dict], InferStats]:
    """Prediction records (one per ref, split order) plus parse statistics."""
    from .masks import encode_rle, merge_masks  # local to avoid clutter above

    cfg = state.config
    vocab = state.vocab
    refs = split_refs(dataset, split)
    if not refs:
        raise ValidationError(f"split {split!r} has no refs to infer")
    prompts: list[_Prompt] = []
    for rid in refs:
        prompts.extend(ref_prompts(state, dataset, rid))
    stats = InferStats(prompts=len(prompts))
    cache = ImageCache(cfg, {dataset.refs[r].image_id: images[dataset.refs[r].image_id] for r in refs})

    for start in range(0, len(prompts), batch_size):
        group = prompts[start : start + batch_size]
        answers = generate_batch(
            state,
            [images[p.image_id] for p in group],
            [p.tokens for p in group],
            max_len=MAX_ANSWER_TOKENS,
        )
        for prompt, answer in zip(group, answers):
            prompt.answer = answer
            parse = parse_response(answer, vocab)
            entries = parse.entries[: prompt.n_parts]
            if len(parse.entries) > prompt.n_parts:
                stats.extra_entries += len(parse.entries) - prompt.n_parts
                stats.diagnostics.append(
                    f"ref {prompt.ref_id}: {len(parse.entries)} entries for {prompt.n_parts} referents"
                )
            if len(entries) < prompt.n_parts:
                stats.missing_entries += prompt.n_parts - len(entries)
                stats.diagnostics.append(
                    f"ref {prompt.ref_id}: only {len(entries)} entries for {prompt.n_parts} referents"
                )
            prompt.part_decisions = [e.decision for e in entries]
            prompt.part_decisions += [Decision.REJ] * (prompt.n_parts - len(entries))
            offset = len(prompt.tokens)
            prompt.seg_positions = [
                offset + e.token_position + cfg.n_img - 1
                for e in entries
                if e.decision is Decision.SEG
            ]

    _decode_prompt_masks(state, prompts, cache, batch_size)

    by_ref: dict[int, list[_Prompt]] = {}
    for p in prompts:
        by_ref.setdefault(p.ref_id, []).append(p)
    records = []
    for rid in refs:
        img = dataset.images[dataset.refs[rid].image_id]
        masks: list[np.ndarray] = []
        any_seg = False
        for p in by_ref[rid]:
            masks.extend(p.masks or [])
            any_seg = any_seg or any(d is Decision.SEG for d in p.part_decisions or [])
        if any_seg:
            union = merge_masks(masks, img.height, img.width)
            records.append({"ref_id": rid, "decision": "seg", "mask": encode_rle(union).to_json()})
        else:
            records.append({"ref_id": rid, "decision": "rej", "mask": None})
    return records, stats


def _decode_prompt_masks(
    state: ModelState, prompts: list[_Prompt], cache: ImageCache, batch_size: int
) -> None:
    """Teacher-forced pass over prompt+answer to decode segmentation masks."""
    vocab = state.vocab
    active = [p for p in prompts if p.seg_positions]
    for p in prompts:
        p.masks = []
    with ad.no_grad():
        for start in range(0, len(active), batch_size):
            group = active[start : start + batch_size]
            rows = [p.tokens + list(p.answer or []) for p in group]
            width = max(len(r) for r in rows)
            ids = np.full((len(group), width), vocab.special.pad_id, dtype=np.int64)
            for b, r in enumerate(rows):
                ids[b, : len(r)] = r
            patch_stack = np.stack([cache.patches[p.image_id] for p in group])
            seg_stack = np.stack([cache.seg_patches[p.image_id] for p in group])
            visual, seg_feats = encode_images_batch(state, patch_stack, seg_stack)
            hidden = forward_batch(state, visual, ids)
            owners = np.concatenate(
                [np.full(len(p.seg_positions), b, dtype=np.int64) for b, p in enumerate(group)]
            )
            positions = np.concatenate([np.asarray(p.seg_positions, dtype=np.int64) for p in group])
            queries = apply_query_projector(state, hidden[(owners, positions)])
            logits = decode_masks_grouped(queries, seg_feats, owners, state)
            masks = logits.data > 0.0
            cursor = 0
            for p in group:
                n = len(p.seg_positions)
                p.masks = [masks[cursor + i] for i in range(n)]
                cursor += n
