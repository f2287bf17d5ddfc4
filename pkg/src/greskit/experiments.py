"""End-to-end pipeline plumbing: dataset directories, runs, ablations.

A dataset directory holds dataset.json, images/<id>.png, and a manifest
recording the generation config and seed. A run composes synthesis,
training, inference, and evaluation with every random draw derived from
one seed, so rerunning a config reproduces its files byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import Dataset, load_dataset, split_refs
from .errors import ValidationError
from .infer import run_inference
from .metrics import EmptyPolicy, GresReport, evaluate_gres
from .model import ModelState, ToyConfig, init_model
from .synth import SynthConfig, synth_generate
from .train import TrainConfig, save_checkpoint, train_model

DATASET_FILE = "dataset.json"
IMAGES_DIR = "images"
MANIFEST_FILE = "manifest.json"


def write_dataset_dir(out_dir: str | Path, dataset: Dataset, images: dict[int, np.ndarray], cfg: SynthConfig) -> None:
    out = Path(out_dir)
    (out / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    dataset.save(out / DATASET_FILE)
    for entry in dataset.images.values():
        Image.fromarray(images[entry.image_id], mode="RGB").save(out / IMAGES_DIR / entry.file_name)
    manifest = {
        "seed": cfg.seed,
        "config": cfg.to_json(),
        "images": len(dataset.images),
        "annotations": len(dataset.annotations),
        "refs": len(dataset.refs),
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset_dir(path: str | Path) -> tuple[Dataset, dict[int, np.ndarray]]:
    root = Path(path)
    dataset = load_dataset(root / DATASET_FILE)
    images: dict[int, np.ndarray] = {}
    for entry in dataset.images.values():
        file = root / IMAGES_DIR / entry.file_name
        if not file.exists():
            raise ValidationError(f"missing rendered image {file}")
        images[entry.image_id] = np.asarray(Image.open(file).convert("RGB"))
    return dataset, images


def write_predictions(path: str | Path, records: list[dict]) -> None:
    lines = [json.dumps(rec, sort_keys=True) for rec in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_report(path: str | Path, report) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


@dataclasses.dataclass(frozen=True)
class VariantResult:
    """Reports from one trained configuration."""

    name: str
    report: GresReport
    multi_target_report: GresReport
    state: ModelState


# Protocol ablations: flag overrides applied on top of the base model
# config. A variant without rejection tokens is scored with the
# pixel-threshold rule since it can never reject explicitly.
ABLATION_VARIANTS: dict[str, dict] = {
    "full": {},
    "no-rej": {"use_rej": False},
    "single-seg": {"multi_seg": False, "use_rej": False},
    "no-prefix": {"prefix_expressions": False},
    "no-share": {"share_seg_embedding": False},
}


def policy_for(config: ToyConfig) -> EmptyPolicy:
    return EmptyPolicy("explicit") if config.use_rej else EmptyPolicy("pixel")


def run_variant(
    name: str,
    dataset: Dataset,
    images: dict[int, np.ndarray],
    base_config: ToyConfig,
    train_config: TrainConfig,
    eval_split: str = "val",
) -> VariantResult:
    """Train one configuration and evaluate it on a held-out split."""
    overrides = ABLATION_VARIANTS.get(name)
    if overrides is None:
        raise ValidationError(f"unknown variant {name!r}; pick from {sorted(ABLATION_VARIANTS)}")
    config = dataclasses.replace(base_config, **overrides)
    state = init_model(config)
    train_model(state, dataset, images, train_config)
    records, _ = run_inference(state, dataset, images, eval_split)
    policy = policy_for(config)
    report = evaluate_gres(records, dataset, eval_split, policy)
    multi = [r for r in split_refs(dataset, eval_split) if dataset.refs[r].is_multi_target]
    multi_report = evaluate_gres(records, dataset, eval_split, policy, ref_ids=multi)
    return VariantResult(name=name, report=report, multi_target_report=multi_report, state=state)


def default_trend_synth(seed: int, samples: int = 2000) -> SynthConfig:
    return SynthConfig(samples=samples, empty_target_prob=0.25, multi_target_prob=0.6, seed=seed)


def default_trend_train(seed: int, steps: int = 1600) -> TrainConfig:
    return TrainConfig(
        steps=steps,
        batch_size=8,
        lr=3e-3,
        optimizer="adamw",
        warmup_steps=100,
        lr_decay="linear",
        seed=seed,
    )


def run_trend_suite(
    seed: int,
    variants: list[str],
    num_seg_tokens: list[int] | None = None,
    samples: int = 2000,
    steps: int = 1600,
    out_dir: str | Path | None = None,
) -> dict[str, VariantResult]:
    """Train and score a set of ablation variants on one synthetic seed.

    num_seg_tokens entries add runs named "cap<k>" that sweep the
    referent cap used to build training prompts.
    """
    dataset, images = synth_generate(default_trend_synth(seed, samples))
    base = ToyConfig(seed=seed)
    tcfg = default_trend_train(seed, steps)
    results: dict[str, VariantResult] = {}
    for name in variants:
        results[name] = run_variant(name, dataset, images, base, tcfg)
    for cap in num_seg_tokens or []:
        config = dataclasses.replace(base, max_targets=cap)
        state = init_model(config)
        train_model(state, dataset, images, tcfg)
        records, _ = run_inference(state, dataset, images, "val")
        report = evaluate_gres(records, dataset, "val", EmptyPolicy("explicit"))
        multi = [r for r in split_refs(dataset, "val") if dataset.refs[r].is_multi_target]
        multi_report = evaluate_gres(records, dataset, "val", EmptyPolicy("explicit"), ref_ids=multi)
        results[f"cap{cap}"] = VariantResult(f"cap{cap}", report, multi_report, state)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary = {
            name: {
                "gIoU": res.report.gIoU,
                "cIoU": res.report.cIoU,
                "N_acc": res.report.N_acc,
                "multi_gIoU": res.multi_target_report.gIoU,
            }
            for name, res in results.items()
        }
        (out / f"trends_seed{seed}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        for name, res in results.items():
            save_checkpoint(out / f"{name}_seed{seed}.ckpt", res.state)
    return results
