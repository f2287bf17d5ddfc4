"""Command-line interface.

Sub-commands cover the full pipeline: synth, train, infer, eval,
overlay, gradcheck, and ablate. Every run writes its fully resolved
config next to its outputs, and all randomness flows from --seed.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from PIL import Image

from .dataset import load_dataset
from .errors import DivergenceError, ValidationError
from .experiments import (
    load_dataset_dir,
    run_trend_suite,
    write_dataset_dir,
    write_predictions,
    write_report,
)
from .infer import run_inference
from .losses import LossWeights
from .metrics import EmptyPolicy, evaluate_gres, evaluate_rec, evaluate_refzom, format_report_table, load_predictions
from .model import ToyConfig, init_model
from .overlay import compose_overlay
from .protocol import Decision
from .synth import SynthConfig, synth_generate
from .train import (
    ImageCache,
    TrainConfig,
    build_prompt_items,
    gradient_check,
    load_checkpoint,
    prepare_sample,
    save_checkpoint,
    train_model,
)

logger = logging.getLogger("greskit")


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc


def _write_resolved(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_synth(args: argparse.Namespace) -> int:
    overrides = _load_config_file(args.config)
    for key, val in (
        ("samples", args.samples),
        ("image_size", args.image_size),
        ("seed", args.seed),
        ("empty_target_prob", args.empty_prob),
        ("multi_target_prob", args.multi_prob),
    ):
        if val is not None:
            overrides[key] = val
    cfg = SynthConfig.from_json(overrides) if overrides else SynthConfig()
    dataset, images = synth_generate(cfg)
    out = Path(args.out)
    write_dataset_dir(out, dataset, images, cfg)
    _write_resolved(out, {"command": "synth", "synth": cfg.to_json()})
    logger.info("wrote %d samples to %s", cfg.samples, out)
    return 0


def _toy_config_from_args(args: argparse.Namespace, overrides: dict) -> ToyConfig:
    for key, val in (
        ("seed", args.seed),
        ("max_targets", args.num_seg_tokens),
        ("multi_seg", args.multi_seg),
        ("use_rej", args.use_rej),
        ("prefix_expressions", args.prefix),
        ("share_seg_embedding", args.share_seg),
        ("template", args.template),
    ):
        if val is not None:
            overrides[key] = val
    return ToyConfig.from_json(overrides) if overrides else ToyConfig()


def cmd_train(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    toy = _toy_config_from_args(args, dict(file_cfg.get("model", {})))
    tdict = dict(file_cfg.get("train", {}))
    for key, val in (
        ("steps", args.steps),
        ("batch_size", args.batch_size),
        ("lr", args.lr),
        ("optimizer", args.optimizer),
        ("seed", args.seed),
    ):
        if val is not None:
            tdict[key] = val
    tcfg = TrainConfig.from_json(tdict) if tdict else TrainConfig()
    dataset, images = load_dataset_dir(args.dataset)
    state = init_model(toy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = train_model(state, dataset, images, tcfg, split=args.split)
    save_checkpoint(out / "checkpoint.ckpt", state)
    with open(out / "train_log.jsonl", "w") as fh:
        for i, breakdown in enumerate(log):
            fh.write(json.dumps({"step": i, **breakdown.to_json()}) + "\n")
    _write_resolved(out, {"command": "train", "model": toy.to_json(), "train": tcfg.to_json()})
    if log:
        logger.info("final loss %.4f after %d steps", log[-1].total, len(log))
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset, images = load_dataset_dir(args.dataset)
    records, stats = run_inference(state, dataset, images, args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, records)
    _write_resolved(out.parent, {
        "command": "infer",
        "split": args.split,
        "model": state.config.to_json(),
        "stats": stats.to_json(),
    })
    logger.info("wrote %d predictions to %s", len(records), out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = _load_dataset_arg(args.dataset)
    policy = EmptyPolicy.parse(args.policy)
    if args.suite == "gres":
        report = evaluate_gres(args.predictions, dataset, args.split, policy,
                               include_per_ref=args.per_ref, jobs=args.jobs)
    elif args.suite == "refzom":
        report = evaluate_refzom(args.predictions, dataset, args.split,
                                 include_per_ref=args.per_ref, jobs=args.jobs)
    elif args.suite == "rec":
        report = evaluate_rec(args.predictions, dataset, args.split,
                              include_per_ref=args.per_ref, jobs=args.jobs)
    else:
        raise ValidationError(f"unknown suite {args.suite!r}")
    print(format_report_table(report))
    if args.out:
        write_report(args.out, report)
    return 0


def _load_dataset_arg(path: str):
    """Accept a dataset directory or a bare dataset.json path."""
    root = Path(path)
    return load_dataset(root / "dataset.json" if root.is_dir() else root)


def cmd_overlay(args: argparse.Namespace) -> int:
    dataset, images = load_dataset_dir(args.dataset)
    preds = load_predictions(args.predictions, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for rid in sorted(preds):
        pred = preds[rid]
        ref = dataset.refs[rid]
        img_entry = dataset.images[ref.image_id]
        image = images[ref.image_id]
        if pred.decision is Decision.REJ:
            canvas = compose_overlay(image, [], rejected=True)
        else:
            mask = pred.effective_mask(img_entry.height, img_entry.width)
            canvas = compose_overlay(image, [mask], rejected=False)
        Image.fromarray(canvas, mode="RGB").save(out / f"ref_{rid:06d}.png")
        count += 1
    logger.info("wrote %d overlays to %s", count, out)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    toy = _toy_config_from_args(args, {})
    synth_cfg = SynthConfig(samples=8, seed=toy.seed)
    dataset, images = synth_generate(synth_cfg)
    state = init_model(toy)
    items = build_prompt_items(dataset, toy, "train") or build_prompt_items(dataset, toy, "val")
    samples = [prepare_sample(i, state) for i in items[:3]]
    cache = ImageCache(toy, {s.image_id: images[s.image_id] for s in samples})
    err = gradient_check(state, samples, cache, LossWeights(), epsilon=args.epsilon, seed=toy.seed)
    passed = err < args.tolerance
    print(f"gradient check: max relative error {err:.3e} "
          f"({'PASS' if passed else 'FAIL'} at {args.tolerance:.0e})")
    return 0 if passed else 3


def cmd_ablate(args: argparse.Namespace) -> int:
    variants = args.variants.split(",") if args.variants else ["full", "no-rej", "single-seg"]
    caps = [int(c) for c in args.num_seg_sweep.split(",")] if args.num_seg_sweep else []
    results = run_trend_suite(
        seed=args.seed if args.seed is not None else 1,
        variants=variants,
        num_seg_tokens=caps,
        samples=args.samples,
        steps=args.steps if args.steps is not None else 1600,
        out_dir=args.out,
    )
    for name, res in sorted(results.items()):
        n_acc = "-" if res.report.N_acc is None else f"{100 * res.report.N_acc:6.2f}"
        print(
            f"{name:>12s}  gIoU {100 * res.report.gIoU:6.2f}  cIoU {100 * res.report.cIoU:6.2f}  "
            f"N-acc {n_acc}  multi-gIoU {100 * res.multi_target_report.gIoU:6.2f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="greskit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--config", help="JSON file with SynthConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--empty-prob", type=float, dest="empty_prob")
    p.add_argument("--multi-prob", type=float, dest="multi_prob")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the toy model on a dataset directory")
    p.add_argument("--config", help="JSON file with {model: ..., train: ...}")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adamw"))
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write predictions for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a split")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--suite", choices=("gres", "refzom", "rec"), default="gres")
    p.add_argument("--policy", default="explicit", help="explicit | pixel:<N>")
    p.add_argument("--per-ref", action="store_true", dest="per_ref")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", help="render prediction overlays")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    _add_model_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score protocol ablations")
    p.add_argument("--variants", help="comma list from: full,no-rej,single-seg,no-prefix,no-share")
    p.add_argument("--num-seg-sweep", dest="num_seg_sweep", help="comma list of referent caps")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    return parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--num-seg-tokens", type=int, dest="num_seg_tokens")
    p.add_argument("--multi-seg", type=_parse_bool, dest="multi_seg")
    p.add_argument("--use-rej", type=_parse_bool, dest="use_rej")
    p.add_argument("--prefix", type=_parse_bool)
    p.add_argument("--share-seg", type=_parse_bool, dest="share_seg")
    p.add_argument("--template", choices=("what", "where", "show", "outline", "segment"))


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("GRESKIT_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
