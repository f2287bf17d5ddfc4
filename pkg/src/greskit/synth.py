"""Synthetic shape benchmark for generalized referring segmentation.

Each sample is one rendered image plus one ref whose expression follows a
compositional grammar: "<color> <shape> [at <position>]", with "and"
joining the parts of multi-object referents. Empty-target refs name a
color/shape combination absent from the image, so rejecting them requires
binding both attributes rather than spotting a missing word.

Generation is a pure function of the config: every sample draws from its
own generator seeded by (seed, sample index), so parallel generation and
reruns produce identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .dataset import Dataset, ImageEntry, ObjectAnnotation, ReferringSample
from .errors import ConfigError
from .masks import encode_rle

PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (220, 60, 60),
    "green": (70, 190, 80),
    "blue": (70, 110, 220),
    "yellow": (230, 220, 70),
    "purple": (160, 70, 200),
    "orange": (240, 150, 50),
}

SHAPE_KINDS = ("circle", "square", "triangle")

# Placement cells on a 3x3 grid; corners plus center keep shapes apart.
_CELLS = {
    "top left": (0, 0),
    "top right": (0, 2),
    "bottom left": (2, 0),
    "bottom right": (2, 2),
    "center": (1, 1),
}

BACKGROUND = (40, 40, 40)

GRAMMAR_WORDS = tuple(
    sorted(set(PALETTE) | set(SHAPE_KINDS) | {"at", "and", "top", "bottom", "left", "right", "center"})
)

_SPLIT_EDGES = ((0.70, "train"), (0.85, "val"), (0.925, "testA"), (1.01, "testB"))


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    samples: int = 200
    shapes: tuple[str, ...] = SHAPE_KINDS
    colors: tuple[str, ...] = tuple(PALETTE)
    max_shapes: int = 3
    empty_target_prob: float = 0.25
    multi_target_prob: float = 0.5
    position_prob: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        if self.samples < 1:
            raise ConfigError("samples must be positive")
        if not self.shapes or any(s not in SHAPE_KINDS for s in self.shapes):
            raise ConfigError(f"shapes must be a non-empty subset of {SHAPE_KINDS}")
        if not self.colors or any(c not in PALETTE for c in self.colors):
            raise ConfigError(f"colors must be a non-empty subset of {tuple(PALETTE)}")
        if self.max_shapes < 1:
            raise ConfigError("max_shapes must be at least 1")
        if self.max_shapes > len(_CELLS):
            raise ConfigError(f"max_shapes cannot exceed {len(_CELLS)} placement cells")
        for name in ("empty_target_prob", "multi_target_prob", "position_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if len(self.shapes) * len(self.colors) <= self.max_shapes:
            raise ConfigError("too few color/shape combinations to ever leave one absent")

    def to_json(self) -> dict:
        return {
            "image_size": self.image_size,
            "samples": self.samples,
            "shapes": list(self.shapes),
            "colors": list(self.colors),
            "max_shapes": self.max_shapes,
            "empty_target_prob": self.empty_target_prob,
            "multi_target_prob": self.multi_target_prob,
            "position_prob": self.position_prob,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        kwargs = dict(obj)
        for key in ("shapes", "colors"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class PlacedShape:
    color: str
    kind: str
    position: str
    mask: np.ndarray = field(repr=False, compare=False)


def rasterize_shape(kind: str, cx: float, cy: float, radius: float, size: int) -> np.ndarray:
    """Hard-edged rasterization: a pixel is foreground iff its center is inside."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5
    py = ys + 0.5
    if kind == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= radius**2
    if kind == "square":
        return (np.abs(px - cx) <= radius) & (np.abs(py - cy) <= radius)
    if kind == "triangle":
        top = cy - radius
        return (py >= top) & (py <= cy + radius) & (np.abs(px - cx) <= (py - top) / 2.0)
    raise ConfigError(f"unknown shape kind {kind!r}")


def split_expression(expression: str) -> list[str]:
    """Break a conjunctive expression into its referent parts."""
    parts = [p.strip() for p in expression.split(" and ")]
    return [p for p in parts if p] or [expression]


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def _place_shapes(rng: np.random.Generator, cfg: SynthConfig, n: int) -> list[PlacedShape]:
    combos = [(c, s) for c in cfg.colors for s in cfg.shapes]
    picked = rng.choice(len(combos), size=n, replace=False)
    cells = rng.choice(len(_CELLS), size=n, replace=False)
    cell_names = list(_CELLS)
    cell_span = cfg.image_size / 3.0
    shapes = []
    for combo_idx, cell_idx in zip(picked, cells):
        color, kind = combos[combo_idx]
        name = cell_names[cell_idx]
        row, col = _CELLS[name]
        base_r = cell_span * 0.36
        radius = float(base_r + rng.uniform(0.0, cell_span * 0.14))
        cx = (col + 0.5) * cell_span + float(rng.uniform(-2.0, 2.0))
        cy = (row + 0.5) * cell_span + float(rng.uniform(-2.0, 2.0))
        mask = rasterize_shape(kind, cx, cy, radius, cfg.image_size)
        shapes.append(PlacedShape(color, kind, name, mask))
    return shapes


def _render(shapes: list[PlacedShape], size: int) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for s in shapes:
        img[s.mask] = PALETTE[s.color]
    return img


def _referent_text(shape: PlacedShape, rng: np.random.Generator, position_prob: float) -> str:
    text = f"{shape.color} {shape.kind}"
    if rng.random() < position_prob:
        text += f" at {shape.position}"
    return text


def _absent_combo(rng: np.random.Generator, cfg: SynthConfig, shapes: list[PlacedShape]) -> tuple[str, str]:
    present = {(s.color, s.kind) for s in shapes}
    absent = [(c, s) for c in cfg.colors for s in cfg.shapes if (c, s) not in present]
    colors_present = {s.color for s in shapes}
    kinds_present = {s.kind for s in shapes}
    # Prefer hard negatives whose color and shape both appear in the image
    # (just never together): rejecting them takes attribute binding.
    hard = [(c, s) for c, s in absent if c in colors_present and s in kinds_present]
    pool = hard if hard and rng.random() < 0.7 else absent
    return pool[int(rng.integers(len(pool)))]


def generate_sample(cfg: SynthConfig, index: int) -> tuple[np.ndarray, list[PlacedShape], str, list[int], str]:
    """One (image, shapes, expression, target shape indices, split) draw."""
    rng = sample_rng(cfg.seed, index)
    n_shapes = int(rng.integers(1, cfg.max_shapes + 1))
    shapes = _place_shapes(rng, cfg, n_shapes)
    image = _render(shapes, cfg.image_size)

    u_split = rng.random()
    split = next(name for edge, name in _SPLIT_EDGES if u_split < edge)

    if rng.random() < cfg.empty_target_prob:
        color, kind = _absent_combo(rng, cfg, shapes)
        return image, shapes, f"{color} {kind}", [], split

    if n_shapes >= 2 and rng.random() < cfg.multi_target_prob:
        k = int(rng.integers(2, n_shapes + 1))
        order = rng.permutation(n_shapes)[:k]
        parts = [_referent_text(shapes[i], rng, cfg.position_prob) for i in order]
        return image, shapes, " and ".join(parts), [int(i) for i in order], split

    i = int(rng.integers(n_shapes))
    return image, shapes, _referent_text(shapes[i], rng, cfg.position_prob), [i], split


def synth_generate(cfg: SynthConfig) -> tuple[Dataset, dict[int, np.ndarray]]:
    """Build the full synthetic dataset plus rendered images keyed by image id."""
    images: dict[int, ImageEntry] = {}
    annotations: dict[int, ObjectAnnotation] = {}
    refs: dict[int, ReferringSample] = {}
    rendered: dict[int, np.ndarray] = {}
    next_ann = 0
    for idx in range(cfg.samples):
        image, shapes, expression, targets, split = generate_sample(cfg, idx)
        images[idx] = ImageEntry(idx, f"{idx:06d}.png", cfg.image_size, cfg.image_size)
        rendered[idx] = image
        ann_ids = []
        for shape_idx in targets:
            annotations[next_ann] = ObjectAnnotation(next_ann, idx, encode_rle(shapes[shape_idx].mask))
            ann_ids.append(next_ann)
            next_ann += 1
        refs[idx] = ReferringSample(idx, idx, expression, tuple(ann_ids), split)
    return Dataset(images, annotations, refs), rendered


def iter_vocab_words() -> Iterator[str]:
    """Every word the grammar and question templates can emit."""
    yield from GRAMMAR_WORDS
    yield from (
        "what",
        "where",
        "show",
        "outline",
        "please",
        "segment",
        "is",
        "are",
        "me",
        "in",
        "this",
        "the",
        "image",
        "with",
        "output",
        "mask",
        "masks",
        "segmentation",
        "sure",
        "it",
    )
