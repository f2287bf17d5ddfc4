"""Desk-scale differentiable segmentation assistant.

Two image encoders feed the pipeline, mirroring the full-scale design: a
patch embedder aligns the image with the token stream of a small causal
decoder, and an independent feature encoder serves the mask decoder. The
decoder's extended vocabulary carries the segmentation/rejection tokens;
hidden states at segmentation-token positions are projected into query
space and dotted against the segmentation features to produce one mask
logit map per query, bilinearly upsampled to image resolution.

Sequences are processed right-padded in batches. Causal attention makes
padding exact rather than approximate: a row before a sample's true
length can only attend to columns at or before itself, which are all
real tokens, so batched logits equal the single-sequence ones.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ValidationError
from .protocol import Vocab
from .synth import iter_vocab_words


@dataclass(frozen=True)
class ToyConfig:
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 64
    decoder_layers: int = 2
    heads: int = 2
    seg_grid: int = 16
    seg_channels: int = 32
    seg_hidden: int = 64
    mlp_ratio: int = 4
    max_seq_len: int = 256
    max_targets: int = 5
    multi_seg: bool = True
    use_rej: bool = True
    prefix_expressions: bool = True
    share_seg_embedding: bool = True
    template: str = "what"
    vocab_words: tuple[str, ...] = tuple(iter_vocab_words())
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.d_model % self.heads != 0:
            raise ConfigError("d_model must be divisible by heads")
        if self.image_size % self.seg_grid != 0:
            raise ConfigError("image_size must be divisible by seg_grid")
        if not 1 <= self.max_targets <= 10:
            raise ConfigError("max_targets must be within 1..10")

    @property
    def n_img(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def seg_patch(self) -> int:
        return self.image_size // self.seg_grid

    @property
    def seg_patch_dim(self) -> int:
        return self.seg_patch * self.seg_patch * 3

    def to_json(self) -> dict:
        out = {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "d_model": self.d_model,
            "decoder_layers": self.decoder_layers,
            "heads": self.heads,
            "seg_grid": self.seg_grid,
            "seg_channels": self.seg_channels,
            "seg_hidden": self.seg_hidden,
            "mlp_ratio": self.mlp_ratio,
            "max_seq_len": self.max_seq_len,
            "max_targets": self.max_targets,
            "multi_seg": self.multi_seg,
            "use_rej": self.use_rej,
            "prefix_expressions": self.prefix_expressions,
            "share_seg_embedding": self.share_seg_embedding,
            "template": self.template,
            "vocab_words": list(self.vocab_words),
            "seed": self.seed,
        }
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ToyConfig":
        kwargs = dict(obj)
        if "vocab_words" in kwargs:
            kwargs["vocab_words"] = tuple(kwargs["vocab_words"])
        return cls(**kwargs)


class ModelState:
    """Named parameter tensors plus the vocabulary they index."""

    def __init__(self, config: ToyConfig, vocab: Vocab, params: dict[str, Tensor]):
        self.config = config
        self.vocab = vocab
        self.params = params

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def n_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in self.params:
            digest.update(name.encode())
            digest.update(self.params[name].data.tobytes())
        return digest.hexdigest()


def init_model(config: ToyConfig) -> ModelState:
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xC0FFEE)))
    vocab = Vocab(config.vocab_words)
    d, c = config.d_model, config.seg_channels

    def normal(shape, scale=0.02):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params: dict[str, Tensor] = {
        "patch_embed.w": normal((config.patch_dim, d)),
        "patch_embed.b": zeros((d,)),
        "pos_emb": normal((config.max_seq_len, d), scale=0.01),
        "tok_emb": normal((len(vocab), d)),
        "ln_f.g": ones((d,)),
        "ln_f.b": zeros((d,)),
        "head.w": normal((d, len(vocab))),
        "head.b": zeros((len(vocab),)),
        "seg_enc.w1": normal((config.seg_patch_dim, config.seg_hidden)),
        "seg_enc.b1": zeros((config.seg_hidden,)),
        "seg_enc.w2": normal((config.seg_hidden, c)),
        "seg_enc.b2": zeros((c,)),
        "seg_enc.pos": normal((config.seg_grid**2, c)),
        "psi.w1": normal((d, d)),
        "psi.b1": zeros((d,)),
        "psi.w2": normal((d, c)),
        "psi.b2": zeros((c,)),
        "mask_temp": Tensor(np.array(1.0 / np.sqrt(c)), requires_grad=True),
    }
    hidden = d * config.mlp_ratio
    for i in range(config.decoder_layers):
        p = f"layer{i}."
        params[p + "ln1.g"] = ones((d,))
        params[p + "ln1.b"] = zeros((d,))
        params[p + "attn.wq"] = normal((d, d))
        params[p + "attn.bq"] = zeros((d,))
        params[p + "attn.wk"] = normal((d, d))
        params[p + "attn.bk"] = zeros((d,))
        params[p + "attn.wv"] = normal((d, d))
        params[p + "attn.bv"] = zeros((d,))
        params[p + "attn.wo"] = normal((d, d))
        params[p + "attn.bo"] = zeros((d,))
        params[p + "ln2.g"] = ones((d,))
        params[p + "ln2.b"] = zeros((d,))
        params[p + "mlp.w1"] = normal((d, hidden))
        params[p + "mlp.b1"] = zeros((hidden,))
        params[p + "mlp.w2"] = normal((hidden, d))
        params[p + "mlp.b2"] = zeros((d,))
    return ModelState(config, vocab, params)


def normalize_image(image: np.ndarray, config: ToyConfig) -> np.ndarray:
    img = np.asarray(image)
    expected = (config.image_size, config.image_size, 3)
    if img.shape != expected:
        raise ValidationError(f"image shape {img.shape} does not match configured {expected}")
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    return img - 0.5


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, 3) -> (n_patches, patch*patch*3), row-major patch order."""
    h, w, _ = image.shape
    gh, gw = h // patch, w // patch
    x = image.reshape(gh, patch, gw, patch, 3)
    return x.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * 3)


@lru_cache(maxsize=32)
def _causal_bias(seq_len: int) -> np.ndarray:
    bias = np.zeros((seq_len, seq_len))
    bias[np.triu_indices(seq_len, k=1)] = -1e9
    return bias


@lru_cache(maxsize=8)
def _interp_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Bilinear interpolation weights under the half-pixel-center convention."""
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        src = (i + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        lo = min(max(i0, 0), in_size - 1)
        hi = min(max(i0 + 1, 0), in_size - 1)
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def _layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return ad.layer_norm(x, g, b)


def encode_images_batch(
    state: ModelState, patch_stack: np.ndarray, seg_stack: np.ndarray | None
) -> tuple[Tensor, Tensor | None]:
    """Patch stacks -> (visual tokens (B, n_img, d), seg features (B, g*g, C)).

    Passing seg_stack=None skips the segmentation encoder (generation only
    needs the language-side tokens).
    """
    p = state.params
    visual = ad.matmul(Tensor(patch_stack), p["patch_embed.w"]) + p["patch_embed.b"]
    if seg_stack is None:
        return visual, None
    h = ad.tanh(ad.matmul(Tensor(seg_stack), p["seg_enc.w1"]) + p["seg_enc.b1"])
    feats = ad.matmul(h, p["seg_enc.w2"]) + p["seg_enc.b2"] + p["seg_enc.pos"]
    return visual, feats


def encode_image(state: ModelState, image: np.ndarray) -> tuple[Tensor, Tensor]:
    """Single image -> (visual tokens (n_img, d), seg features (g*g, C))."""
    cfg = state.config
    img = normalize_image(image, cfg)
    patches = patchify(img, cfg.patch_size)[None]
    seg_patches = patchify(img, cfg.seg_patch)[None]
    visual, feats = encode_images_batch(state, patches, seg_patches)
    return visual[0], feats[0]


def _decoder_stack(state: ModelState, x: Tensor) -> Tensor:
    cfg = state.config
    p = state.params
    seq_len = x.shape[1]
    bias = _causal_bias(seq_len)
    dh = cfg.d_model // cfg.heads
    inv_sqrt = 1.0 / np.sqrt(dh)
    for i in range(cfg.decoder_layers):
        pre = f"layer{i}."
        h = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = ad.matmul(h, p[pre + "attn.wq"]) + p[pre + "attn.bq"]
        k = ad.matmul(h, p[pre + "attn.wk"]) + p[pre + "attn.bk"]
        v = ad.matmul(h, p[pre + "attn.wv"]) + p[pre + "attn.bv"]
        head_outs = []
        for j in range(cfg.heads):
            cols = slice(j * dh, (j + 1) * dh)
            qj = q[:, :, cols]
            kj = k[:, :, cols]
            vj = v[:, :, cols]
            scores = ad.matmul(qj, ad.transpose(kj, (0, 2, 1))) * inv_sqrt + bias
            attn = ad.softmax(scores, axis=-1)
            head_outs.append(ad.matmul(attn, vj))
        merged = ad.concat(head_outs, axis=2)
        x = x + ad.matmul(merged, p[pre + "attn.wo"]) + p[pre + "attn.bo"]
        h2 = _layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        m = ad.tanh(ad.matmul(h2, p[pre + "mlp.w1"]) + p[pre + "mlp.b1"])
        x = x + ad.matmul(m, p[pre + "mlp.w2"]) + p[pre + "mlp.b2"]
    return _layer_norm(x, p["ln_f.g"], p["ln_f.b"])


def splice_batch(state: ModelState, visual: Tensor, ids: np.ndarray) -> Tensor:
    """Replace the placeholder column with visual tokens and add positions.

    Every sequence must carry the placeholder at index 1 ([bos], image,
    text...), which lets the whole batch share one splice.
    """
    cfg = state.config
    p = state.params
    placeholder = state.vocab.special.image_placeholder_id
    if ids.ndim != 2:
        raise ValidationError("token ids must be (batch, length)")
    counts = (ids == placeholder).sum(axis=1)
    if not np.all(counts == 1) or not np.all(ids[:, 1] == placeholder):
        raise ValidationError("each sequence needs exactly one image placeholder, at index 1")
    spliced_len = ids.shape[1] - 1 + cfg.n_img
    if spliced_len > cfg.max_seq_len:
        raise ValidationError(f"spliced length {spliced_len} exceeds max_seq_len {cfg.max_seq_len}")
    tok = p["tok_emb"][(ids,)]
    x = ad.concat([tok[:, :1], visual, tok[:, 2:]], axis=1)
    return x + p["pos_emb"][: x.shape[1]]


def spliced_position(token_index: int, n_img: int) -> int:
    """Map an index in the raw token sequence to its post-splice position."""
    if token_index == 1:
        raise ValueError("the placeholder spans many positions")
    return token_index if token_index < 1 else token_index + n_img - 1


def forward_batch(state: ModelState, visual: Tensor, ids: np.ndarray) -> Tensor:
    """Hidden states (B, S, d) for right-padded id rows; logits left to callers."""
    return _decoder_stack(state, splice_batch(state, visual, ids))


def logits_at(state: ModelState, hidden_rows: Tensor) -> Tensor:
    return ad.matmul(hidden_rows, state.params["head.w"]) + state.params["head.b"]


def forward(state: ModelState, image: np.ndarray, token_ids) -> tuple[Tensor, Tensor]:
    """Full vocabulary logits and hidden states for one sequence."""
    cfg = state.config
    ids = np.asarray(token_ids, dtype=np.int64)[None]
    img = normalize_image(image, cfg)
    visual, _ = encode_images_batch(state, patchify(img, cfg.patch_size)[None], None)
    hidden = forward_batch(state, visual, ids)[0]
    return logits_at(state, hidden), hidden


def extract_queries(hidden: Tensor, seg_positions, state: ModelState) -> Tensor:
    """Project hidden rows at segmentation-token positions into query space."""
    positions = np.asarray(seg_positions, dtype=np.int64)
    if positions.size and (positions.min() < 0 or positions.max() >= hidden.shape[0]):
        raise ValidationError(f"positions {positions} out of range for length {hidden.shape[0]}")
    rows = hidden[(positions,)]
    return apply_query_projector(state, rows)


def apply_query_projector(state: ModelState, rows: Tensor) -> Tensor:
    p = state.params
    h = ad.tanh(ad.matmul(rows, p["psi.w1"]) + p["psi.b1"])
    return ad.matmul(h, p["psi.w2"]) + p["psi.b2"]


def decode_masks(queries: Tensor, seg_features: Tensor, state: ModelState) -> Tensor:
    """Scaled dot-product mask logits, upsampled to image resolution.

    queries: (N, C); seg_features: (g*g, C); result (N, H, W).
    """
    cfg = state.config
    n = queries.shape[0]
    if n == 0:
        return Tensor(np.zeros((0, cfg.image_size, cfg.image_size)))
    if queries.shape[1] != seg_features.shape[1]:
        raise ValidationError(
            f"query channels {queries.shape[1]} != feature channels {seg_features.shape[1]}"
        )
    small = ad.matmul(queries, seg_features.T) * state.params["mask_temp"]
    return upsample_mask_logits(small.reshape(n, cfg.seg_grid, cfg.seg_grid), cfg)


def decode_masks_grouped(queries: Tensor, seg_features: Tensor, owners: np.ndarray, state: ModelState) -> Tensor:
    """Batched decode where query i reads the feature map of sample owners[i].

    queries: (M, C); seg_features: (B, g*g, C); result (M, H, W).
    """
    cfg = state.config
    m = queries.shape[0]
    feats = seg_features[(owners,)]
    q = queries.reshape(m, 1, queries.shape[1])
    small = ad.matmul(q, ad.transpose(feats, (0, 2, 1))) * state.params["mask_temp"]
    return upsample_mask_logits(small.reshape(m, cfg.seg_grid, cfg.seg_grid), cfg)


def upsample_mask_logits(small: Tensor, cfg: ToyConfig) -> Tensor:
    rows = _interp_matrix(cfg.image_size, cfg.seg_grid)
    up = ad.matmul(Tensor(rows), small)  # (N, H, g) by broadcasting over N
    return ad.matmul(up, Tensor(rows.T))


def generate(state: ModelState, image: np.ndarray, question_tokens, max_len: int = 48) -> list[int]:
    """Greedy continuation of one prompt; stops at the end-of-sequence token."""
    out = generate_batch(state, [np.asarray(image)], [list(question_tokens)], max_len=max_len)
    return out[0]


def generate_batch(
    state: ModelState,
    images: list[np.ndarray],
    prompts: list[list[int]],
    max_len: int = 48,
) -> list[list[int]]:
    """Greedy decoding over right-padded prompt rows; returns continuations only."""
    cfg = state.config
    vocab = state.vocab
    batch = len(prompts)
    if batch == 0:
        return []
    if len(images) != batch:
        raise ValidationError("one image per prompt required")
    lengths = np.array([len(p) for p in prompts], dtype=np.int64)
    width = int(lengths.max()) + max_len
    ids = np.full((batch, width), vocab.special.pad_id, dtype=np.int64)
    for b, prompt in enumerate(prompts):
        ids[b, : len(prompt)] = prompt
    patch_stack = np.stack([patchify(normalize_image(img, cfg), cfg.patch_size) for img in images])
    done = np.zeros(batch, dtype=bool)
    generated: list[list[int]] = [[] for _ in range(batch)]
    # Structural input tokens must never be emitted; a stray placeholder
    # would corrupt the splice on the next step.
    banned = [vocab.special.pad_id, vocab.special.bos_id, vocab.special.image_placeholder_id]
    with ad.no_grad():
        visual, _ = encode_images_batch(state, patch_stack, None)
        cursor = lengths.copy()
        for _ in range(max_len):
            cur = int(cursor.max())
            hidden = forward_batch(state, visual, ids[:, :cur])
            n_img = cfg.n_img
            last_rows = hidden[(np.arange(batch), cursor + n_img - 2)]
            logits = logits_at(state, last_rows)
            scores = logits.data.copy()
            scores[:, banned] = -np.inf
            nxt = np.argmax(scores, axis=1)
            for b in range(batch):
                if done[b]:
                    continue
                token = int(nxt[b])
                generated[b].append(token)
                ids[b, cursor[b]] = token
                cursor[b] += 1
                if token == vocab.special.eos_id:
                    done[b] = True
            if done.all():
                break
    return generated
