"""Question/answer token protocol for segmentation prompting.

Answers carry one special token per referent: a segmentation token whose
output embedding becomes a mask-decoder query, or a rejection token that
marks the referent absent and receives an all-zero mask without any
decoding. Each referent's text is prepended before its token
("sure, {obj}:[SEG], ...") so the token binds to its target; parsing
recovers the text through the colon delimiter.

Parsing is total: malformed model output degrades to entries with empty
referent text plus diagnostics, never an exception, because evaluation
must score whatever the model emits.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import ProtocolError, ValidationError

SEG_TOKEN = "[SEG]"
REJ_TOKEN = "[REJ]"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
PAD_TOKEN = "<pad>"
IMAGE_TOKEN = "<image>"
UNK_TOKEN = "<unk>"

SEG_BANK_SIZE = 8  # indexed [SEG000]..[SEG007] for the unshared-embedding variant

# Delimiters that structure answers; referent text containing them is
# escaped at build time and unescaped during parsing.
_DELIMITERS = ",:.?"
_WORD_RE = re.compile(r"(?:\\.|[^\s,:.?\\])+|[,:.?]")

# Referents per prompt: the protocol default; sweepable 1..10.
DEFAULT_MAX_REFERENTS = 5

QUESTION_TEMPLATES = ("what", "where", "show", "outline", "segment")


class Decision(Enum):
    SEG = "seg"
    REJ = "rej"


@dataclass(frozen=True)
class SpecialVocab:
    """Token ids set aside from the word vocabulary."""

    seg_id: int
    rej_id: int
    bos_id: int
    eos_id: int
    pad_id: int
    image_placeholder_id: int
    seg_bank: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        ids = [self.seg_id, self.rej_id, self.bos_id, self.eos_id, self.pad_id, self.image_placeholder_id]
        ids.extend(self.seg_bank)
        if len(set(ids)) != len(ids):
            raise ValidationError("special token ids must be distinct")

    def is_seg(self, token_id: int) -> bool:
        return token_id == self.seg_id or token_id in self.seg_bank

    def is_special(self, token_id: int) -> bool:
        return self.is_seg(token_id) or token_id in (
            self.rej_id,
            self.bos_id,
            self.eos_id,
            self.pad_id,
            self.image_placeholder_id,
        )


class Vocab:
    """Word-level vocabulary with the protocol's special tokens.

    Layout is fixed given the word list, so checkpoints and datasets
    built from the same grammar always agree on ids.
    """

    def __init__(self, words: Sequence[str]):
        specials = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, IMAGE_TOKEN, SEG_TOKEN, REJ_TOKEN]
        specials += [f"[SEG{i:03d}]" for i in range(SEG_BANK_SIZE)]
        specials += [UNK_TOKEN] + list(_DELIMITERS)
        seen = dict.fromkeys(specials)
        for w in words:
            if not w or any(ch.isspace() for ch in w):
                raise ValidationError(f"invalid vocabulary word: {w!r}")
            seen.setdefault(w, None)
        self.tokens: tuple[str, ...] = tuple(seen)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        bank = tuple(self.index[f"[SEG{i:03d}]"] for i in range(SEG_BANK_SIZE))
        self.special = SpecialVocab(
            seg_id=self.index[SEG_TOKEN],
            rej_id=self.index[REJ_TOKEN],
            bos_id=self.index[BOS_TOKEN],
            eos_id=self.index[EOS_TOKEN],
            pad_id=self.index[PAD_TOKEN],
            image_placeholder_id=self.index[IMAGE_TOKEN],
            seg_bank=bank,
        )
        self.unk_id = self.index[UNK_TOKEN]
        self.colon_id = self.index[":"]
        self.comma_id = self.index[","]
        self.period_id = self.index["."]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> tuple[str, ...]:
        skip = 6 + SEG_BANK_SIZE + 1 + len(_DELIMITERS)
        return self.tokens[skip:]

    def encode_text(self, text: str) -> list[int]:
        return [self.index.get(tok, self.unk_id) for tok in _WORD_RE.findall(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def seg_token_id(self, referent_index: int, shared: bool = True) -> int:
        if shared:
            return self.special.seg_id
        return self.special.seg_bank[referent_index % SEG_BANK_SIZE]


@dataclass(frozen=True)
class PromptPlan:
    referents: tuple[str, ...]
    template: str = "what"

    def __post_init__(self) -> None:
        if not self.referents:
            raise ValidationError("a prompt needs at least one referent")
        if self.template not in QUESTION_TEMPLATES:
            raise ValidationError(f"unknown question template {self.template!r}")


@dataclass(frozen=True)
class ParseEntry:
    referent_text: str
    decision: Decision
    token_position: int


@dataclass
class ResponseParse:
    entries: list[ParseEntry] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)

    def seg_count(self) -> int:
        return len([e for e in self.entries if e.decision is Decision.SEG])


def escape_referent(text: str) -> str:
    text = text.replace("\\", "\\\\")
    for ch in _DELIMITERS:
        text = text.replace(ch, "\\" + ch)
    return text


def unescape_referent(text: str) -> str:
    return re.sub(r"\\(.)", r"\1", text)


def build_question(plan: PromptPlan) -> str:
    """Render the question for a prompt plan as plain text."""
    joined = ", ".join(escape_referent(r) for r in plan.referents)
    single = len(plan.referents) == 1
    if plan.template == "what":
        if single:
            return f"What is {joined} in this image? Please output segmentation mask."
        return f"What are {joined} in this image? Please output the segmentation masks."
    if plan.template == "where":
        if single:
            return f"Where is {joined} in this image? Please output segmentation mask."
        return f"Where are {joined} in this image? Please output the segmentation masks."
    if plan.template == "show":
        return f"Show me {joined} in the image with segmentation masks"
    if plan.template == "outline":
        return f"Outline {joined} in this image with segmentation masks"
    return f"Please segment {joined} in this image"


def build_answer(
    referents: Sequence[tuple[str, Decision]],
    vocab: Vocab,
    prefix_expressions: bool = True,
    shared_seg: bool = True,
) -> list[int]:
    """Token sequence for the assistant answer.

    With prefixes on, each referent reads "{text}:" before its special
    token; the ablation form drops the prefixes entirely ("sure, [SEG],
    [SEG].").
    """
    if not referents:
        raise ValidationError("answer needs at least one referent entry")
    tokens = [vocab.index.get("sure", vocab.unk_id), vocab.comma_id]
    for i, (text, decision) in enumerate(referents):
        if i > 0:
            tokens.append(vocab.comma_id)
        if prefix_expressions:
            tokens.extend(vocab.encode_text(escape_referent(text)))
            tokens.append(vocab.colon_id)
        if decision is Decision.SEG:
            tokens.append(vocab.seg_token_id(i, shared=shared_seg))
        else:
            tokens.append(vocab.special.rej_id)
    tokens.append(vocab.period_id)
    return tokens


def parse_response(tokens: Sequence[int], vocab: Vocab) -> ResponseParse:
    """Extract (referent text, decision, position) entries from model output.

    Total function: any token sequence parses; structure violations are
    reported through diagnostics instead of raised.
    """
    parse = ResponseParse()
    special = vocab.special
    separators = {vocab.comma_id, vocab.period_id}
    chunk_start = 0
    for pos, tok in enumerate(tokens):
        if tok in separators:
            chunk_start = pos + 1
            continue
        if special.is_seg(tok) or tok == special.rej_id:
            decision = Decision.SEG if special.is_seg(tok) else Decision.REJ
            text = ""
            if pos > chunk_start and tokens[pos - 1] == vocab.colon_id:
                word_ids = [t for t in tokens[chunk_start : pos - 1] if not special.is_special(t)]
                text = unescape_referent(vocab.decode(word_ids))
            else:
                parse.diagnostics.append(f"token at position {pos} lacks an expression prefix")
            parse.entries.append(ParseEntry(text, decision, pos))
            chunk_start = pos + 1
    if not parse.entries:
        parse.diagnostics.append("no segmentation or rejection tokens in response")
    return parse


def select_seg_positions(parse: ResponseParse) -> list[int]:
    """Positions of segmentation tokens, in order; rejections are dropped."""
    return [e.token_position for e in parse.entries if e.decision is Decision.SEG]


def assign_masks(
    parse: ResponseParse,
    decoded: Sequence[np.ndarray],
    height: int,
    width: int,
) -> list[tuple[str, np.ndarray]]:
    """Pair each parse entry with its mask.

    Segmentation entries consume decoded masks in order; rejection
    entries get all-background masks without touching the decoder.
    """
    seg_entries = [e for e in parse.entries if e.decision is Decision.SEG]
    if len(decoded) != len(seg_entries):
        raise ProtocolError(
            f"decoder produced {len(decoded)} masks for {len(seg_entries)} segmentation entries"
        )
    out: list[tuple[str, np.ndarray]] = []
    it = iter(decoded)
    for entry in parse.entries:
        if entry.decision is Decision.SEG:
            mask = np.asarray(next(it), dtype=bool)
            if mask.shape != (height, width):
                raise ProtocolError(f"decoded mask shape {mask.shape} != {(height, width)}")
        else:
            mask = np.zeros((height, width), dtype=bool)
        out.append((entry.referent_text, mask))
    return out


def chunk_referents(referents: Sequence[str], cap: int = DEFAULT_MAX_REFERENTS) -> list[list[str]]:
    """Split a referent list into prompt-sized groups of at most `cap`."""
    if cap < 1:
        raise ValidationError("referent cap must be at least 1")
    return [list(referents[i : i + cap]) for i in range(0, len(referents), cap)]
