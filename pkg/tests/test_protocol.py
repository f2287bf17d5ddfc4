import numpy as np
import pytest

from greskit.errors import ProtocolError, ValidationError
from greskit.protocol import (
    DEFAULT_MAX_REFERENTS,
    Decision,
    PromptPlan,
    Vocab,
    assign_masks,
    build_answer,
    build_question,
    chunk_referents,
    escape_referent,
    parse_response,
    select_seg_positions,
    unescape_referent,
)
from greskit.synth import GRAMMAR_WORDS, iter_vocab_words


@pytest.fixture(scope="module")
def vocab():
    return Vocab(tuple(iter_vocab_words()))


class TestVocab:
    def test_special_ids_distinct(self, vocab):
        sp = vocab.special
        ids = {sp.seg_id, sp.rej_id, sp.bos_id, sp.eos_id, sp.pad_id, sp.image_placeholder_id}
        ids |= set(sp.seg_bank)
        assert len(ids) == 6 + len(sp.seg_bank)

    def test_words_disjoint_from_specials(self, vocab):
        sp = vocab.special
        for word in vocab.words:
            assert not sp.is_special(vocab.index[word])

    def test_seg_bank_dispatch_wraps(self, vocab):
        assert vocab.seg_token_id(0, shared=False) == vocab.special.seg_bank[0]
        assert vocab.seg_token_id(9, shared=False) == vocab.special.seg_bank[1]
        assert vocab.seg_token_id(3, shared=True) == vocab.special.seg_id

    def test_rejects_whitespace_words(self):
        with pytest.raises(ValidationError):
            Vocab(("red", "two words"))


class TestBuildQuestion:
    def test_single_referent_form(self):
        q = build_question(PromptPlan(("red circle",)))
        assert q == "What is red circle in this image? Please output segmentation mask."

    def test_plural_form(self):
        q = build_question(PromptPlan(("a", "b")))
        assert q == "What are a, b in this image? Please output the segmentation masks."

    def test_outline_form(self):
        assert (
            build_question(PromptPlan(("a",), template="outline"))
            == "Outline a in this image with segmentation masks"
        )

    def test_show_form(self):
        assert (
            build_question(PromptPlan(("a", "b"), template="show"))
            == "Show me a, b in the image with segmentation masks"
        )

    def test_empty_plan_rejected(self):
        with pytest.raises(ValidationError):
            PromptPlan(())

    def test_unknown_template_rejected(self):
        with pytest.raises(ValidationError):
            PromptPlan(("a",), template="draw")


class TestBuildAnswer:
    def test_single_seg(self, vocab):
        tokens = build_answer([("red circle", Decision.SEG)], vocab)
        assert vocab.decode(tokens) == "sure , red circle : [SEG] ."

    def test_rej_then_seg(self, vocab):
        tokens = build_answer([("red circle", Decision.REJ), ("blue square", Decision.SEG)], vocab)
        assert vocab.decode(tokens) == "sure , red circle : [REJ] , blue square : [SEG] ."

    def test_prefix_off(self, vocab):
        tokens = build_answer(
            [("a", Decision.SEG), ("b", Decision.SEG)], vocab, prefix_expressions=False
        )
        assert vocab.decode(tokens) == "sure , [SEG] , [SEG] ."

    def test_indexed_bank(self, vocab):
        tokens = build_answer(
            [("red circle", Decision.SEG), ("blue square", Decision.SEG)],
            vocab,
            shared_seg=False,
        )
        assert vocab.special.seg_bank[0] in tokens
        assert vocab.special.seg_bank[1] in tokens
        assert vocab.special.seg_id not in tokens


class TestParseResponse:
    def test_single_entry(self, vocab):
        parse = parse_response(build_answer([("red circle", Decision.SEG)], vocab), vocab)
        assert [(e.referent_text, e.decision) for e in parse.entries] == [
            ("red circle", Decision.SEG)
        ]

    def test_mixed_positions_increase(self, vocab):
        tokens = build_answer(
            [("red circle", Decision.REJ), ("blue square", Decision.SEG)], vocab
        )
        parse = parse_response(tokens, vocab)
        assert [e.decision for e in parse.entries] == [Decision.REJ, Decision.SEG]
        assert parse.entries[0].token_position < parse.entries[1].token_position
        for e in parse.entries:
            assert tokens[e.token_position] in (vocab.special.seg_id, vocab.special.rej_id)

    def test_no_special_tokens_degenerate(self, vocab):
        parse = parse_response(vocab.encode_text("sure , nothing here ."), vocab)
        assert parse.entries == []
        assert parse.diagnostics

    def test_parse_never_raises_on_noise(self, vocab):
        rng = np.random.default_rng(0)
        for _ in range(200):
            tokens = rng.integers(0, len(vocab), size=rng.integers(0, 30)).tolist()
            parse = parse_response(tokens, vocab)
            positions = [e.token_position for e in parse.entries]
            assert positions == sorted(positions)

    def test_roundtrip_property_over_grammar(self, vocab):
        rng = np.random.default_rng(42)
        words = [w for w in GRAMMAR_WORDS if w != "and"]
        for _ in range(1000):
            n = int(rng.integers(1, 6))
            entries = []
            for _ in range(n):
                text = " ".join(rng.choice(words, size=rng.integers(1, 4)))
                decision = Decision.SEG if rng.random() < 0.5 else Decision.REJ
                entries.append((text, decision))
            for prefix in (True,):
                for shared in (True, False):
                    tokens = build_answer(entries, vocab, prefix, shared)
                    parse = parse_response(tokens, vocab)
                    assert [(e.referent_text, e.decision) for e in parse.entries] == entries
        # position bookkeeping: every entry count splits into seg + rej
        parse = parse_response(build_answer(entries, vocab), vocab)
        n_rej = len([e for e in parse.entries if e.decision is Decision.REJ])
        assert len(select_seg_positions(parse)) + n_rej == len(parse.entries)

    def test_escaping_delimiters(self, vocab):
        text = "odd:name,with.chars?"
        escaped = escape_referent(text)
        assert unescape_referent(escaped) == text
        assert ":" not in escaped.replace("\\:", "")


class TestSelectAndAssign:
    def test_all_rej_selects_nothing(self, vocab):
        parse = parse_response(
            build_answer([("a", Decision.REJ), ("b", Decision.REJ)], vocab), vocab
        )
        assert select_seg_positions(parse) == []

    def test_mixed_matches_filter_oracle(self, vocab):
        entries = [("a", Decision.SEG), ("b", Decision.REJ), ("c", Decision.SEG)]
        parse = parse_response(build_answer(entries, vocab), vocab)
        oracle = [e.token_position for e in parse.entries if e.decision is Decision.SEG]
        assert select_seg_positions(parse) == oracle

    def test_assign_rej_gets_background(self, vocab):
        parse = parse_response(build_answer([("red", Decision.REJ)], vocab), vocab)
        out = assign_masks(parse, [], 8, 8)
        assert len(out) == 1
        assert out[0][0] == "red"
        assert not out[0][1].any()

    def test_assign_orders_masks(self, vocab):
        entries = [("red", Decision.SEG), ("blue", Decision.REJ)]
        parse = parse_response(build_answer(entries, vocab), vocab)
        m = np.ones((4, 4), dtype=bool)
        out = assign_masks(parse, [m], 4, 4)
        assert out[0][1].all() and not out[1][1].any()

    def test_count_mismatch_raises(self, vocab):
        parse = parse_response(build_answer([("a", Decision.SEG)], vocab), vocab)
        with pytest.raises(ProtocolError):
            assign_masks(parse, [np.ones((4, 4), dtype=bool)] * 2, 4, 4)


class TestChunking:
    def test_default_cap(self):
        groups = chunk_referents([str(i) for i in range(12)])
        assert [len(g) for g in groups] == [DEFAULT_MAX_REFERENTS, DEFAULT_MAX_REFERENTS, 2]

    def test_cap_one(self):
        assert chunk_referents(["a", "b"], 1) == [["a"], ["b"]]

    def test_bad_cap(self):
        with pytest.raises(ValidationError):
            chunk_referents(["a"], 0)
