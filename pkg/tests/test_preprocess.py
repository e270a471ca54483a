"""Tokenization, fragmentation, answer-type tagging, and downsampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multigrain.preprocess import (
    Annotations,
    AnswerType,
    CandidateBlock,
    PreprocessConfig,
    RawExample,
    TrainingInstance,
    Vocab,
    build_instance,
    detokenize,
    downsample_null,
    fragment_document,
    insert_markup_tokens,
    markup_token,
    preprocess_example,
    segment_sentences,
    wordpiece_tokenize,
    wordpiece_with_offsets,
)


@pytest.fixture
def vocab():
    return Vocab.build(["play", "##ing", "a", "b", "c", "d", "no", "terminator", "yes"])


# ---------------------------------------------------------------- wordpiece


def test_wordpiece_empty(vocab):
    assert wordpiece_tokenize("", vocab) == []


def test_wordpiece_greedy_longest_match(vocab):
    ids = wordpiece_tokenize("playing", vocab)
    assert [vocab.tokens[i] for i in ids] == ["play", "##ing"]


def test_wordpiece_unknown_fallback(vocab):
    ids = wordpiece_tokenize("qzx", vocab)
    assert [vocab.tokens[i] for i in ids] == ["[UNK]"]


def test_wordpiece_offsets_cover_words(vocab):
    text = "playing a b"
    ids, offs = wordpiece_with_offsets(text, vocab)
    assert len(ids) == len(offs)
    for s, e in offs:
        assert 0 <= s < e <= len(text)
    assert text[offs[0][0] : offs[1][1]] == "playing"


# ---------------------------------------------------------------- sentences


def test_sentence_split_two():
    assert len(segment_sentences("A b. C d.")) == 2


def test_sentence_no_terminator():
    assert len(segment_sentences("no terminator")) == 1


def test_sentence_empty():
    assert segment_sentences("") == []


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet="aB .?!x", max_size=60))
def test_sentence_spans_partition_text(text):
    spans = segment_sentences(text)
    if text.strip():
        assert spans, "non-blank text must yield at least one sentence"
    covered = "".join(text[a:b] for a, b in spans)
    assert covered == text[spans[0][0] : spans[-1][1]] if spans else True
    for (a1, b1), (a2, b2) in zip(spans, spans[1:]):
        assert b1 <= a2


# ---------------------------------------------------------------- markup


def test_markup_counters_per_kind(vocab):
    blocks = [CandidateBlock("paragraph", "a b.", ["a b."]), CandidateBlock("paragraph", "c d.", ["c d."])]
    doc = insert_markup_tokens(blocks, vocab)
    marks = [vocab.tokens[i] for i in doc.token_ids if vocab.tokens[i].startswith("[Paragraph")]
    assert marks == ["[Paragraph=0]", "[Paragraph=1]"]


def test_markup_kinds_count_independently(vocab):
    blocks = [
        CandidateBlock("paragraph", "a.", ["a."]),
        CandidateBlock("table", "b.", ["b."]),
        CandidateBlock("paragraph", "c.", ["c."]),
    ]
    doc = insert_markup_tokens(blocks, vocab)
    marks = [vocab.tokens[i] for i in doc.token_ids if "=" in vocab.tokens[i]]
    assert marks == ["[Paragraph=0]", "[Table=0]", "[Paragraph=1]"]


def test_markup_empty_block_list(vocab):
    doc = insert_markup_tokens([], vocab)
    assert len(doc.token_ids) == 0 and doc.n_sentences == 0


def test_markup_counter_cap():
    assert markup_token("paragraph", 200) == markup_token("paragraph", 49)


# ---------------------------------------------------------------- fragmentation


def test_fragment_600_10_two_windows():
    frags = fragment_document(600, 10)
    assert [f[0] for f in frags] == [0, 128]


def test_fragment_short_doc_single_window():
    assert fragment_document(400, 10) == [(0, 400)]


def test_fragment_question_too_long_rejected():
    with pytest.raises(ValueError):
        fragment_document(600, 512 - 3 - 127)  # budget 127 < stride 128


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 512 - 3 - 128))
def test_fragment_coverage(doc_len, q_len):
    frags = fragment_document(doc_len, q_len)
    covered = set()
    for s, e in frags:
        assert s % 128 == 0
        assert e - s <= 512 - 3 - q_len
        covered.update(range(s, e))
    assert covered == set(range(doc_len))


# ---------------------------------------------------------------- answer types


def make_example(ann: Annotations):
    blocks = [
        CandidateBlock("paragraph", "a b c. d a b.", ["a b c.", "d a b."]),
        CandidateBlock("paragraph", "c d a b. a c.", ["c d a b.", "a c."]),
    ]
    return RawExample("ex0", "a b", blocks, ann)


def run_case(ann, window=None, vocab=None, max_len=64):
    vocab = vocab or Vocab.build(["a", "b", "c", "d"])
    ex = make_example(ann)
    doc = insert_markup_tokens(ex.blocks, vocab)
    q = wordpiece_tokenize(ex.question, vocab)
    window = window or (0, len(doc))
    return build_instance(doc, window, 0, q, ex, vocab, max_len=max_len), doc, vocab


def test_short_spans_in_window_tag_short():
    # two short spans in candidate 1: "c d" (bytes 0-3) and "a b" (bytes 4-7)
    ann = Annotations(long_index=1, short_spans=[(0, 3), (4, 7)])
    inst, doc, vocab = run_case(ann)
    assert inst.answer_type == AnswerType.SHORT
    # s = first token of the first span, e = last token of the last span
    span_tokens = [vocab.tokens[t] for t in inst.tokens[inst.start : inst.end + 1]]
    assert span_tokens == ["c", "d", "a", "b"]
    assert inst.long_target == inst.cand_doc_idx.index(1)


def test_window_missing_long_tags_no_answer():
    ann = Annotations(long_index=1, short_spans=[(0, 3)])
    # window over the first candidate only
    inst, doc, vocab = run_case(ann, window=(0, doc_len_of_first_candidate()))
    assert inst.answer_type == AnswerType.NO_ANSWER
    assert (inst.start, inst.end, inst.long_target) == (0, 0, 0)


def doc_len_of_first_candidate():
    vocab = Vocab.build(["a", "b", "c", "d"])
    ex = make_example(Annotations())
    doc = insert_markup_tokens(ex.blocks, vocab)
    return doc.cand_token_spans[0][1]


def test_yes_annotation_with_long_inside():
    ann = Annotations(long_index=0, yes_no="yes")
    inst, _, _ = run_case(ann)
    assert inst.answer_type == AnswerType.YES
    assert (inst.start, inst.end) == (0, 0)
    assert inst.long_target == inst.cand_doc_idx.index(0)


def test_no_annotation_with_long_inside():
    inst, _, _ = run_case(Annotations(long_index=0, yes_no="no"))
    assert inst.answer_type == AnswerType.NO


def test_long_only_annotation():
    inst, _, _ = run_case(Annotations(long_index=0))
    assert inst.answer_type == AnswerType.LONG
    assert (inst.start, inst.end) == (0, 0)


def test_null_annotation():
    inst, _, _ = run_case(Annotations())
    assert inst.answer_type == AnswerType.NO_ANSWER
    assert (inst.start, inst.end, inst.long_target) == (0, 0, 0)


def test_cls_span_is_first():
    inst, _, _ = run_case(Annotations())
    assert inst.spans[0] == (0, 0) and inst.cand_doc_idx[0] == -1


# ---------------------------------------------------------------- downsampling


def null_inst(i):
    L = 8
    return TrainingInstance(
        tokens=np.zeros(L, dtype=np.int64),
        mask=np.ones(L, dtype=bool),
        spans=[(0, 0)],
        long_target=0,
        start=0,
        end=0,
        answer_type=AnswerType.NO_ANSWER,
        sentences=np.zeros(L, dtype=np.int64),
        example_id=f"ex{i}",
        fragment_index=0,
        fragment_start=0,
        question_len=1,
        cand_doc_idx=[-1],
    )


def pos_inst(i):
    inst = null_inst(i)
    inst.answer_type = AnswerType.LONG
    inst.long_target = 0
    return inst


def test_downsample_keep_all():
    insts = [null_inst(i) for i in range(10)]
    assert downsample_null(insts, 1.0, seed=0) == insts


def test_downsample_keep_none_keeps_positives():
    insts = [null_inst(i) for i in range(5)] + [pos_inst(i + 5) for i in range(5)]
    kept = downsample_null(insts, 0.0, seed=0)
    assert len(kept) == 5
    assert all(k.answer_type != AnswerType.NO_ANSWER for k in kept)


def test_downsample_deterministic():
    insts = [null_inst(i) for i in range(200)]
    a = downsample_null(insts, 0.5, seed=7)
    b = downsample_null(insts, 0.5, seed=7)
    assert [x.example_id for x in a] == [x.example_id for x in b]
    c = downsample_null(insts, 0.5, seed=8)
    assert [x.example_id for x in a] != [x.example_id for x in c]


# ---------------------------------------------------------------- round trips


def test_instance_json_round_trip():
    inst, _, _ = run_case(Annotations(long_index=1, short_spans=[(0, 3)]))
    back = TrainingInstance.from_json(inst.to_json())
    assert back.to_json() == inst.to_json()


def test_raw_example_json_round_trip():
    ex = make_example(Annotations(long_index=0, short_spans=[(0, 1)], yes_no=None))
    back = RawExample.from_json(ex.to_json())
    assert back.to_json() == ex.to_json()


def test_pipeline_byte_identical():
    vocab = Vocab.build(["a", "b", "c", "d"])
    ex = make_example(Annotations(long_index=1, short_spans=[(0, 3)]))
    cfg = PreprocessConfig(max_len=64, stride=32, keep_prob=0.5, seed=3)
    import json

    runs = []
    for _ in range(2):
        insts = preprocess_example(ex, vocab, cfg)
        runs.append(json.dumps([i.to_json() for i in insts]).encode())
    assert runs[0] == runs[1]


def test_detokenize_merges_continuations():
    vocab = Vocab.build(["play", "##ing", "a"])
    ids = wordpiece_tokenize("playing a", vocab)
    assert detokenize(ids, vocab) == "playing a"
