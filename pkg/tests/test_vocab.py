import pytest
from hypothesis import given
from hypothesis import strategies as st

from unicl.vocab import (
    BIN,
    BOI,
    DEFAULT_TAGS,
    EOC,
    IMAGE,
    PAD,
    SEGMENT_ORDER,
    SPECIAL,
    TEXT,
    Vocabulary,
    VocabError,
    build_vocabulary,
    resolve,
)


def test_layout_is_contiguous_in_fixed_order():
    v = build_vocabulary(70, 16)
    assert v.segment_offsets == {TEXT: 0, IMAGE: 70, BIN: 86, SPECIAL: 1087}
    assert v.total_size == 70 + 16 + 1001 + len(DEFAULT_TAGS)


def test_tags_and_bins():
    v = build_vocabulary(10, 4)
    assert v.tag(BOI) == v.segment_offsets[SPECIAL]
    assert v.resolve(v.tag(PAD)) == (SPECIAL, DEFAULT_TAGS.index(PAD))
    assert v.bin_id(1000) == v.segment_offsets[BIN] + 1000
    assert v.token_name(v.bin_id(7)) == "<bin_7>"
    assert v.token_name(v.tag(EOC)) == EOC
    with pytest.raises(VocabError):
        v.tag("[NOPE]")


@pytest.mark.parametrize("bad", [-1, 10 + 4 + 1001 + len(DEFAULT_TAGS)])
def test_out_of_range_ids_rejected(bad):
    v = build_vocabulary(10, 4)
    with pytest.raises(VocabError, match="out of range"):
        resolve(v, bad)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(text_size=0, image_code_count=4),
        dict(text_size=3, image_code_count=0),
        dict(text_size=3, image_code_count=4, bin_count=0),
        dict(text_size=3, image_code_count=4, special_tags=()),
        dict(text_size=3, image_code_count=4, special_tags=("[A]", "[A]")),
        dict(text_size=3, image_code_count=4, special_tags=("has space",)),
    ],
)
def test_invalid_layouts(kwargs):
    with pytest.raises(VocabError):
        build_vocabulary(**kwargs)


def test_manifest_round_trip():
    v = build_vocabulary(33, 16)
    w = Vocabulary.from_text(v.to_text())
    assert w == v and w.segment_offsets == v.segment_offsets
    with pytest.raises(VocabError):
        Vocabulary.from_text("garbage\n")


@given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 1100), st.data())
def test_id_bijection(text, image, bins, data):
    v = build_vocabulary(text, image, bins)
    tok = data.draw(st.integers(0, v.total_size - 1))
    kind, local = resolve(v, tok)
    assert v.to_id(kind, local) == tok
    assert v.is_kind(tok, kind)
    assert sum(v.is_kind(tok, k) for k in SEGMENT_ORDER) == 1
