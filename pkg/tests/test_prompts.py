import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unicl.prompts import (
    CapSample,
    IncompleteOutputError,
    PromptError,
    SegSample,
    assemble_captioning,
    assemble_segmentation,
    caption_pair_length,
    category_budget,
    parse_captioning,
    parse_segmentation,
    render_tokens,
    seg_sequence_length,
)
from unicl.quantizers import BBox, Codebook, ParseError, QuantizerError, encode_text, quantize_bbox, train_bpe
from unicl.synthdata import caption_alphabet, default_class_table
from unicl.vocab import B_ED, B_ST, BOI, BOT, C_ED, C_ST, EOC, IMAGE, PAD, TEXT, build_vocabulary

NAMES = default_class_table()
T = 64


@pytest.fixture(scope="module")
def env():
    bpe = train_bpe([f"a {n} in the top left" for n in NAMES] + list(NAMES), 30, caption_alphabet())
    v = build_vocabulary(bpe.size, 4)
    # black, white and two colours; patch 4 -> 48 dims
    cb = Codebook(np.stack([np.zeros(48), np.ones(48), np.full(48, 0.3), np.full(48, 0.7)]), 4)
    return v, bpe, cb


def _img(v, rng, n=T):
    return [v.image_id(int(c)) for c in rng.integers(0, 4, size=n)]


def _seg(v, rng):
    return SegSample(_img(v, rng), [v.image_id(int(c)) for c in rng.integers(0, 2, size=T)])


# ---------------------------------------------------------------------------
# segmentation


def test_segmentation_lengths(env, rng):
    v, _bpe, _cb = env
    one = assemble_segmentation([_seg(v, rng)], _img(v, rng), v, target=_seg(v, rng).mask_tokens)
    assert len(one) == 262
    zero = assemble_segmentation([], _img(v, rng), v, target=_seg(v, rng).mask_tokens)
    assert len(zero) == 131 and sum(zero.loss_mask) == 64


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_segmentation_layout(env, rng, k):
    v, _bpe, _cb = env
    samples = [_seg(v, rng) for _ in range(k)]
    query, target = _img(v, rng), _seg(v, rng).mask_tokens
    infer = assemble_segmentation(samples, query, v)
    train = assemble_segmentation(samples, query, v, target=target)
    assert len(infer) == (k + 1) * (2 * T + 3) - 1 - T == seg_sequence_length(k, T, False)
    assert len(train) == seg_sequence_length(k, T, True)
    assert train.ids[: len(infer)] == infer.ids
    assert train.ids.count(v.tag(EOC)) == k + 1
    assert infer.ids[-1] == v.tag(BOI)
    # supervision exactly on mask tokens
    expect = []
    for s in samples:
        expect += [False] * (T + 2) + [True] * T + [False]
    expect += [False] * (T + 2) + [True] * T + [False]
    assert train.loss_mask == expect
    assert not any(m and i for m, i in zip(train.loss_mask, train.input_mask))
    assert len(train.pair_spans) == k + 1


def test_segmentation_errors(env, rng):
    v, _bpe, _cb = env
    with pytest.raises(PromptError, match="has 64/64 tokens, query has 16"):
        assemble_segmentation([_seg(v, rng)], _img(v, rng, 16), v)
    with pytest.raises(PromptError, match="max_positions=100"):
        assemble_segmentation([_seg(v, rng)], _img(v, rng), v, max_positions=100)
    with pytest.raises(PromptError, match="not an image token"):
        assemble_segmentation([], [0] * T, v)


def test_parse_segmentation(env, rng):
    v, _bpe, cb = env
    mask = rng.random((32, 32)) < 0.5
    # patch-constant mask so the codebook represents it exactly
    coarse = rng.random((8, 8)) < 0.5
    mask = np.kron(coarse, np.ones((4, 4), dtype=bool))
    toks = [v.image_id(int(c)) for c in coarse.reshape(-1)]
    out = [v.tag(BOI)] + _img(v, rng) + [v.tag(BOI)] + toks + [v.tag(EOC)]
    assert np.array_equal(parse_segmentation(out, v, cb, 32, 32), mask)
    with pytest.raises(IncompleteOutputError) as e:
        parse_segmentation([v.tag(BOI)] + toks[:-1] + [v.tag(EOC)] + toks, v, cb, 32, 32)
    assert e.value.obtained == T - 1


def test_parse_segmentation_skips_stray_tokens(env):
    v, _bpe, cb = env
    toks = [v.image_id(1)] * T
    out = [v.tag(BOI), v.bin_id(3)] + toks
    assert parse_segmentation(out, v, cb, 32, 32).all()


# ---------------------------------------------------------------------------
# captioning


def _cap(v, rng, cls=0):
    return CapSample(_img(v, rng), cls, BBox(0.1, 0.2, 0.5, 0.75), f"a {NAMES[cls]} in the top left")


def test_captioning_layout_and_mask(env, rng):
    v, bpe, _cb = env
    sample = _cap(v, rng, 0)
    seq = assemble_captioning([sample], _img(v, rng), 0, v, bpe, NAMES, caption_budget=16)
    cat = [v.tag(C_ST), *encode_text(bpe, NAMES[0]), v.tag(C_ED)]
    cap = encode_text(bpe, sample.caption)
    box = quantize_bbox(sample.bbox, v)
    pad = 16 - len(cap) + category_budget(v, bpe, NAMES) - len(cat)
    pair = [v.tag(BOI), *sample.image_tokens, v.tag(BOT), *cat, *box, *cap, v.tag(EOC)] + [v.tag(PAD)] * pad
    assert seq.ids[: len(pair)] == pair
    sup = [False] * (1 + T) + [True] * (1 + len(cat) + 6 + len(cap) + 1) + [False] * pad
    assert seq.loss_mask[: len(pair)] == sup
    assert seq.ids[len(pair) :] == [v.tag(BOI), *seq.ids[len(pair) + 1 : len(pair) + 1 + T], v.tag(BOT), *cat]
    assert not any(seq.loss_mask[len(pair) :])
    assert len(pair) == caption_pair_length(T, category_budget(v, bpe, NAMES), 16)
    for m, tok in zip(seq.loss_mask, seq.ids):
        if m:
            assert tok not in (v.tag(BOI), v.tag(PAD)) and not v.is_kind(tok, IMAGE)


def test_captioning_k0(env, rng):
    v, bpe, _cb = env
    q = _img(v, rng)
    seq = assemble_captioning([], q, 3, v, bpe, NAMES)
    assert seq.ids == [v.tag(BOI), *q, v.tag(BOT), v.tag(C_ST), *encode_text(bpe, NAMES[3]), v.tag(C_ED)]
    assert not any(seq.loss_mask)


def test_captioning_teacher_forced_query(env, rng):
    v, bpe, _cb = env
    q = _img(v, rng)
    box = BBox(0.0, 0.25, 0.5, 0.5)
    cap = f"a {NAMES[2]} in the middle left"
    seq = assemble_captioning([_cap(v, rng, 2)] * 2, q, 2, v, bpe, NAMES, query_record=(box, cap))
    start = seq.pair_spans[-1][0]
    tail_ids, tail_mask = seq.ids[start:], seq.loss_mask[start:]
    b = tail_ids.index(v.tag(B_ST))
    assert not any(tail_mask[:b])
    e = tail_ids.index(v.tag(EOC))
    assert all(tail_mask[b : e + 1]) and not any(tail_mask[e + 1 :])
    assert seq.ids.count(v.tag(EOC)) == 3
    pair_lengths = {e - s for s, e in seq.pair_spans}
    assert len(pair_lengths) == 1


def test_captioning_errors(env, rng):
    v, bpe, _cb = env
    with pytest.raises(PromptError, match="exceeds budget"):
        assemble_captioning([_cap(v, rng)], _img(v, rng), 0, v, bpe, NAMES, caption_budget=3)
    with pytest.raises(PromptError, match="unknown category"):
        assemble_captioning([], _img(v, rng), len(NAMES), v, bpe, NAMES)
    bad = CapSample(_img(v, rng), 0, BBox(0, 0, 1, 1), "   ")
    with pytest.raises(PromptError, match="empty caption"):
        assemble_captioning([bad], _img(v, rng), 0, v, bpe, NAMES)


def _record(v, bpe, cls, box, caption, eoc=True):
    out = [v.tag(BOT), v.tag(C_ST), *encode_text(bpe, NAMES[cls]), v.tag(C_ED), *quantize_bbox(box, v), *encode_text(bpe, caption)]
    return out + ([v.tag(EOC)] if eoc else [])


def test_parse_captioning_round_trip(env):
    v, bpe, _cb = env
    box = BBox(0.125, 0.25, 0.375, 0.5)
    rec = parse_captioning(_record(v, bpe, 4, box, "a  yellow square in the top left"), v, bpe, NAMES)
    assert (rec.category, rec.bbox, rec.caption, rec.truncated) == (4, box, "a yellow square in the top left", False)
    cut = parse_captioning(_record(v, bpe, 4, box, "a yellow", eoc=False), v, bpe, NAMES)
    assert cut.truncated and cut.caption == "a yellow"


def test_parse_captioning_errors(env):
    v, bpe, _cb = env
    good = _record(v, bpe, 1, BBox(0.1, 0.1, 0.2, 0.2), "a green square")
    b = good.index(v.tag(B_ST))
    with pytest.raises(ParseError, match="<b_st>"):
        parse_captioning(good[:b] + good[b + 1 :], v, bpe, NAMES)
    no_end = list(good)
    no_end[b + 5] = v.tag(EOC)
    with pytest.raises(ParseError, match="<b_ed>"):
        parse_captioning(no_end, v, bpe, NAMES)
    swapped = list(good)
    swapped[b + 1], swapped[b + 3] = v.bin_id(500), v.bin_id(100)
    with pytest.raises(QuantizerError):
        parse_captioning(swapped, v, bpe, NAMES)
    unknown = [v.tag(BOT), v.tag(C_ST), *encode_text(bpe, "red squar"), v.tag(C_ED)] + good[b:]
    with pytest.raises(ParseError, match="nearest: \\['red square'"):
        parse_captioning(unknown, v, bpe, NAMES)


def test_render_tokens(env, rng):
    v, bpe, _cb = env
    seq = assemble_captioning([_cap(v, rng)], _img(v, rng), 0, v, bpe, NAMES)
    lines = render_tokens(seq, v, bpe).splitlines()
    assert len(lines) == len(seq)
    pos, kind, value, bit = lines[0].split("\t")
    assert (pos, value, bit) == ("0", BOI, "0")
    assert any(line.split("\t")[1] == TEXT for line in lines)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_prefix_consistency(env, k, seed):
    """Inference prompts are prefixes of their teacher-forced sequences."""
    v, bpe, _cb = env
    r = np.random.default_rng(seed)
    ctx = [_cap(v, r, int(r.integers(len(NAMES)))) for _ in range(k)]
    q, cls = _img(v, r), int(r.integers(len(NAMES)))
    infer = assemble_captioning(ctx, q, cls, v, bpe, NAMES)
    full = assemble_captioning(ctx, q, cls, v, bpe, NAMES, query_record=(BBox(0, 0, 1, 1), f"a {NAMES[cls]}"))
    assert full.ids[: len(infer)] == infer.ids
    assert full.ids.count(v.tag(EOC)) == k + 1
