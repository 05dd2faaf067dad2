"""Interleaved in-context sequences for the two class-aware tasks.

Segmentation pair:  [BOI] image [BOI] mask [EOC]
Captioning pair:    [BOI] image [BOT] <c_st> name <c_ed> <b_st> 4 bins <b_ed> caption [EOC] [PAD]...

Captioning pairs are padded after [EOC] to a fixed length so every pair slot
starts at the same position regardless of class name or caption length.

``loss_mask[t]`` marks positions whose token is a supervision target. The model
predicts ``ids[t]`` from ``ids[:t]``, so trainers compare ``logits[t-1]`` with
``ids[t]`` wherever ``loss_mask[t]`` holds.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field

import numpy as np

from .quantizers import (
    BBox,
    BpeTokenizer,
    Codebook,
    ParseError,
    dequantize_bbox,
    dequantize_image,
    encode_category,
    encode_text,
    quantize_bbox,
)
from .vocab import B_ED, B_ST, BOI, BOT, C_ED, C_ST, EOC, IMAGE, PAD, SPECIAL, TEXT, Vocabulary

SEGMENTATION = "segmentation"
CAPTIONING = "captioning"
TASKS = (SEGMENTATION, CAPTIONING)

DEFAULT_CAPTION_BUDGET = 32


class PromptError(ValueError):
    pass


class IncompleteOutputError(ValueError):
    def __init__(self, obtained: int, needed: int):
        super().__init__(f"incomplete output: {obtained} of {needed} image tokens before [EOC]")
        self.obtained = obtained
        self.needed = needed


@dataclass
class SegSample:
    image_tokens: list[int]
    mask_tokens: list[int]


@dataclass
class CapSample:
    image_tokens: list[int]
    category: int
    bbox: BBox
    caption: str


@dataclass
class PromptSequence:
    ids: list[int]
    loss_mask: list[bool]
    input_mask: list[bool]  # input image tokens, for the optional L_in term
    pair_spans: list[tuple[int, int]]
    task: str = SEGMENTATION
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)


def _check_image_tokens(tokens, v: Vocabulary, what: str) -> None:
    for pos, tok in enumerate(tokens):
        if not v.is_kind(tok, IMAGE):
            raise PromptError(f"{what}: token {tok} at {pos} is not an image token")


def _check_length(n: int, max_positions: int | None) -> None:
    if max_positions is not None and n > max_positions:
        raise PromptError(f"sequence length {n} exceeds max_positions={max_positions}")


def seg_sequence_length(k: int, tokens_per_image: int, with_target: bool) -> int:
    pair = 2 * tokens_per_image + 3
    if with_target:
        return (k + 1) * pair
    return (k + 1) * pair - 1 - tokens_per_image


def assemble_segmentation(
    samples: list[SegSample],
    query: list[int],
    v: Vocabulary,
    target: list[int] | None = None,
    max_positions: int | None = None,
) -> PromptSequence:
    """Context pairs then the query; ``target`` appends the query mask (teacher forcing)."""
    t = len(query)
    _check_image_tokens(query, v, "query")
    for i, s in enumerate(samples):
        if len(s.image_tokens) != t or len(s.mask_tokens) != t:
            raise PromptError(
                f"sample {i} has {len(s.image_tokens)}/{len(s.mask_tokens)} tokens, query has {t}"
            )
        _check_image_tokens(s.image_tokens, v, f"sample {i} image")
        _check_image_tokens(s.mask_tokens, v, f"sample {i} mask")
    if target is not None:
        if len(target) != t:
            raise PromptError(f"target has {len(target)} tokens, query has {t}")
        _check_image_tokens(target, v, "target")
    k = len(samples)
    _check_length(seg_sequence_length(k, t, target is not None), max_positions)

    boi, eoc = v.tag(BOI), v.tag(EOC)
    ids: list[int] = []
    loss: list[bool] = []
    inp: list[bool] = []
    spans = []

    def emit(tokens, supervised=False, is_input=False):
        ids.extend(tokens)
        loss.extend([supervised] * len(tokens))
        inp.extend([is_input] * len(tokens))

    pairs = [(s.image_tokens, s.mask_tokens) for s in samples] + [(query, target)]
    for image, mask in pairs:
        start = len(ids)
        emit([boi])
        emit(image, is_input=True)
        emit([boi])
        if mask is not None:
            emit(mask, supervised=True)
            emit([eoc])
        spans.append((start, len(ids)))
    return PromptSequence(ids, loss, inp, spans, SEGMENTATION, {"k": k, "tokens_per_image": t})


def category_budget(v: Vocabulary, t: BpeTokenizer, names) -> int:
    return max(len(encode_category(c, v, names, t)) for c in range(len(names)))


def caption_pair_length(tokens_per_image: int, cat_budget: int, caption_budget: int) -> int:
    return 1 + tokens_per_image + 1 + cat_budget + 6 + caption_budget + 1


def assemble_captioning(
    samples: list[CapSample],
    query_image: list[int],
    query_category: int,
    v: Vocabulary,
    t: BpeTokenizer,
    names,
    query_record: tuple[BBox, str] | None = None,
    caption_budget: int = DEFAULT_CAPTION_BUDGET,
    max_positions: int | None = None,
) -> PromptSequence:
    """Context records then the query image and category.

    Without ``query_record`` the sequence stops after the query's category span;
    the model continues with box, caption and [EOC]. With it, the query record is
    appended (teacher forcing) and supervised from ``<b_st>`` onward.
    """
    if not 0 <= query_category < len(names):
        raise PromptError(f"unknown category {query_category}")
    n_img = len(query_image)
    _check_image_tokens(query_image, v, "query")
    cat_budget = category_budget(v, t, names)
    boi, bot, eoc, pad = v.tag(BOI), v.tag(BOT), v.tag(EOC), v.tag(PAD)

    ids: list[int] = []
    loss: list[bool] = []
    inp: list[bool] = []
    spans = []

    def emit(tokens, supervised=False, is_input=False):
        ids.extend(tokens)
        loss.extend([supervised] * len(tokens))
        inp.extend([is_input] * len(tokens))

    def record(category, bbox, caption, supervise_category):
        if not 0 <= category < len(names):
            raise PromptError(f"unknown category {category}")
        if not caption.strip():
            raise PromptError("empty caption")
        cat = encode_category(category, v, names, t)
        cap = encode_text(t, caption)
        if len(cap) > caption_budget:
            raise PromptError(f"caption of {len(cap)} tokens exceeds budget {caption_budget}: {caption!r}")
        emit([bot], supervised=supervise_category)
        emit(cat, supervised=supervise_category)
        emit(quantize_bbox(bbox, v), supervised=True)
        emit(cap, supervised=True)
        emit([eoc], supervised=True)
        emit([pad] * ((caption_budget - len(cap)) + (cat_budget - len(cat))))

    for i, s in enumerate(samples):
        if len(s.image_tokens) != n_img:
            raise PromptError(f"sample {i} has {len(s.image_tokens)} image tokens, query has {n_img}")
        _check_image_tokens(s.image_tokens, v, f"sample {i} image")
        start = len(ids)
        emit([boi])
        emit(s.image_tokens, is_input=True)
        record(s.category, s.bbox, s.caption, supervise_category=True)
        spans.append((start, len(ids)))

    start = len(ids)
    emit([boi])
    emit(query_image, is_input=True)
    if query_record is None:
        emit([bot])
        emit(encode_category(query_category, v, names, t))
    else:
        record(query_category, query_record[0], query_record[1], supervise_category=False)
    spans.append((start, len(ids)))
    _check_length(len(ids), max_positions)
    meta = {"k": len(samples), "tokens_per_image": n_img, "caption_budget": caption_budget, "category_budget": cat_budget}
    return PromptSequence(ids, loss, inp, spans, CAPTIONING, meta)


def parse_segmentation(output, v: Vocabulary, cb: Codebook, h: int, w: int) -> np.ndarray:
    """Binary ``h x w`` mask from the first T image tokens after the last [BOI].

    Non-image tokens before [EOC] are skipped. Pixels whose channel mean is at
    least mid-gray are foreground.
    """
    out = list(output)
    boi, eoc = v.tag(BOI), v.tag(EOC)
    need = (h // cb.patch_size) * (w // cb.patch_size)
    starts = [i for i, tok in enumerate(out) if tok == boi]
    pos = starts[-1] + 1 if starts else 0
    got: list[int] = []
    while pos < len(out) and len(got) < need:
        tok = out[pos]
        if tok == eoc:
            break
        if v.is_kind(tok, IMAGE):
            got.append(tok)
        pos += 1
    if len(got) < need:
        raise IncompleteOutputError(len(got), need)
    img = dequantize_image(got, cb, h, w, v)
    return img.mean(axis=2) >= 0.5


@dataclass
class CaptionRecord:
    category: int
    bbox: BBox
    caption: str
    truncated: bool = False


def _normalize(s: str) -> str:
    return " ".join(s.split())


def parse_captioning(output, v: Vocabulary, t: BpeTokenizer, names) -> CaptionRecord:
    """Parse ``<c_st> name <c_ed> <b_st> bins <b_ed> caption [EOC]`` (after the last [BOT], if any)."""
    out = list(output)
    bot = v.tag(BOT)
    starts = [i for i, tok in enumerate(out) if tok == bot]
    pos = starts[-1] + 1 if starts else 0

    if pos >= len(out) or out[pos] != v.tag(C_ST):
        raise ParseError("expected <c_st>", pos)
    pos += 1
    name_ids = []
    while pos < len(out) and out[pos] != v.tag(C_ED):
        if not v.is_kind(out[pos], TEXT):
            raise ParseError(f"non-text token {v.token_name(out[pos])} in category span", pos)
        name_ids.append(out[pos])
        pos += 1
    if pos >= len(out):
        raise ParseError("expected <c_ed>", pos)
    pos += 1
    name = _normalize(t.decode(name_ids))
    if name not in names:
        close = difflib.get_close_matches(name, list(names), n=3, cutoff=0.0)
        raise ParseError(f"unknown category {name!r}; nearest: {close}", pos)
    category = list(names).index(name)

    if pos >= len(out) or out[pos] != v.tag(B_ST):
        raise ParseError("expected <b_st>", pos)
    b_end = pos + 5
    if b_end >= len(out) or out[b_end] != v.tag(B_ED):
        raise ParseError("expected <b_ed>", min(b_end, len(out)))
    bbox = dequantize_bbox(out[pos : b_end + 1], v, start=pos)
    pos = b_end + 1

    cap_ids = []
    truncated = True
    while pos < len(out):
        tok = out[pos]
        if tok == v.tag(EOC):
            truncated = False
            break
        if not v.is_kind(tok, TEXT):
            raise ParseError(f"non-text token {v.token_name(tok)} in caption", pos)
        cap_ids.append(tok)
        pos += 1
    return CaptionRecord(category, bbox, _normalize(t.decode(cap_ids)), truncated)


def render_tokens(seq: PromptSequence | list[int], v: Vocabulary, t: BpeTokenizer | None = None) -> str:
    """One line per token: position, segment kind, local value, loss-mask bit."""
    if isinstance(seq, PromptSequence):
        ids, mask = seq.ids, seq.loss_mask
    else:
        ids, mask = list(seq), [False] * len(seq)
    lines = []
    for pos, (tok, m) in enumerate(zip(ids, mask)):
        kind, local = v.resolve(tok)
        if kind == SPECIAL:
            value = v.special_tags[local]
        elif kind == TEXT and t is not None:
            value = repr(t.vocab[local])
        else:
            value = str(local)
        lines.append(f"{pos}\t{kind}\t{value}\t{int(m)}")
    return "\n".join(lines) + "\n"
