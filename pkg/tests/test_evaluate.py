import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from unicl.evaluate import (
    CapMetrics,
    EvalError,
    SegMetrics,
    _contexts,
    bleu4,
    evaluate_captioning,
    evaluate_segmentation,
    format_report,
    mae,
    map_lite,
    map_lite_corpus,
    mask_iou,
    miou,
    read_report,
    report_rows,
    run_evaluation,
    write_report,
)
from unicl.prompts import CAPTIONING, SEGMENTATION
from unicl.quantizers import BBox, encode_text, quantize_bbox
from unicl.vocab import EOC

from oracles import bleu_loop, iou_loop, map_lite_loop

WORDS = ["a", "red", "square", "in", "the", "top", "left", "blue", "circle", "middle"]

# ---------------------------------------------------------------------------
# segmentation metrics


def test_mask_metrics_match_loops(rng):
    for _ in range(100):
        shape = tuple(rng.integers(1, 9, size=2))
        p, g = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        assert mask_iou(p, g) == pytest.approx(iou_loop(p, g), abs=1e-10)
        assert mae([p], [g]) == pytest.approx(np.sum(p != g) / p.size, abs=1e-10)


def test_top_half_vs_left_half():
    top = np.zeros((32, 32), bool)
    top[:16] = True
    left = np.zeros((32, 32), bool)
    left[:, :16] = True
    assert mask_iou(top, left) == pytest.approx(1 / 3, abs=1e-12)
    assert mae([top], [left]) == pytest.approx(0.5, abs=1e-12)


def test_mask_metric_edges():
    empty = np.zeros((4, 4), bool)
    assert mask_iou(empty, empty) == 1.0
    assert miou([empty, ~empty], [empty, empty]) == 0.5
    with pytest.raises(EvalError, match="shape"):
        mae([np.zeros((2, 2))], [np.zeros((2, 3))])
    with pytest.raises(EvalError):
        miou([], [])
    with pytest.raises(EvalError, match="2 predictions for 1"):
        miou([empty, empty], [empty])


# ---------------------------------------------------------------------------
# BLEU


def test_bleu_hand_example():
    want = (0.8 * 0.75 * (2 / 3) * 0.5) ** 0.25
    assert bleu4("a b c d e", ["a b c d f"]) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.668740, abs=1e-6)


def test_bleu_edges():
    assert bleu4("the red square", ["the red square"]) == pytest.approx(1.0)
    assert bleu4("", ["a"]) == 0.0
    assert bleu4("x y z", ["a b c"]) == 0.0
    assert bleu4("The Red", ["the red"]) == pytest.approx(bleu4("the red", ["the red"]))
    # shorter candidate is penalised
    assert bleu4("a red square", ["a red square in the top left"]) < bleu4("a red square in the top left", ["a red square in the top left"])


def test_bleu_matches_loop(rng):
    for _ in range(100):
        c = " ".join(rng.choice(WORDS, size=rng.integers(1, 9)))
        r = " ".join(rng.choice(WORDS, size=rng.integers(1, 9)))
        assert bleu4(c, [r]) == pytest.approx(bleu_loop(c, r), abs=1e-10)


# ---------------------------------------------------------------------------
# mAP-lite


def test_map_lite_single_pair_at_045():
    gt = BBox(0, 0, 1, 1)
    pred = BBox(0, 0, 0.45, 1)
    assert pred.iou(gt) == pytest.approx(0.45)
    assert map_lite([(pred, "a red square")], [(gt, "a red square")]) == pytest.approx(0.4, abs=1e-12)


def test_map_lite_edges():
    g = [(BBox(0, 0, 0.5, 0.5), "a red square")]
    assert map_lite([], g) == 0.0
    assert map_lite(g, []) == 0.0
    assert map_lite(g, g) == 1.0
    # duplicate predictions cannot match one ground truth twice
    assert map_lite(g * 3, g) == 1.0
    assert map_lite(g, g * 2) == 0.5


def test_map_lite_prefers_full_matching():
    """Matching must not let one strong pair block a weaker pair that frees another match."""
    g1, g2 = BBox(0, 0, 0.5, 1), BBox(0.5, 0, 1, 1)
    p1 = BBox(0, 0, 0.75, 1)  # IoU 2/3 with g1, 1/3 with g2
    p2 = BBox(0.1, 0, 0.5, 1)  # IoU 0.8 with g1, 0 with g2
    preds = [(p1, "x"), (p2, "x")]
    gts = [(g1, "x"), (g2, "x")]
    assert map_lite(preds, gts) == pytest.approx(map_lite_loop(preds, gts), abs=1e-12)


def test_map_lite_corpus_pools_images():
    a = [(BBox(0, 0, 0.5, 0.5), "a b")]
    b = [(BBox(0.5, 0.5, 1, 1), "c d")]
    # matches cannot cross images
    assert map_lite_corpus([(a, a), (a, b)]) == 0.5
    assert map_lite_corpus([]) == 0.0


boxes = st.tuples(st.floats(0, 0.8), st.floats(0, 0.8), st.floats(0.05, 0.2), st.floats(0.05, 0.2)).map(
    lambda t: BBox(t[0], t[1], t[0] + t[2], t[1] + t[3])
)
captions = st.lists(st.sampled_from(WORDS[:5]), min_size=1, max_size=5).map(" ".join)
regions = st.lists(st.tuples(boxes, captions), min_size=0, max_size=3)


@settings(max_examples=100, deadline=None)
@given(regions, regions)
def test_map_lite_matches_exhaustive_oracle(preds, gts):
    assert map_lite(preds, gts) == pytest.approx(map_lite_loop(preds, gts), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(regions, regions, st.data())
def test_map_lite_monotone_in_box_quality(preds, gts, data):
    """A prediction whose IoU with every ground truth weakly rises never lowers the score."""
    assume(preds and gts)
    i = data.draw(st.integers(0, len(preds) - 1))
    j = data.draw(st.integers(0, len(gts) - 1))
    old, new = preds[i][0], gts[j][0]
    assume(all(new.iou(g) >= old.iou(g) for g, _ in gts))
    better = list(preds)
    better[i] = (new, preds[i][1])
    assert map_lite(better, gts) >= map_lite(preds, gts) - 1e-12


@settings(max_examples=100, deadline=None)
@given(regions, regions, st.tuples(boxes, captions))
def test_map_lite_monotone_in_predictions(preds, gts, extra):
    assert map_lite(preds + [extra], gts) >= map_lite(preds, gts) - 1e-12


# ---------------------------------------------------------------------------
# harnesses


class LookupModel:
    """Answers each prompt with a precomputed continuation."""

    def __init__(self, table, fallback):
        self.table = table
        self.fallback = fallback

    def generate_batch(self, prefixes, max_new, stop):
        return [list(self.table.get(tuple(p), self.fallback(max_new)))[:max_new] for p in prefixes]


class RandomModel:
    def __init__(self, vocab_size, seed=0):
        self.v = vocab_size
        self.rng = np.random.default_rng(seed)

    def generate_batch(self, prefixes, max_new, stop):
        out = []
        for _ in prefixes:
            toks = []
            for _ in range(max_new):
                t = int(self.rng.integers(self.v))
                if t == stop:
                    break
                toks.append(t)
            out.append(toks)
        return out


def oracle_model(data, ks, split="val", seed=0):
    v = data.vocab
    table = {}
    for k in ks:
        for task in (SEGMENTATION, CAPTIONING):
            items = data.items(task, split)
            for q, c in zip(items, _contexts(data, items, k, seed)):
                prompt = tuple(data.build(task, q, c, with_target=False).ids)
                sid, j = q
                if task == SEGMENTATION:
                    table[prompt] = data.mask_tokens[q] + [v.tag(EOC)]
                else:
                    _cls, box, cap = data.dataset.scenes[sid].captions[j]
                    table[prompt] = quantize_bbox(box, v) + encode_text(data.bpe, cap) + [v.tag(EOC)]
    return LookupModel(table, lambda n: [])


def test_oracle_model_scores_perfectly(small_run):
    _rc, data, _tk = small_run
    model = oracle_model(data, (2,))
    seg = evaluate_segmentation(model, data, 2)
    assert seg.miou == 1.0 and seg.mae == 0.0 and seg.malformed_rate == 0.0
    cap = evaluate_captioning(model, data, 2)
    assert cap.bleu4 == pytest.approx(1.0) and cap.map_lite == 1.0 and cap.malformed_rate == 0.0
    assert cap.box_iou > 0.98


def test_silent_model_is_all_malformed(small_run):
    _rc, data, _tk = small_run
    model = LookupModel({}, lambda n: [])
    seg = evaluate_segmentation(model, data, 1)
    assert (seg.miou, seg.mae, seg.malformed_rate) == (0.0, 1.0, 1.0)
    cap = evaluate_captioning(model, data, 1)
    assert (cap.bleu4, cap.map_lite, cap.box_iou, cap.malformed_rate) == (0.0, 0.0, 0.0, 1.0)


def test_random_model_is_mostly_malformed(small_run):
    _rc, data, _tk = small_run
    model = RandomModel(data.vocab.total_size)
    assert evaluate_segmentation(model, data, 1).malformed_rate >= 0.9
    assert evaluate_captioning(model, data, 1).malformed_rate >= 0.9


def test_k_sweep_rows_and_report_round_trip(small_run, tmp_path):
    _rc, data, _tk = small_run
    model = oracle_model(data, (1, 2, 3))
    rows = run_evaluation(model, data, ks=(1, 2, 3))
    for metric in ("miou", "mae", "bleu4", "map_lite", "box_iou"):
        assert [r[1] for r in rows if r[2] == metric] == [1, 2, 3]
    write_report(rows, tmp_path / "report.tsv")
    back = read_report(tmp_path / "report.tsv")
    assert [(r["task"], r["k"], r["metric"]) for r in back] == [r[:3] for r in rows]
    assert all(math.isclose(r["value"], row[3], abs_tol=1e-6) for r, row in zip(back, rows))


def test_empty_split_rejected(small_run):
    _rc, data, _tk = small_run
    with pytest.raises(EvalError, match="no val items"):
        evaluate_segmentation(LookupModel({}, lambda n: []), data, 1, max_items=0)


def test_report_format():
    rows = report_rows(SEGMENTATION, 2, SegMetrics(0.5, 0.25, 0.1, 10)) + report_rows(CAPTIONING, 1, CapMetrics(0.3, 0.2, 0.6, 0.0, 4))
    text = format_report(rows)
    assert text.splitlines()[0] == "task\tk\tmetric\tvalue\tmalformed_rate\tn_items"
    assert "segmentation\t2\tmiou\t0.500000\t0.100000\t10" in text
    assert len(text.splitlines()) == 1 + 2 + 3
