"""Metrics (MIoU, MAE, BLEU-4, mAP-lite) and the in-context evaluation harnesses."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import generate_batch
from .prompts import (
    CAPTIONING,
    SEGMENTATION,
    IncompleteOutputError,
    parse_captioning,
    parse_segmentation,
)
from .quantizers import BBox, ParseError, QuantizerError
from .vocab import BOT, EOC

IOU_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
BLEU_THRESHOLDS = (0.0, 0.1, 0.2, 0.3, 0.4)


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# segmentation metrics


def _pairs(preds, gts):
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise EvalError(f"{len(preds)} predictions for {len(gts)} ground truths")
    out = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        p, g = np.asarray(p, dtype=bool), np.asarray(g, dtype=bool)
        if p.shape != g.shape:
            raise EvalError(f"pair {i}: shape {p.shape} vs {g.shape}")
        out.append((p, g))
    return out


def mask_iou(pred, gt) -> float:
    p, g = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def miou(preds, gts) -> float:
    pairs = _pairs(preds, gts)
    if not pairs:
        raise EvalError("no masks to score")
    return float(np.mean([mask_iou(p, g) for p, g in pairs]))


def mae(preds, gts) -> float:
    pairs = _pairs(preds, gts)
    if not pairs:
        raise EvalError("no masks to score")
    return float(np.mean([np.mean(p != g) for p, g in pairs]))


# ---------------------------------------------------------------------------
# captioning metrics


def _words(s: str) -> list[str]:
    return s.lower().split()


def _ngrams(words, n):
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def bleu4(pred: str, refs) -> float:
    """Sentence BLEU-4 with uniform weights and the closest-length brevity penalty.

    For n >= 2, an order whose clipped match count is zero is smoothed to
    ``1 / (candidate n-grams + 1)``; a zero unigram match gives 0.
    """
    cand = _words(pred)
    refs = [_words(r) for r in refs]
    if not cand or not refs:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        c_counts = _ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        clipped = sum(min(c, max_ref[g]) for g, c in c_counts.items())
        total = sum(c_counts.values())
        if clipped == 0:
            if n == 1:
                return 0.0
            p = 1.0 / (total + 1)
        else:
            p = clipped / total
        log_p += 0.25 * math.log(p)
    c = len(cand)
    r = min((len(x) for x in refs), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def _matched_counts(preds, gts) -> np.ndarray:
    """Per threshold cell, the size of a maximum one-to-one matching of eligible pairs."""
    cells = np.zeros((len(IOU_THRESHOLDS), len(BLEU_THRESHOLDS)), dtype=np.int64)
    if not preds or not gts:
        return cells
    iou = np.array([[pb.iou(gb) for gb, _ in gts] for pb, _ in preds])
    bl = np.array([[bleu4(pc, [gc]) for _, gc in gts] for _, pc in preds])
    for a, ti in enumerate(IOU_THRESHOLDS):
        for b, tb in enumerate(BLEU_THRESHOLDS):
            ok = (iou >= ti) & (bl >= tb)
            if not ok.any():
                continue
            # prefer high-IoU pairs among maximum matchings
            cost = np.where(ok, -(1.0 + iou), 0.0)
            rows, cols = linear_sum_assignment(cost)
            cells[a, b] = int(ok[rows, cols].sum())
    return cells


def map_lite(preds, gts) -> float:
    """Mean over the IoU x BLEU threshold grid of matched / |gts| for one image."""
    return map_lite_corpus([(preds, gts)])


def map_lite_corpus(groups) -> float:
    """Pooled mAP-lite over images: matches only form within an image."""
    matched = np.zeros((len(IOU_THRESHOLDS), len(BLEU_THRESHOLDS)), dtype=np.int64)
    n_gt = 0
    for preds, gts in groups:
        preds, gts = list(preds), list(gts)
        matched += _matched_counts(preds, gts)
        n_gt += len(gts)
    if n_gt == 0:
        return 0.0
    return float(np.mean(matched / n_gt))


# ---------------------------------------------------------------------------
# harnesses


@dataclass
class SegMetrics:
    miou: float
    mae: float
    malformed_rate: float = 0.0
    n_items: int = 0


@dataclass
class CapMetrics:
    bleu4: float
    map_lite: float
    box_iou: float = 0.0
    malformed_rate: float = 0.0
    n_items: int = 0


def _generate(model, prefixes, max_new, stop):
    if hasattr(model, "generate_batch"):
        return model.generate_batch(prefixes, max_new, stop)
    return generate_batch(model, prefixes, max_new, stop)


def _items(data, task, split, max_items):
    items = data.items(task, split)
    if max_items is not None:
        items = items[:max_items]
    if not items:
        raise EvalError(f"no {split} items for {task}")
    return items


def _contexts(data, items, k, seed):
    rng = np.random.default_rng([seed, k])
    return [data.draw_context(q, k, rng) for q in items]


def evaluate_segmentation(model, data, k: int, split: str = "val", max_items=None, seed: int = 0, batch_size: int = 32, contexts=None) -> SegMetrics:
    """Greedy in-context segmentation of each query; malformed outputs score IoU 0 and MAE 1."""
    items = _items(data, SEGMENTATION, split, max_items)
    ctxs = contexts if contexts is not None else _contexts(data, items, k, seed)
    v, cb = data.vocab, data.codebook
    h, w = data.dataset.size
    t = len(data.image_tokens[0])
    prompts = [data.build(SEGMENTATION, q, c, with_target=False).ids for q, c in zip(items, ctxs)]
    ious, maes, bad = [], [], 0
    for i in range(0, len(items), batch_size):
        outs = _generate(model, prompts[i : i + batch_size], t, v.tag(EOC))
        for q, out in zip(items[i : i + batch_size], outs):
            sid, j = q
            gt = data.dataset.scenes[sid].objects[j].mask
            try:
                pred = parse_segmentation(out, v, cb, h, w)
            except IncompleteOutputError:
                bad += 1
                ious.append(0.0)
                maes.append(1.0)
                continue
            ious.append(mask_iou(pred, gt))
            maes.append(float(np.mean(pred != gt)))
    return SegMetrics(float(np.mean(ious)), float(np.mean(maes)), bad / len(items), len(items))


def evaluate_captioning(model, data, k: int, split: str = "val", max_items=None, seed: int = 0, batch_size: int = 32, contexts=None) -> CapMetrics:
    """Greedy in-context region captioning; truncated or unparsable records score 0."""
    items = _items(data, CAPTIONING, split, max_items)
    ctxs = contexts if contexts is not None else _contexts(data, items, k, seed)
    v = data.vocab
    prompts = [data.build(CAPTIONING, q, c, with_target=False).ids for q, c in zip(items, ctxs)]
    max_new = 6 + data.caption_budget + 1
    # equal-length prompts share a generation batch
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    outputs: list = [None] * len(items)
    for _, idxs in sorted(by_len.items()):
        for s in range(0, len(idxs), batch_size):
            chunk = idxs[s : s + batch_size]
            for i, out in zip(chunk, _generate(model, [prompts[i] for i in chunk], max_new, v.tag(EOC))):
                outputs[i] = out
    bleus, ious, groups, bad = [], [], [], 0
    for q, prompt, out in zip(items, prompts, outputs):
        sid, j = q
        _cls, gt_box, gt_cap = data.dataset.scenes[sid].captions[j]
        bot = len(prompt) - 1 - prompt[::-1].index(v.tag(BOT))
        record = prompt[bot:] + list(out) + ([v.tag(EOC)] if len(out) < max_new else [])
        try:
            rec = parse_captioning(record, v, data.bpe, data.class_names)
            if rec.truncated:
                raise ParseError("no [EOC] within budget", len(record))
        except (ParseError, QuantizerError):
            bad += 1
            bleus.append(0.0)
            ious.append(0.0)
            groups.append(([], [(gt_box, gt_cap)]))
            continue
        bleus.append(bleu4(rec.caption, [gt_cap]))
        ious.append(rec.bbox.iou(gt_box))
        groups.append(([(rec.bbox, rec.caption)], [(gt_box, gt_cap)]))
    return CapMetrics(float(np.mean(bleus)), map_lite_corpus(groups), float(np.mean(ious)), bad / len(items), len(items))


REPORT_HEADER = ("task", "k", "metric", "value", "malformed_rate", "n_items")


def report_rows(task: str, k: int, metrics) -> list[tuple]:
    if isinstance(metrics, SegMetrics):
        names = ("miou", "mae")
    else:
        names = ("bleu4", "map_lite", "box_iou")
    return [(task, k, n, getattr(metrics, n), metrics.malformed_rate, metrics.n_items) for n in names]


def format_report(rows) -> str:
    lines = ["\t".join(REPORT_HEADER)]
    for task, k, metric, value, bad, n in rows:
        lines.append(f"{task}\t{k}\t{metric}\t{value:.6f}\t{bad:.6f}\t{n}")
    return "\n".join(lines) + "\n"


def write_report(rows, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_report(rows))


def read_report(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        row = dict(zip(head, line.split("\t")))
        row["k"] = int(row["k"])
        row["value"] = float(row["value"])
        row["malformed_rate"] = float(row["malformed_rate"])
        row["n_items"] = int(row["n_items"])
        out.append(row)
    return out


def run_evaluation(model, data, ks=(1, 2, 3), tasks=(SEGMENTATION, CAPTIONING), split="val", max_items=None, seed=0) -> list[tuple]:
    rows = []
    for task in tasks:
        for k in ks:
            if task == SEGMENTATION:
                m = evaluate_segmentation(model, data, k, split, max_items, seed)
            else:
                m = evaluate_captioning(model, data, k, split, max_items, seed)
            rows.extend(report_rows(task, k, m))
    return rows


__all__ = [
    "BBox",
    "CapMetrics",
    "SegMetrics",
    "bleu4",
    "evaluate_captioning",
    "evaluate_segmentation",
    "mae",
    "map_lite",
    "map_lite_corpus",
    "miou",
    "run_evaluation",
]
