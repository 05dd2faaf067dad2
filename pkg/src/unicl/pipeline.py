"""End-to-end steps shared by the CLI and the experiment scripts.

Run directory layout::

    <out>/data/                 synthetic dataset (manifest + per-scene files)
    <out>/tokenizers/           codebook.txt, bpe.txt, vocab.txt
    <out>/train/                metrics.tsv, routing.tsv, checkpoints/*.ckpt
    <out>/eval/report.tsv
    <out>/effective_config.txt
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .evaluate import run_evaluation, write_report
from .model import DecoderModel, ModelConfig, load_checkpoint
from .quantizers import BpeTokenizer, Codebook, image_to_patches, train_bpe, train_codebook
from .synthdata import Dataset, build_dataset, caption_alphabet, load_dataset, mask_image, save_dataset
from .training import TokenizedData, TrainResult, train
from .vocab import BIN, IMAGE, SPECIAL, Vocabulary, build_vocabulary

log = logging.getLogger(__name__)


@dataclass
class Tokenizers:
    codebook: Codebook
    bpe: BpeTokenizer
    vocab: Vocabulary


def configure_threads() -> None:
    # one intra-op thread keeps reductions in a fixed order
    torch.set_num_threads(1)


def make_dataset(rc: RunConfig) -> Dataset:
    d = rc.data
    return build_dataset(rc.seed, d.num_train, d.num_val, (d.image_size, d.image_size), d.patch_size)


def fit_tokenizers(rc: RunConfig, ds: Dataset) -> Tokenizers:
    """Codebook over train images and masks; BPE over the train caption corpus."""
    p = ds.patch_size
    chunks = []
    for sid in ds.train_ids:
        s = ds.scenes[sid]
        chunks.append(image_to_patches(s.image, p))
        chunks.extend(image_to_patches(mask_image(o.mask), p) for o in s.objects)
    patches = np.concatenate(chunks).astype(np.float64) / 255.0
    cb = train_codebook(patches, rc.data.codebook_size, rc.data.codebook_iters, rc.seed, p)
    bpe = train_bpe(ds.caption_corpus(), rc.data.bpe_merges, caption_alphabet())
    return Tokenizers(cb, bpe, build_vocabulary(bpe.size, cb.size))


def save_tokenizers(tk: Tokenizers, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "codebook.txt").write_text(tk.codebook.to_text())
    (d / "bpe.txt").write_text(tk.bpe.to_text())
    (d / "vocab.txt").write_text(tk.vocab.to_text())


def load_tokenizers(directory) -> Tokenizers:
    d = Path(directory)
    return Tokenizers(
        Codebook.from_text((d / "codebook.txt").read_text()),
        BpeTokenizer.from_text((d / "bpe.txt").read_text()),
        Vocabulary.from_text((d / "vocab.txt").read_text()),
    )


def tokenize(rc: RunConfig, ds: Dataset, tk: Tokenizers) -> TokenizedData:
    return TokenizedData(ds, tk.vocab, tk.codebook, tk.bpe, rc.data.caption_budget)


def make_model(rc: RunConfig, v: Vocabulary) -> DecoderModel:
    overrides = dict(rc.model)
    if overrides.get("router_input") == "token+segment" and not overrides.get("segment_starts"):
        overrides["segment_starts"] = tuple(v.segment_offsets[k] for k in (IMAGE, BIN, SPECIAL))
    torch.manual_seed(rc.seed)
    return DecoderModel(ModelConfig(vocab_size=v.total_size, **overrides))


def prepare(rc: RunConfig, out=None) -> tuple[TokenizedData, Tokenizers]:
    """Reuse ``out/data`` and ``out/tokenizers`` when present, otherwise build and save them."""
    out = Path(out) if out is not None else None
    if out is not None and (out / "data" / "manifest.txt").is_file():
        ds = load_dataset(out / "data")
    else:
        ds = make_dataset(rc)
        if out is not None:
            save_dataset(ds, out / "data")
    if out is not None and (out / "tokenizers" / "vocab.txt").is_file():
        tk = load_tokenizers(out / "tokenizers")
    else:
        tk = fit_tokenizers(rc, ds)
        if out is not None:
            save_tokenizers(tk, out / "tokenizers")
    return tokenize(rc, ds, tk), tk


def run_training(rc: RunConfig, data: TokenizedData, out=None, on_step=None) -> tuple[DecoderModel, TrainResult]:
    model = make_model(rc, data.vocab)
    train_dir = Path(out) / "train" if out is not None else None
    result = train(rc.train, model, data, train_dir, on_step=on_step)
    return model, result


def latest_checkpoint(out) -> Path:
    ck = Path(out) / "train" / "checkpoints"
    final = ck / "final.ckpt"
    if final.is_file():
        return final
    found = sorted(ck.glob("epoch-*.ckpt"), key=lambda p: int(p.stem.split("-")[1]))
    if not found:
        raise FileNotFoundError(f"no checkpoint under {ck}")
    return found[-1]


def run_eval(rc: RunConfig, model, data: TokenizedData, out=None, ks=None) -> list[tuple]:
    model.eval()
    max_items = rc.data.eval_items or None
    rows = run_evaluation(model, data, ks or rc.data.eval_ks, max_items=max_items, seed=rc.seed)
    if out is not None:
        write_report(rows, Path(out) / "eval" / "report.tsv")
    return rows


def load_model(out) -> DecoderModel:
    model, _extra = load_checkpoint(latest_checkpoint(out))
    return model
