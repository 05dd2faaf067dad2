"""Losses, optimisation, unmixed multi-task batch sampling and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .model import DecoderModel, MoeStats, save_checkpoint
from .prompts import (
    CAPTIONING,
    SEGMENTATION,
    TASKS,
    CapSample,
    PromptSequence,
    SegSample,
    assemble_captioning,
    assemble_segmentation,
)
from .quantizers import BpeTokenizer, Codebook, quantize_image
from .synthdata import Dataset, PoolError, build_pools, mask_image, sample_in_context
from .vocab import PAD, Vocabulary

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    grad_clip_norm: float = 0.5
    lambda_aux: float = 0.02
    epochs: int = 1
    batch_size: int = 8
    in_context_k: int = 3
    in_context_k_min: int = -1  # >= 0: draw k per batch uniformly from [in_context_k_min, in_context_k]
    l_in_weight: float = 0.0
    seed: int = 0
    task_weights: tuple[float, ...] = (1.0, 1.0)
    dataset_sizes: tuple[int, ...] = ()
    steps_per_epoch: int = 0  # 0: derived from dataset sizes and batch size
    max_steps: int = 0  # 0: no cap
    schedule: str = "constant"
    warmup_steps: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.task_weights = tuple(float(w) for w in self.task_weights)
        self.dataset_sizes = tuple(int(s) for s in self.dataset_sizes)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.lambda_aux < 0:
            raise TrainingError("lambda_aux must be >= 0")
        if self.l_in_weight < 0:
            raise TrainingError("l_in_weight must be >= 0")
        if self.in_context_k < 0:
            raise TrainingError("in_context_k must be >= 0")
        if self.in_context_k_min > self.in_context_k:
            raise TrainingError("in_context_k_min must be <= in_context_k")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise TrainingError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# losses


def output_loss(logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over supervised positions; ``logits[..., t, :]`` scores ``targets[..., t]``."""
    mask = loss_mask.reshape(-1).bool()
    n = int(mask.sum())
    if n == 0:
        raise TrainingError("no supervised positions in batch")
    flat = logits.reshape(-1, logits.shape[-1])[mask]
    return F.cross_entropy(flat, targets.reshape(-1)[mask], reduction="mean")


def aux_loss(stats: list[MoeStats], num_experts: int) -> torch.Tensor:
    """Load-balancing loss ``N * sum_e f_e P_e``, averaged over MoE layers (1 at uniform routing)."""
    if not stats:
        return torch.zeros(())
    per_layer = [num_experts * torch.sum(s.f * s.P) for s in stats]
    return torch.stack(per_layer).mean()


def total_loss(l_out, l_aux, l_in, cfg: TrainConfig):
    return l_out + cfg.lambda_aux * l_aux + cfg.l_in_weight * l_in


# ---------------------------------------------------------------------------
# optimisation


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=cfg.adam_betas,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
        foreach=False,
    )


def clip_gradients(named_params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = []
    for name, p in named_params:
        if p.grad is None:
            continue
        if not torch.all(torch.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
        grads.append(p.grad)
    if not grads:
        return 0.0
    norm = float(torch.sqrt(sum(torch.sum(g.double() ** 2) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


def optimizer_step(model: torch.nn.Module, optimizer: torch.optim.Optimizer, cfg: TrainConfig) -> float:
    norm = clip_gradients(model.named_parameters(), cfg.grad_clip_norm)
    optimizer.step()
    return norm


def learning_rate_at(step: int, total: int, cfg: TrainConfig) -> float:
    lr = cfg.learning_rate
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "cosine" and total > cfg.warmup_steps:
        frac = (step - cfg.warmup_steps) / max(total - cfg.warmup_steps, 1)
        return lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))
    return lr


# ---------------------------------------------------------------------------
# task sampling


def task_probabilities(dataset_sizes) -> np.ndarray:
    sizes = np.asarray(dataset_sizes, dtype=np.float64)
    if sizes.size == 0 or np.any(sizes <= 0):
        raise TrainingError(f"dataset sizes must be positive, got {list(dataset_sizes)}")
    w = np.sqrt(sizes)
    return w / w.sum()


def sample_task(rng: np.random.Generator, dataset_sizes) -> int:
    """Draw a task with probability proportional to the square root of its dataset size.

    Per-task weights ``w_k`` scale the loss in :func:`train`, not the draw.
    """
    p = task_probabilities(dataset_sizes)
    return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), len(p) - 1))


@dataclass
class TokenizedData:
    """A dataset with every image and mask quantized once, plus per-class pools."""

    dataset: Dataset
    vocab: Vocabulary
    codebook: Codebook
    bpe: BpeTokenizer
    caption_budget: int = 32
    image_tokens: list[list[int]] = field(default_factory=list, repr=False)
    mask_tokens: dict = field(default_factory=dict, repr=False)
    train_pool: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        cb, v = self.codebook, self.vocab
        self.image_tokens = [quantize_image(s.image, cb, v) for s in self.dataset.scenes]
        self.mask_tokens = {}
        for sid, s in enumerate(self.dataset.scenes):
            for j, o in enumerate(s.objects):
                self.mask_tokens[(sid, j)] = quantize_image(mask_image(o.mask), cb, v)
        self.train_pool = build_pools(self.dataset.scenes, self.dataset.train_ids)

    @property
    def class_names(self):
        return self.dataset.class_names

    def items(self, task: str, split: str = "train") -> list[tuple[int, int]]:
        """Query items ``(scene id, object index)``; one per object (classes are unique per scene)."""
        return [(sid, j) for sid in self.dataset.split(split) for j in range(len(self.dataset.scenes[sid].objects))]

    def dataset_sizes(self, split: str = "train") -> tuple[int, ...]:
        return tuple(len(self.items(t, split)) for t in TASKS)

    def seg_sample(self, ref) -> SegSample:
        sid, j = ref
        return SegSample(self.image_tokens[sid], self.mask_tokens[(sid, j)])

    def cap_sample(self, ref) -> CapSample:
        sid, j = ref
        cls, bbox, caption = self.dataset.scenes[sid].captions[j]
        return CapSample(self.image_tokens[sid], cls, bbox, caption)

    def build(self, task: str, query, context_refs, with_target: bool, max_positions=None) -> PromptSequence:
        sid, j = query
        scene = self.dataset.scenes[sid]
        if task == SEGMENTATION:
            ctx = [self.seg_sample(r) for r in context_refs]
            target = self.mask_tokens[(sid, j)] if with_target else None
            seq = assemble_segmentation(ctx, self.image_tokens[sid], self.vocab, target, max_positions)
        elif task == CAPTIONING:
            ctx = [self.cap_sample(r) for r in context_refs]
            cls, bbox, caption = scene.captions[j]
            rec = (bbox, caption) if with_target else None
            seq = assemble_captioning(
                ctx, self.image_tokens[sid], cls, self.vocab, self.bpe, self.class_names, rec,
                self.caption_budget, max_positions,
            )
        else:
            raise TrainingError(f"unknown task {task!r}")
        seq.meta.update(query=query, context=list(context_refs))
        return seq

    def draw_context(self, query, k: int, rng: np.random.Generator, pool=None):
        sid, j = query
        cls = self.dataset.scenes[sid].objects[j].class_index
        return sample_in_context(self.train_pool if pool is None else pool, cls, k, rng, exclude=sid)


MAX_POOL_RETRIES = 32


def batch_k(cfg: TrainConfig, rng: np.random.Generator) -> int:
    if cfg.in_context_k_min < 0:
        return cfg.in_context_k
    return int(rng.integers(cfg.in_context_k_min, cfg.in_context_k + 1))


def next_batch(task_id: int, data: TokenizedData, rng: np.random.Generator, batch_size: int, k: int, items=None) -> list[PromptSequence]:
    """One single-task batch of teacher-forced sequences with fresh in-context draws."""
    task = TASKS[task_id]
    items = data.items(task) if items is None else items
    out = []
    for _ in range(batch_size):
        for _attempt in range(MAX_POOL_RETRIES):
            query = items[int(rng.integers(len(items)))]
            try:
                ctx = data.draw_context(query, k, rng)
            except PoolError:
                continue
            break
        else:
            raise TrainingError(f"no class with {k} in-context samples after {MAX_POOL_RETRIES} draws")
        out.append(data.build(task, query, ctx, with_target=True))
    return out


def collate(seqs: list[PromptSequence], pad_id: int):
    n = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), n), pad_id, dtype=torch.long)
    loss = torch.zeros((len(seqs), n), dtype=torch.bool)
    inp = torch.zeros((len(seqs), n), dtype=torch.bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = torch.tensor(s.ids)
        loss[r, : len(s)] = torch.tensor(s.loss_mask)
        inp[r, : len(s)] = torch.tensor(s.input_mask)
    return ids, loss, inp


def batch_losses(model: DecoderModel, seqs: list[PromptSequence], cfg: TrainConfig, pad_id: int):
    ids, loss_mask, inp_mask = collate(seqs, pad_id)
    logits, stats = model(ids[:, :-1])
    targets = ids[:, 1:]
    l_out = output_loss(logits, targets, loss_mask[:, 1:])
    l_in = output_loss(logits, targets, inp_mask[:, 1:]) if cfg.l_in_weight > 0 else torch.zeros(())
    l_aux = aux_loss(stats, model.cfg.num_experts)
    return l_out, l_aux, l_in, stats, logits


@torch.no_grad()
def masked_token_accuracy(model: DecoderModel, seqs: list[PromptSequence], pad_id: int, batch_size: int = 8) -> float:
    was = model.training
    model.eval()
    hit = total = 0
    for i in range(0, len(seqs), batch_size):
        ids, loss_mask, _ = collate(seqs[i : i + batch_size], pad_id)
        logits, _ = model(ids[:, :-1])
        m = loss_mask[:, 1:]
        hit += int((logits.argmax(-1)[m] == ids[:, 1:][m]).sum())
        total += int(m.sum())
    model.train(was)
    return hit / max(total, 1)


# ---------------------------------------------------------------------------
# loop


@dataclass
class StepRecord:
    step: int
    task: str
    l_out: float
    l_aux: float
    grad_norm: float
    tokens_per_s: float
    expert_load: list[list[float]]  # per MoE layer, f_e


@dataclass
class TrainResult:
    steps: list[StepRecord]
    checkpoints: list[Path]


def total_steps(cfg: TrainConfig) -> int:
    per_epoch = cfg.steps_per_epoch
    if per_epoch <= 0:
        per_epoch = max(1, math.ceil(sum(cfg.dataset_sizes) / cfg.batch_size)) if cfg.dataset_sizes else 1
    n = cfg.epochs * per_epoch
    if cfg.max_steps > 0:
        n = min(n, cfg.max_steps)
    return n


def steps_per_epoch(cfg: TrainConfig) -> int:
    if cfg.steps_per_epoch > 0:
        return cfg.steps_per_epoch
    return max(1, math.ceil(sum(cfg.dataset_sizes) / cfg.batch_size)) if cfg.dataset_sizes else 1


def train(
    cfg: TrainConfig,
    model: DecoderModel,
    data: TokenizedData,
    out_dir=None,
    batch_source=None,
    on_step=None,
) -> TrainResult:
    """Sample task, assemble batch, forward, losses, clip, AdamW step; repeat.

    ``batch_source(step, rng) -> (task name, sequences)`` replaces the default
    sampler (used for fixed-sequence overfitting runs).
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    pad_id = data.vocab.tag(PAD) if data is not None else 0
    sizes = cfg.dataset_sizes or (data.dataset_sizes() if data is not None else ())
    if batch_source is None and not sizes:
        raise TrainingError("dataset_sizes unknown")
    if sizes != cfg.dataset_sizes:
        cfg = TrainConfig(**{**{f: getattr(cfg, f) for f in TrainConfig.field_names()}, "dataset_sizes": sizes})
    n_steps = total_steps(cfg)
    per_epoch = steps_per_epoch(cfg)
    optimizer = make_optimizer(model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    ckpts: list[Path] = []
    records: list[StepRecord] = []
    metrics_f = routing_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_f = open(out / "metrics.tsv", "w")
        metrics_f.write("step\ttask\tl_out\tl_aux\tgrad_norm\ttokens_per_s\n")
        routing_f = open(out / "routing.tsv", "w")
        routing_f.write("step\tlayer\t" + "\t".join(f"f_{e}" for e in range(model.cfg.num_experts)) + "\n")

    def checkpoint(tag: str):
        if out is None:
            return
        p = out / "checkpoints" / f"{tag}.ckpt"
        save_checkpoint(p, model, {"tag": tag, "step": len(records)})
        ckpts.append(p)

    model.train()
    try:
        checkpoint("epoch-0")
        for step in range(n_steps):
            t0 = time.perf_counter()
            if batch_source is not None:
                task, seqs = batch_source(step, rng)
            else:
                tid = sample_task(rng, sizes)
                task = TASKS[tid]
                seqs = next_batch(tid, data, rng, cfg.batch_size, batch_k(cfg, rng))
            for g in optimizer.param_groups:
                g["lr"] = learning_rate_at(step, n_steps, cfg)
            l_out, l_aux, l_in, stats, _ = batch_losses(model, seqs, cfg, pad_id)
            w_task = cfg.task_weights[TASKS.index(task)] if task in TASKS and cfg.task_weights else 1.0
            loss = w_task * total_loss(l_out, l_aux, l_in, cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            gnorm = optimizer_step(model, optimizer, cfg)
            dt = time.perf_counter() - t0
            ntok = sum(len(s) for s in seqs)
            rec = StepRecord(
                step, task, l_out.item(), l_aux.item(), gnorm, ntok / dt if dt > 0 else 0.0,
                [[float(x) for x in s.f] for s in stats],
            )
            records.append(rec)
            if metrics_f is not None:
                metrics_f.write(f"{step}\t{task}\t{rec.l_out:.6f}\t{rec.l_aux:.6f}\t{gnorm:.6f}\t{rec.tokens_per_s:.1f}\n")
                for li, f in enumerate(rec.expert_load):
                    routing_f.write(f"{step}\t{li}\t" + "\t".join(f"{x:.6f}" for x in f) + "\n")
            if on_step is not None and on_step(rec) is False:
                break
            if (step + 1) % per_epoch == 0:
                checkpoint(f"epoch-{(step + 1) // per_epoch}")
            if step % 100 == 0:
                log.info("step %d %s l_out=%.4f l_aux=%.4f |g|=%.3f", step, task, rec.l_out, rec.l_aux, gnorm)
        if records:
            checkpoint("final")
    finally:
        if metrics_f is not None:
            metrics_f.close()
            routing_f.close()
    return TrainResult(records, ckpts)
