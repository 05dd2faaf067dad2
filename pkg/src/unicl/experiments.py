"""Desk-scale experiments: reference run, overfit check, balancing study, determinism."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import RunConfig, build_config, config_text, write_snapshot
from .evaluate import read_report
from .model import checkpoint_bytes
from .prompts import TASKS
from .training import TrainConfig, masked_token_accuracy, train
from .vocab import PAD

# Desk batches are tiny and the budget is an hour, so the reference run uses a
# higher peak rate than the large-batch default (1e-4) and draws k per batch:
# short k=1 sequences teach the patch-lookup pattern much sooner than k=3 alone.
REFERENCE = {
    "learning_rate": "1e-3",
    "schedule": "cosine",
    "warmup_steps": "100",
    "epochs": "6",
    "in_context_k_min": "1",
}

PACKAGE_DIR = Path(__file__).resolve().parent


def source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(PACKAGE_DIR.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def run_key(rc: RunConfig) -> str:
    return hashlib.sha256((config_text(rc) + source_digest()).encode()).hexdigest()[:16]


def reference_config(**overrides) -> RunConfig:
    return build_config({**REFERENCE, **{k: str(v) for k, v in overrides.items()}})


@dataclass
class RunSummary:
    out: Path
    train_seconds: float
    eval_seconds: float
    report: list[dict]

    def metric(self, task: str, k: int, name: str) -> dict:
        for row in self.report:
            if row["task"] == task and row["k"] == k and row["metric"] == name:
                return row
        raise KeyError((task, k, name))


def full_run(rc: RunConfig, out, log=print) -> RunSummary:
    """Data, tokenizers, training and evaluation into ``out``; timings in ``out/timing.json``."""
    out = Path(out)
    P.configure_threads()
    write_snapshot(rc, out)
    data, _tk = P.prepare(rc, out)
    t0 = time.perf_counter()

    def on_step(rec):
        if rec.step % 200 == 0:
            log(f"step {rec.step} {rec.task} l_out={rec.l_out:.4f} l_aux={rec.l_aux:.4f} ({time.perf_counter() - t0:.0f}s)")

    model, _res = P.run_training(rc, data, out, on_step)
    t1 = time.perf_counter()
    P.run_eval(rc, model, data, out)
    t2 = time.perf_counter()
    timing = {"train_seconds": t1 - t0, "eval_seconds": t2 - t1}
    (out / "timing.json").write_text(json.dumps(timing, indent=1))
    return RunSummary(out, t1 - t0, t2 - t1, read_report(out / "eval" / "report.tsv"))


def cached_run(rc: RunConfig, cache_root, log=print) -> RunSummary:
    """Reuse a finished run whose config and package source are unchanged."""
    out = Path(cache_root) / f"run-{run_key(rc)}"
    done = out / "timing.json"
    if done.is_file() and (out / "eval" / "report.tsv").is_file():
        timing = json.loads(done.read_text())
        return RunSummary(out, timing["train_seconds"], timing["eval_seconds"], read_report(out / "eval" / "report.tsv"))
    return full_run(rc, out, log)


# ---------------------------------------------------------------------------
# overfit


@dataclass
class OverfitResult:
    accuracy: float
    steps: int
    seconds: float
    history: list[tuple[int, float]]


def overfit(seed: int = 0, num_sequences: int = 32, max_steps: int = 2000, target: float = 0.95, check_every: int = 25, k: int = 1, learning_rate: float = 1e-3) -> OverfitResult:
    """Train on a fixed mixed-task set until masked-token accuracy exceeds ``target``.

    Half the sequences are segmentation and half captioning; each step sees all
    sequences of one task (batches stay single-task), alternating tasks.
    """
    rc = build_config({"num_train": "200", "num_val": "0", "seed": str(seed)})
    P.configure_threads()
    data, tk = P.prepare(rc)
    rng = np.random.default_rng(seed)
    per_task = {}
    for task in TASKS:
        items = data.items(task)
        picks = rng.choice(len(items), size=num_sequences // 2, replace=False)
        per_task[task] = [data.build(task, items[i], data.draw_context(items[i], k, rng), True) for i in picks]
    every = [s for task in TASKS for s in per_task[task]]
    pad = tk.vocab.tag(PAD)

    cfg = TrainConfig(learning_rate=learning_rate, max_steps=max_steps, epochs=max_steps, steps_per_epoch=1, seed=seed, dataset_sizes=(1, 1))
    model = P.make_model(rc, tk.vocab)
    history: list[tuple[int, float]] = []
    state = {"acc": 0.0}

    def source(step, _rng):
        task = TASKS[step % 2]
        return task, per_task[task]

    def on_step(rec):
        if (rec.step + 1) % check_every:
            return True
        acc = masked_token_accuracy(model, every, pad)
        history.append((rec.step + 1, acc))
        state["acc"] = acc
        return acc <= target

    t0 = time.perf_counter()
    result = train(cfg, model, None, batch_source=source, on_step=on_step)
    return OverfitResult(state["acc"], len(result.steps), time.perf_counter() - t0, history)


# ---------------------------------------------------------------------------
# load balancing


def load_spread(expert_load: list[list[float]]) -> float:
    """max_e f_e - min_e f_e, averaged over MoE layers."""
    return float(np.mean([max(f) - min(f) for f in expert_load]))


def balance_run(lambda_aux: float, seed: int = 0, steps: int = 400, tail: int = 100, k: int = 1) -> tuple[float, list[float]]:
    """Mean load spread over the last ``tail`` steps of a short training run."""
    rc = build_config({
        "num_train": "400", "num_val": "0", "seed": str(seed), "learning_rate": "1e-3",
        "lambda_aux": repr(float(lambda_aux)), "max_steps": str(steps), "epochs": "100",
        "in_context_k": str(k),
    })
    P.configure_threads()
    data, tk = P.prepare(rc)
    model = P.make_model(rc, tk.vocab)
    res = train(rc.train, model, data)
    spreads = [load_spread(r.expert_load) for r in res.steps]
    return float(np.mean(spreads[-tail:])), spreads


# ---------------------------------------------------------------------------
# determinism


def determinism_run(out, seed: int = 0, steps: int = 30) -> dict[str, bytes]:
    """A short full pipeline; returns the primary output bytes keyed by name."""
    rc = build_config({
        "num_train": "120", "num_val": "20", "seed": str(seed), "max_steps": str(steps),
        "epochs": "100", "steps_per_epoch": "10", "eval_items": "12", "eval_ks": "1,3",
    })
    out = Path(out)
    P.configure_threads()
    write_snapshot(rc, out)
    data, _tk = P.prepare(rc, out)
    model, res = P.run_training(rc, data, out)
    P.run_eval(rc, model, data, out)
    # tokens/s is wall-clock and excluded
    metrics = ["\t".join(line.split("\t")[:5]) for line in (out / "train" / "metrics.tsv").read_text().splitlines()]
    files = {"report": (out / "eval" / "report.tsv").read_bytes(), "metrics": "\n".join(metrics).encode()}
    for p in res.checkpoints:
        files[p.name] = p.read_bytes()
    files["model"] = checkpoint_bytes(model)
    return files
