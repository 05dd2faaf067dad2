"""Command-line entry point: ``python -m unicl <command> [flags]``.

Exit status: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import ConfigError, RunConfig, config_keys, load_config, write_snapshot
from .evaluate import format_report, mask_iou
from .model import generate_batch
from .prompts import CAPTIONING, SEGMENTATION, parse_captioning, parse_segmentation, render_tokens
from .synthdata import directory_digest, save_dataset
from .vocab import BOT, EOC

COMMANDS = ("build-data", "train-tokenizers", "train", "eval", "infer", "inspect-tokens")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--out", metavar="DIR", default="run", help="run directory (default: run)")
    g = p.add_argument_group("config overrides")
    for key, (section, _f, _hint) in config_keys().items():
        flag = "--" + key.replace("_", "-")
        g.add_argument(flag, dest=f"cfg_{key}", metavar="V", help=f"{section} setting")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="unicl", description="Synthetic in-context segmentation and region captioning.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    sub.add_parser("build-data", parents=[common], help="render the synthetic dataset into OUT/data")
    sub.add_parser("train-tokenizers", parents=[common], help="fit codebook and BPE into OUT/tokenizers")
    sub.add_parser("train", parents=[common], help="train the model into OUT/train")
    ev = sub.add_parser("eval", parents=[common], help="write OUT/eval/report.tsv")
    ev.add_argument("--checkpoint", metavar="PATH", help="default: latest under OUT/train/checkpoints")
    for name, helptext in (("infer", "decode one query"), ("inspect-tokens", "print one assembled sequence")):
        q = sub.add_parser(name, parents=[common], help=helptext)
        q.add_argument("--task", choices=("segmentation", "captioning"), default="segmentation")
        q.add_argument("--scene-id", type=int, required=True)
        q.add_argument("--class", dest="class_name", required=True, help="class name or index")
        q.add_argument("--k", type=int, default=1, help="number of in-context samples")
        if name == "infer":
            q.add_argument("--checkpoint", metavar="PATH")
    return parser


def _run_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def _need(path: Path, what: str, hint: str) -> None:
    if not path.exists():
        raise FileNotFoundError(f"{what} missing at {path}; run `{hint}` first")


def _load_data(rc: RunConfig, out: Path):
    _need(out / "data" / "manifest.txt", "dataset", "unicl build-data")
    _need(out / "tokenizers" / "vocab.txt", "tokenizers", "unicl train-tokenizers")
    return P.prepare(rc, out)


def _query(data, scene_id: int, class_arg: str):
    ds = data.dataset
    if not 0 <= scene_id < len(ds.scenes):
        raise ValueError(f"scene id {scene_id} outside [0, {len(ds.scenes)})")
    names = list(ds.class_names)
    if class_arg.isdigit():
        cls = int(class_arg)
        if cls >= len(names):
            raise ValueError(f"class index {cls} outside [0, {len(names)})")
    elif class_arg in names:
        cls = names.index(class_arg)
    else:
        raise ValueError(f"unknown class {class_arg!r}")
    for j, o in enumerate(ds.scenes[scene_id].objects):
        if o.class_index == cls:
            return (scene_id, j), cls
    present = [names[o.class_index] for o in ds.scenes[scene_id].objects]
    raise ValueError(f"class {names[cls]!r} not in scene {scene_id} (present: {present})")


def _mask_art(mask: np.ndarray) -> str:
    return "\n".join("".join("#" if x else "." for x in row) for row in mask)


def cmd_build_data(rc, out: Path) -> None:
    ds = P.make_dataset(rc)
    save_dataset(ds, out / "data")
    print(f"wrote {len(ds.scenes)} scenes to {out / 'data'} sha256={directory_digest(out / 'data')}")


def cmd_train_tokenizers(rc, out: Path) -> None:
    _need(out / "data" / "manifest.txt", "dataset", "unicl build-data")
    from .synthdata import load_dataset

    tk = P.fit_tokenizers(rc, load_dataset(out / "data"))
    P.save_tokenizers(tk, out / "tokenizers")
    print(f"codebook {tk.codebook.size} entries, bpe {tk.bpe.size} tokens, vocab {tk.vocab.total_size}")


def cmd_train(rc, out: Path) -> None:
    data, _tk = _load_data(rc, out)
    _model, result = P.run_training(rc, data, out)
    last = result.steps[-1] if result.steps else None
    summary = f"l_out={last.l_out:.4f} l_aux={last.l_aux:.4f}" if last else "no steps"
    print(f"{len(result.steps)} steps, {summary}; checkpoints in {out / 'train' / 'checkpoints'}")


def _model(args, out: Path):
    from .model import load_checkpoint

    path = Path(args.checkpoint) if args.checkpoint else P.latest_checkpoint(out)
    model, _ = load_checkpoint(path)
    model.eval()
    return model


def cmd_eval(rc, out: Path, args) -> None:
    data, _tk = _load_data(rc, out)
    rows = P.run_eval(rc, _model(args, out), data, out)
    sys.stdout.write(format_report(rows))


def _sequence(data, args, rc, with_target: bool):
    query, _cls = _query(data, args.scene_id, args.class_name)
    rng = np.random.default_rng([rc.seed, args.k])
    ctx = data.draw_context(query, args.k, rng)
    return query, data.build(args.task, query, ctx, with_target=with_target)


def cmd_infer(rc, out: Path, args) -> None:
    data, _tk = _load_data(rc, out)
    model = _model(args, out)
    query, seq = _sequence(data, args, rc, with_target=False)
    v = data.vocab
    sid, j = query
    scene = data.dataset.scenes[sid]
    if args.task == SEGMENTATION:
        t = len(data.image_tokens[sid])
        gen = generate_batch(model, [seq.ids], t, v.tag(EOC))[0]
        h, w = data.dataset.size
        mask = parse_segmentation(gen, v, data.codebook, h, w)
        print(_mask_art(mask))
        print(f"iou {mask_iou(mask, scene.objects[j].mask):.4f}")
    else:
        max_new = 6 + data.caption_budget + 1
        gen = generate_batch(model, [seq.ids], max_new, v.tag(EOC))[0]
        bot = len(seq.ids) - 1 - seq.ids[::-1].index(v.tag(BOT))
        rec = parse_captioning(seq.ids[bot:] + gen + [v.tag(EOC)], v, data.bpe, data.class_names)
        _c, gt_box, gt_cap = scene.captions[j]
        print(f"category\t{data.class_names[rec.category]}")
        print("bbox\t" + " ".join(f"{x:.3f}" for x in rec.bbox.as_tuple()))
        print(f"caption\t{rec.caption}")
        print(f"truth\t{' '.join(f'{x:.3f}' for x in gt_box.as_tuple())}\t{gt_cap}")
        print(f"box_iou\t{rec.bbox.iou(gt_box):.4f}")


def cmd_inspect(rc, out: Path, args) -> None:
    data, tk = _load_data(rc, out)
    _query_ref, seq = _sequence(data, args, rc, with_target=True)
    sys.stdout.write(render_tokens(seq, data.vocab, tk.bpe))


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if not e.code else 1
    try:
        rc = _run_config(args)
    except ConfigError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    out = Path(args.out)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    P.configure_threads()
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_snapshot(rc, out, f"effective_config.{args.command}.txt")
        if args.command == "build-data":
            cmd_build_data(rc, out)
        elif args.command == "train-tokenizers":
            cmd_train_tokenizers(rc, out)
        elif args.command == "train":
            cmd_train(rc, out)
        elif args.command == "eval":
            cmd_eval(rc, out, args)
        elif args.command == "infer":
            cmd_infer(rc, out, args)
        else:
            cmd_inspect(rc, out, args)
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"error in {type(e).__module__}.{type(e).__qualname__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
