"""Command-line entry points: gen-data, pretrain, train, eval, cost.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 compatibility
error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backbone import TaskKind
from .config import ConfigError, RunConfig, load as load_config, serialize
from .decode import DecodeConfig, TSV_HEADER, evaluate
from .frontend import RateMenu
from .pipeline import (CompatibilityError, load_corpus, load_model, make_corpus,
                       pretrain, save_corpus, save_model, train)
from .task_engine import COST_METHODS, count_cost

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_COMPAT = 4


def _log(rec: dict):
    print(json.dumps(rec), flush=True)


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _refuse_overwrite(path: Path, force: bool):
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    _refuse_overwrite(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus = make_corpus(cfg)
    save_corpus(out, corpus, manifest_path=out.with_suffix(".manifest.tsv"))
    _log({"corpus": str(out), "n_utts": len(corpus.utterances),
          "splits": {k: len(v) for k, v in corpus.splits.items()}})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    _refuse_overwrite(out, args.force)
    model = pretrain(cfg, corpus, log=_log)
    save_model(out, model, cfg, step=cfg.optim.pretrain_steps)
    _log({"base_checkpoint": str(out), "base_hash": model.backbone.base_hash()})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    _refuse_overwrite(out, args.force)
    metrics = args.metrics or str(out) + ".metrics.jsonl"
    model = train(cfg, corpus, args.base, out, metrics_path=metrics,
                  resume_path=args.resume, val_every=args.val_every, log=_log)
    _log({"checkpoint": str(out), "metrics": metrics,
          "base_hash": model.backbone.base_hash()})
    return EXIT_OK


def _eval_cells(args, cfg: RunConfig):
    menu = RateMenu(cfg.menu.audio(), cfg.menu.video())
    if args.full_sweep:
        for a in menu.audio_rates:
            yield TaskKind.ASR, a, menu.video_rates[0]
        for v in menu.video_rates:
            yield TaskKind.VSR, menu.audio_rates[0], v
        for a in menu.audio_rates:
            for v in menu.video_rates:
                yield TaskKind.AVSR, a, v
    else:
        yield (TaskKind(args.task), args.audio_rate or menu.audio_rates[0],
               args.video_rate or menu.video_rates[0])


def cmd_eval(args) -> int:
    model, cfg, _ = load_model(args.checkpoint)
    corpus = load_corpus(args.corpus)
    utts = corpus.split(args.split)
    if args.limit:
        utts = utts[:args.limit]
    menu = RateMenu(cfg.menu.audio(), cfg.menu.video())
    pool = [u.audio_raw for u in corpus.split("train")[:64]]
    dc = DecodeConfig(beam_width=args.beam_width or cfg.decode.beam_width,
                      temperature=cfg.decode.temperature,
                      max_new_tokens=cfg.decode.max_new_tokens)
    lines = [TSV_HEADER]
    for task, a, v in _eval_cells(args, cfg):
        row = evaluate(model, utts, task, a, v, dc, snr_db=args.snr,
                       noise_pool=pool, noise_seed=cfg.seed, menu=menu)
        line = row.to_tsv() + ("\toff-menu" if row.off_menu else "")
        lines.append(line)
        print(line, flush=True)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_cost(args) -> int:
    print(f"{'Method':<12}{'Trained models':>16}{'LLM F/B passes':>16}")
    for method in COST_METHODS:
        r = count_cost(method, args.tasks, args.audio_rates, args.video_rates)
        print(f"{r.method:<12}{r.trained_models:>16}{r.llm_passes_per_batch:>16}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omni-avsr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config")
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="stage-0 backbone pretraining")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("train", help="joint ASR/VSR/AVSR training")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--base")
    sp.add_argument("--resume")
    sp.add_argument("--metrics")
    sp.add_argument("--val-every", type=int, default=0)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="decode and score a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--task", default="ASR", choices=[t.value for t in TaskKind])
    sp.add_argument("--audio-rate", type=int)
    sp.add_argument("--video-rate", type=int)
    sp.add_argument("--snr", type=float)
    sp.add_argument("--full-sweep", action="store_true")
    sp.add_argument("--beam-width", type=int)
    sp.add_argument("--limit", type=int)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("cost", help="training-cost accounting table")
    sp.add_argument("--tasks", type=int, default=3)
    sp.add_argument("--audio-rates", type=int, default=2)
    sp.add_argument("--video-rates", type=int, default=2)
    sp.set_defaults(fn=cmd_cost)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except CompatibilityError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_COMPAT
    except (OSError, IOError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
