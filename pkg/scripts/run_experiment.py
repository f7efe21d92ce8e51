"""End-to-end experiment driver: corpus -> pretrain -> joint training ->
elastic-inference WER grid -> babble-noise SNR sweep -> cost table.

Everything is reproducible from the single run seed. Stages are skipped when
their output file already exists (pass --force to redo).

Usage:
    python scripts/run_experiment.py --workdir runs/demo --seed 1
    python scripts/run_experiment.py --workdir runs/demo --config my.cfg
"""
import argparse
import json
import sys
import time
from pathlib import Path

from omni_avsr.backbone import TaskKind
from omni_avsr.config import RunConfig, load as load_config, save as save_config
from omni_avsr.decode import DecodeConfig, TSV_HEADER, evaluate
from omni_avsr.frontend import RateMenu
from omni_avsr.pipeline import (load_corpus, load_model, make_corpus, pretrain,
                                save_corpus, save_model, train)
from omni_avsr.task_engine import COST_METHODS, count_cost

SNR_SWEEP_DB = (5.0, 0.0, -5.0)


def log(rec):
    print(json.dumps(rec) if isinstance(rec, dict) else rec, flush=True)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--config", help="config file; defaults otherwise")
    ap.add_argument("--seed", type=int, help="override config seed")
    ap.add_argument("--force", action="store_true", help="redo existing stages")
    ap.add_argument("--eval-limit", type=int, default=0,
                    help="cap test utterances per cell (0 = all)")
    args = ap.parse_args(argv)

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()

    wd = Path(args.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    save_config(wd / "run.cfg", cfg)

    corpus_path = wd / "corpus.omni"
    if args.force or not corpus_path.exists():
        t0 = time.time()
        corpus = make_corpus(cfg)
        save_corpus(corpus_path, corpus, manifest_path=wd / "corpus.manifest.tsv")
        log({"stage": "gen-data", "n_utts": len(corpus.utterances),
             "seconds": round(time.time() - t0, 1)})
    corpus = load_corpus(corpus_path)

    base_path = wd / "base.omni"
    if args.force or not base_path.exists():
        t0 = time.time()
        base = pretrain(cfg, corpus, log=log)
        save_model(base_path, base, cfg)
        log({"stage": "pretrain", "seconds": round(time.time() - t0, 1)})

    ckpt_path = wd / "model.omni"
    if args.force or not ckpt_path.exists():
        t0 = time.time()
        train(cfg, corpus, base_path, ckpt_path,
              metrics_path=wd / "train.metrics.jsonl", log=log)
        log({"stage": "train", "seconds": round(time.time() - t0, 1)})

    model, cfg, _ = load_model(ckpt_path)
    utts = corpus.split("test")
    if args.eval_limit:
        utts = utts[:args.eval_limit]
    menu = RateMenu(cfg.menu.audio(), cfg.menu.video())
    dc = DecodeConfig(beam_width=cfg.decode.beam_width,
                      temperature=cfg.decode.temperature,
                      max_new_tokens=cfg.decode.max_new_tokens)

    # elastic inference: one trained model, every task x rate combination
    lines = [TSV_HEADER]
    cells = ([(TaskKind.ASR, a, menu.video_rates[0]) for a in menu.audio_rates]
             + [(TaskKind.VSR, menu.audio_rates[0], v) for v in menu.video_rates]
             + [(TaskKind.AVSR, a, v) for a in menu.audio_rates
                for v in menu.video_rates])
    for task, a, v in cells:
        row = evaluate(model, utts, task, a, v, dc, menu=menu)
        lines.append(row.to_tsv())
        log({"task": task.value, "audio_rate": a, "video_rate": v,
             "wer": round(row.wer, 4)})
    (wd / "wer_grid.tsv").write_text("\n".join(lines) + "\n")

    # babble-noise robustness: audio-only vs audio-visual under noise
    pool = [u.audio_raw for u in corpus.split("train")[:64]]
    lines = [TSV_HEADER + "\tsnr_db"]
    a, v = menu.audio_rates[0], menu.video_rates[0]
    for snr in SNR_SWEEP_DB:
        for task in (TaskKind.ASR, TaskKind.AVSR):
            row = evaluate(model, utts, task, a, v, dc, snr_db=snr,
                           noise_pool=pool, noise_seed=cfg.seed, menu=menu)
            lines.append(row.to_tsv() + f"\t{snr}")
            log({"snr_db": snr, "task": task.value, "wer": round(row.wer, 4)})
    (wd / "wer_noise.tsv").write_text("\n".join(lines) + "\n")

    # training-cost accounting at this run's menu size
    n_a, n_v = len(menu.audio_rates), len(menu.video_rates)
    for method in COST_METHODS:
        r = count_cost(method, 3, n_a, n_v)
        log({"method": method, "trained_models": r.trained_models,
             "llm_passes_per_batch": r.llm_passes_per_batch})
    return 0


if __name__ == "__main__":
    sys.exit(main())
