"""End-to-end stages: corpus files, stage-0 pretraining, joint training,
checkpointing and resume. The CLI is a thin wrapper over these functions.

All randomness flows from the run seed through named sub-streams (data,
init, rates, noise, order), so every stage is reproducible and training can
resume mid-run from serialized state alone.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import OmniLoraVariant, TaskKind
from .checkpoint import Container, NamedTensor, load_container, save_container
from .config import RunConfig, parse as parse_config, serialize as serialize_config
from .data import Corpus, SyntheticUtterance, VOCAB, generate_corpus
from .decode import DecodeConfig, evaluate
from .frontend import RateMenu
from .model import ModelDims, OmniModel
from .optim import AdamW
from .task_engine import LossWeights, TrainNoise, train_step


class CompatibilityError(RuntimeError):
    pass


def stream_rng(seed: int, name: str, index: int = 0) -> np.random.Generator:
    tag = int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng(np.random.SeedSequence([seed, tag, index]))


# -- corpus files ---------------------------------------------------------

def save_corpus(path, corpus: Corpus, manifest_path=None):
    lines = [f"{u.id}\t{u.text}\t{len(u.audio_raw)}\t{len(u.video_raw)}"
             for u in corpus.utterances]
    meta = {
        "seed": corpus.seed, "d_raw": corpus.d_raw,
        "splits": corpus.splits,
        "texts": {str(u.id): u.text for u in corpus.utterances},
    }
    tensors = [NamedTensor("protos/char", corpus.char_protos),
               NamedTensor("protos/viseme", corpus.viseme_protos)]
    for u in corpus.utterances:
        tensors.append(NamedTensor(f"utt/{u.id}/audio", u.audio_raw))
        tensors.append(NamedTensor(f"utt/{u.id}/video", u.video_raw))
    save_container(path, Container(text=json.dumps(meta, sort_keys=True), tensors=tensors))
    if manifest_path is not None:
        Path(manifest_path).write_text(
            "id\ttext\taudio_frames\tvideo_frames\n" + "\n".join(lines) + "\n")


def load_corpus(path) -> Corpus:
    c = load_container(path)
    meta = json.loads(c.text)
    tm = c.tensor_map()
    corpus = Corpus(seed=meta["seed"], d_raw=meta["d_raw"],
                    char_protos=tm["protos/char"].data,
                    viseme_protos=tm["protos/viseme"].data,
                    splits={k: list(v) for k, v in meta["splits"].items()})
    for uid_str, text in sorted(meta["texts"].items(), key=lambda kv: int(kv[0])):
        uid = int(uid_str)
        corpus.utterances.append(SyntheticUtterance(
            uid, text, tm[f"utt/{uid}/audio"].data, tm[f"utt/{uid}/video"].data))
    return corpus


def make_corpus(cfg: RunConfig) -> Corpus:
    return generate_corpus(cfg.corpus.n_utts,
                           (cfg.corpus.min_words, cfg.corpus.max_words),
                           seed=cfg.seed, d_raw=cfg.corpus.d_raw,
                           jitter=cfg.corpus.jitter)


# -- model checkpoints ----------------------------------------------------

def build_model(cfg: RunConfig, with_adapters: bool) -> OmniModel:
    rng = stream_rng(cfg.seed, "init")
    dims = ModelDims(d_raw=cfg.corpus.d_raw, d_enc=cfg.backbone.d_enc,
                     d_proj=cfg.backbone.d_proj)
    variant = None
    if with_adapters:
        variant = OmniLoraVariant.init(cfg.lora.variant, cfg.backbone_config(),
                                       cfg.lora.rank, cfg.lora.alpha,
                                       stream_rng(cfg.seed, "lora"))
    return OmniModel(cfg.backbone_config(), dims, rng, variant)


def save_model(path, model: OmniModel, cfg: RunConfig, step: int = 0,
               optimizer: AdamW | None = None):
    tensors = [NamedTensor(name, p.data, frozen=not p.requires_grad)
               for name, p in sorted(model.named_parameters().items())]
    if optimizer is not None:
        tensors += [NamedTensor(name, arr)
                    for name, arr in sorted(optimizer.state_tensors().items())]
    save_container(path, Container(text=serialize_config(cfg), step=step,
                                   base_hash=model.backbone.base_hash(),
                                   tensors=tensors))


def load_model(path) -> tuple[OmniModel, RunConfig, Container]:
    c = load_container(path)
    cfg = parse_config(c.text)
    tm = c.tensor_map()
    with_adapters = any(n.startswith("lora/") for n in tm)
    model = build_model(cfg, with_adapters)
    for name, p in model.named_parameters().items():
        if name not in tm:
            raise CompatibilityError(f"checkpoint missing tensor {name}")
        stored = tm[name]
        if stored.data.shape != p.data.shape:
            raise CompatibilityError(
                f"tensor {name}: shape {stored.data.shape} != {p.data.shape}")
        p.data = stored.data.copy()
        p.requires_grad = not stored.frozen
    return model, cfg, c


def check_compatible(cfg_a: RunConfig, cfg_b: RunConfig):
    for attr in ("d_model", "n_layers", "n_heads", "d_ff", "max_len"):
        if getattr(cfg_a.backbone, attr) != getattr(cfg_b.backbone, attr):
            raise CompatibilityError(f"backbone.{attr} differs between config and checkpoint")


# -- stage 0: text-only pretraining --------------------------------------

def _pack_texts(texts: list[str], rng: np.random.Generator, pack_len: int) -> np.ndarray:
    """Concatenate transcripts (eos-separated) into one id sequence of
    length <= pack_len, so every position of the backbone gets trained."""
    ids = [VOCAB.bos]
    while len(ids) < pack_len:
        t = texts[int(rng.integers(len(texts)))]
        ids.extend(VOCAB.tokenize(t))
    return np.array(ids[:pack_len], dtype=np.int64)


def _text_batch(texts: list[str]):
    seqs = [np.concatenate([[VOCAB.bos], VOCAB.tokenize(t)]) for t in texts]
    S = max(len(s) for s in seqs)
    ids = np.full((len(seqs), S), VOCAB.pad, dtype=np.int64)
    targets = np.zeros((len(seqs), S), dtype=np.int64)
    mask = np.zeros((len(seqs), S), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        targets[i, :len(s) - 1] = s[1:]
        mask[i, :len(s) - 1] = True
    return ids, targets, mask


def _lm_loss(model: OmniModel, texts: list[str]):
    ids, targets, mask = _text_batch(texts)
    x = model.backbone.add_positions(model.backbone.embed_ids(ids))
    logits = model.backbone.forward(x, TaskKind.ASR, None)
    loss = T.softmax_cross_entropy(logits, targets, mask)
    return loss, int(mask.sum())


def perplexity(model: OmniModel, texts: list[str]) -> float:
    with T.no_grad():
        loss, n = _lm_loss(model, texts)
    return float(np.exp(loss.item() / n))


def pretrain(cfg: RunConfig, corpus: Corpus, log=None) -> OmniModel:
    """Train the backbone on next-token prediction over transcripts, then
    freeze it as the 'pretrained' base."""
    model = build_model(cfg, with_adapters=False)
    steps = cfg.optim.pretrain_steps
    B = cfg.optim.pretrain_batch_size
    train_texts = [u.text for u in corpus.split("train")]
    valid_texts = [u.text for u in corpus.split("valid")][:64]
    opt = AdamW(model.backbone.base_parameters(), total_steps=steps,
                lr_max=cfg.optim.lr_max, lr_min=cfg.optim.lr_min,
                weight_decay=cfg.optim.weight_decay)
    ppl0 = perplexity(model, valid_texts)
    pack_len = cfg.backbone.max_len
    for t in range(steps):
        order = stream_rng(cfg.seed, "pt_order", t)
        ids = np.stack([_pack_texts(train_texts, order, pack_len) for _ in range(B)])
        targets = np.zeros_like(ids)
        targets[:, :-1] = ids[:, 1:]
        mask = np.ones_like(ids, dtype=bool)
        mask[:, -1] = False
        x = model.backbone.add_positions(model.backbone.embed_ids(ids))
        logits = model.backbone.forward(x, TaskKind.ASR, None)
        loss = T.softmax_cross_entropy(logits, targets, mask)
        n = int(mask.sum())
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log and (t % 100 == 0 or t == steps - 1):
            log({"stage": "pretrain", "step": t, "loss_per_tok": loss.item() / n})
    ppl1 = perplexity(model, valid_texts)
    if log:
        log({"stage": "pretrain", "val_ppl_start": ppl0, "val_ppl_end": ppl1})
    model.backbone.freeze_base()
    return model


# -- joint training -------------------------------------------------------

def train_batches(cfg: RunConfig, train_ids: list[int], step: int) -> list[int]:
    """Deterministic batch of utterance ids for one step (shuffled per epoch)."""
    B = cfg.optim.batch_size
    per_epoch = max(len(train_ids) // B, 1)
    epoch, slot = divmod(step, per_epoch)
    perm = stream_rng(cfg.seed, "order", epoch).permutation(len(train_ids))
    sel = perm[slot * B:(slot + 1) * B]
    return [train_ids[i] for i in sel]


def make_optimizer(cfg: RunConfig, model: OmniModel) -> AdamW:
    return AdamW(model.trainable_parameters(), total_steps=cfg.optim.total_steps,
                 lr_max=cfg.optim.lr_max, lr_min=cfg.optim.lr_min,
                 weight_decay=cfg.optim.weight_decay)


def train(cfg: RunConfig, corpus: Corpus, base_model_path, out_path,
          metrics_path=None, resume_path=None, val_every: int = 0,
          stop_step: int | None = None, log=None) -> OmniModel:
    """Run the joint training loop from a frozen base (or resume), saving a
    full checkpoint (weights + optimizer state) at the end."""
    menu = RateMenu(cfg.menu.audio(), cfg.menu.video())
    weights = LossWeights(cfg.weights.asr, cfg.weights.vsr, cfg.weights.avsr)
    noise = TrainNoise(prob=cfg.optim.noise_prob,
                       snr_choices=tuple(float(s) for s in
                                         cfg.optim.noise_snrs.split(",")),
                       jitter_audio=cfg.optim.noise_jitter_audio,
                       jitter_video=cfg.optim.noise_jitter_video)
    if resume_path is not None:
        model, ckpt_cfg, container = load_model(resume_path)
        check_compatible(cfg, ckpt_cfg)
        opt = make_optimizer(cfg, model)
        opt.load_state_tensors({t.name: t.data for t in container.tensors
                                if t.name.startswith("opt/")})
        start = container.step
    else:
        base_model, base_cfg, base_container = load_model(base_model_path)
        check_compatible(cfg, base_cfg)
        model = build_model(cfg, with_adapters=True)
        for name, p in model.backbone.base_parameters().items():
            p.data = base_model.backbone.base_parameters()[name].data.copy()
        model.backbone.freeze_base()
        opt = make_optimizer(cfg, model)
        start = 0
    by_id = {u.id: u for u in corpus.utterances}
    train_ids = corpus.splits["train"]
    pool = [u.audio_raw for u in corpus.split("train")[:64]]
    end = stop_step if stop_step is not None else cfg.optim.total_steps
    metrics_f = open(metrics_path, "a") if metrics_path else None
    try:
        for t in range(start, end):
            batch = [by_id[i] for i in train_batches(cfg, train_ids, t)]
            m = train_step(model, batch, menu, weights, opt,
                           rate_rng=stream_rng(cfg.seed, "rates", t),
                           noise=noise, noise_rng=stream_rng(cfg.seed, "noise", t),
                           noise_pool=pool)
            rec = m.to_json_dict()
            if metrics_f:
                metrics_f.write(json.dumps(rec) + "\n")
            if log and (t % 100 == 0 or t == cfg.optim.total_steps - 1):
                log(rec)
            if val_every and (t + 1) % val_every == 0:
                for row in validation_rows(cfg, model, corpus):
                    vrec = {"step": t + 1, "val_task": row.task, "val_wer": row.wer,
                            "audio_rate": row.audio_rate, "video_rate": row.video_rate}
                    if metrics_f:
                        metrics_f.write(json.dumps(vrec) + "\n")
                    if log:
                        log(vrec)
    finally:
        if metrics_f:
            metrics_f.close()
    if out_path is not None:
        save_model(out_path, model, cfg, step=end, optimizer=opt)
    return model


def validation_rows(cfg: RunConfig, model: OmniModel, corpus: Corpus, n_utts: int = 16):
    """Quick greedy-decode WER at the menu's extreme rate pairs."""
    utts = corpus.split("valid")[:n_utts]
    menu = RateMenu(cfg.menu.audio(), cfg.menu.video())
    dc = DecodeConfig(beam_width=1, temperature=cfg.decode.temperature,
                      max_new_tokens=cfg.decode.max_new_tokens)
    rows = []
    for a, v in ((menu.audio_rates[0], menu.video_rates[0]),
                 (menu.audio_rates[-1], menu.video_rates[-1])):
        for task in TaskKind:
            rows.append(evaluate(model, utts, task, a, v, dc, menu=menu))
    return rows
