"""Beam-search decoding with elastic rate selection, and WER scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import TaskKind
from .data import VOCAB, add_noise
from .frontend import compress
from .model import OmniModel
from .task_engine import TaskSequence, assemble


class DecodeError(RuntimeError):
    pass


@dataclass
class DecodeConfig:
    beam_width: int = 15
    temperature: float = 0.6
    max_new_tokens: int = 40
    task: TaskKind = TaskKind.ASR
    audio_rate: int = 4
    video_rate: int = 2

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class Hypothesis:
    ids: tuple[int, ...] = ()
    logprob: float = 0.0
    ended: bool = False

    @property
    def score(self) -> float:
        # Length-normalized; empty hypotheses score 0.
        return self.logprob / max(len(self.ids), 1)


def _log_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def beam_search_hypothesis(model: OmniModel, variant, prefix: TaskSequence,
                           cfg: DecodeConfig) -> Hypothesis:
    """Length-normalized beam search over the character vocabulary.

    Per-step log-probs come from logits divided by `temperature`. Hypotheses
    end at eos or `max_new_tokens`; ties break toward lower token ids, then
    shorter hypotheses (lexicographic id comparison). Ended hypotheses stay
    in the beam and compete for width.
    """
    backbone = model.backbone
    beams = [Hypothesis()]
    with T.no_grad():
        for _ in range(cfg.max_new_tokens):
            live = [h for h in beams if not h.ended]
            if not live:
                break
            rows = []
            for h in live:
                ids = np.concatenate([prefix.prompt_ids,
                                      np.array(h.ids, dtype=np.int64)])
                rows.append(T.concat_time([prefix.modality, backbone.embed_ids(ids)]))
            x = backbone.add_positions(T.stack_rows(rows))
            logits = backbone.forward(x, cfg.task, variant)
            candidates = [h for h in beams if h.ended]
            for i, h in enumerate(live):
                logp = _log_softmax(logits.data[i, -1], cfg.temperature)
                order = np.argsort(-logp, kind="stable")[:cfg.beam_width]
                for tok in order:
                    tok = int(tok)
                    candidates.append(Hypothesis(
                        ids=h.ids + (tok,),
                        logprob=h.logprob + float(logp[tok]),
                        ended=(tok == VOCAB.eos)))
            if not candidates:
                raise DecodeError("empty beam")
            candidates.sort(key=lambda h: (-h.score, h.ids))
            beams = candidates[:cfg.beam_width]
    return min(beams, key=lambda h: (-h.score, h.ids))


def beam_search(model: OmniModel, variant, prefix: TaskSequence,
                cfg: DecodeConfig) -> str:
    return VOCAB.detokenize(beam_search_hypothesis(model, variant, prefix, cfg).ids)


def best_score(model: OmniModel, variant, prefix: TaskSequence,
               cfg: DecodeConfig) -> float:
    """Score of the returned hypothesis (used by beam-monotonicity checks)."""
    return beam_search_hypothesis(model, variant, prefix, cfg).score


# -- WER ------------------------------------------------------------------

@dataclass
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    reference_words: int

    @property
    def wer(self) -> float:
        return (self.substitutions + self.deletions + self.insertions) / self.reference_words


def wer(reference: str, hypothesis: str) -> WerBreakdown:
    """Word-level Levenshtein alignment with unit costs.

    Among cost-equal alignments, substitution is preferred over insertion
    over deletion when tracing back.
    """
    ref = reference.split()
    hyp = hypothesis.split()
    if not ref:
        raise ValueError("empty reference: WER undefined")
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            ins = dist[i, j - 1] + 1
            dele = dist[i - 1, j] + 1
            dist[i, j] = min(sub, ins, dele)
    i, j = n, m
    S = D = I = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            I += 1
            j -= 1
        else:
            D += 1
            i -= 1
    return WerBreakdown(S, D, I, n)


# -- corpus-level evaluation ----------------------------------------------

@dataclass
class EvalRow:
    task: str
    audio_rate: int
    video_rate: int
    snr: float | None
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    reference_words: int = 0
    n_utts: int = 0
    off_menu: bool = False

    @property
    def wer(self) -> float:
        return ((self.substitutions + self.deletions + self.insertions)
                / max(self.reference_words, 1))

    def to_tsv(self) -> str:
        snr = "clean" if self.snr is None else f"{self.snr:g}"
        return "\t".join(str(x) for x in (
            self.task, self.audio_rate, self.video_rate, snr,
            f"{self.wer:.6f}", self.substitutions, self.deletions,
            self.insertions, self.reference_words, self.n_utts))


TSV_HEADER = "task\taudio_rate\tvideo_rate\tsnr\twer\tsub\tdel\tins\tn_words\tn_utts"


def build_prefix(model: OmniModel, utt, task: TaskKind, audio_rate: int,
                 video_rate: int, audio_raw: np.ndarray | None = None) -> TaskSequence:
    raw = audio_raw if audio_raw is not None else utt.audio_raw
    Z_a = Z_v = None
    if task in (TaskKind.ASR, TaskKind.AVSR):
        Z_a = model.project(compress(model.encode_audio(raw), audio_rate))
    if task in (TaskKind.VSR, TaskKind.AVSR):
        Z_v = model.project(compress(model.encode_video(utt.video_raw), video_rate))
    return TaskSequence(task=task, utt_id=utt.id,
                        modality=(T.concat_time([Z_a, Z_v]) if task == TaskKind.AVSR
                                  else (Z_a if Z_a is not None else Z_v)),
                        prompt_ids=VOCAB.prompt_ids(task),
                        target_ids=np.array([], dtype=np.int64),
                        segment_map={})


def evaluate(model: OmniModel, utts, task: TaskKind, audio_rate: int, video_rate: int,
             decode_cfg: DecodeConfig, snr_db: float | None = None,
             noise_pool: list[np.ndarray] | None = None,
             noise_seed: int = 0, menu=None) -> EvalRow:
    """Pooled corpus-level WER for one (task, rates, snr) cell.

    Noise, when requested, is applied to the audio channel only. Edit counts
    are pooled over the corpus before dividing.
    """
    off_menu = False
    if menu is not None:
        off_menu = ((task != TaskKind.VSR and audio_rate not in menu.audio_rates)
                    or (task != TaskKind.ASR and video_rate not in menu.video_rates))
    row = EvalRow(task.value, audio_rate, video_rate, snr_db, off_menu=off_menu)
    cfg = DecodeConfig(beam_width=decode_cfg.beam_width,
                       temperature=decode_cfg.temperature,
                       max_new_tokens=decode_cfg.max_new_tokens,
                       task=task, audio_rate=audio_rate, video_rate=video_rate)
    for utt in utts:
        audio_raw = None
        if snr_db is not None and task in (TaskKind.ASR, TaskKind.AVSR):
            rng = np.random.default_rng(
                np.random.SeedSequence([noise_seed, 0x401E, utt.id]))
            audio_raw = add_noise(utt.audio_raw, snr_db, rng, noise_pool)
        with T.no_grad():
            prefix = build_prefix(model, utt, task, audio_rate, video_rate, audio_raw)
        hyp = beam_search(model, model.variant, prefix, cfg)
        b = wer(utt.text, hyp)
        row.substitutions += b.substitutions
        row.deletions += b.deletions
        row.insertions += b.insertions
        row.reference_words += b.reference_words
        row.n_utts += 1
    return row
