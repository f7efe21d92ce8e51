"""Rate sampling, per-task sequence assembly, the joint loss, training steps,
and the training-cost accounting for the four methods compared.

The joint objective is a weighted sum of the three per-task autoregressive
losses, computed with exactly one backbone pass per task per step. One
(audio_rate, video_rate) pair is drawn per step and the compressed streams
are shared between the single-modality and audio-visual sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, OmniLoraVariant, TaskKind
from .data import VOCAB, add_noise
from .frontend import RateMenu, compress
from .model import OmniModel
from .optim import AdamW
from .tensor import Tensor


class AssemblyError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


@dataclass
class TaskSequence:
    task: TaskKind
    utt_id: int
    modality: Tensor            # (L_mod, d_model) projected tokens, audio first
    prompt_ids: np.ndarray
    target_ids: np.ndarray      # transcription ids incl. trailing eos
    segment_map: dict[str, tuple[int, int]]

    @property
    def length(self) -> int:
        return self.modality.shape[0] + len(self.prompt_ids) + len(self.target_ids)

    @property
    def loss_mask(self) -> np.ndarray:
        m = np.zeros(self.length, dtype=bool)
        a, b = self.segment_map["target"]
        m[a:b] = True
        return m


@dataclass
class LossWeights:
    asr: float = 1.0
    vsr: float = 1.5
    avsr: float = 1.0

    def __post_init__(self):
        if min(self.asr, self.vsr, self.avsr) < 0 or max(self.asr, self.vsr, self.avsr) == 0:
            raise ValueError("weights must be nonnegative with at least one positive")

    def get(self, task: TaskKind) -> float:
        return {TaskKind.ASR: self.asr, TaskKind.VSR: self.vsr,
                TaskKind.AVSR: self.avsr}[task]


@dataclass
class CostReport:
    method: str
    trained_models: int
    llm_passes_per_batch: int


def sample_rates(rng: np.random.Generator, menu: RateMenu) -> tuple[int, int]:
    """Independent uniform draws from the audio and video rate menus."""
    a = menu.audio_rates[int(rng.integers(len(menu.audio_rates)))]
    v = menu.video_rates[int(rng.integers(len(menu.video_rates)))]
    return a, v


def assemble(task: TaskKind, Z_a: Tensor | None, Z_v: Tensor | None,
             prompt: np.ndarray, target: np.ndarray, utt_id: int = -1) -> TaskSequence:
    """Concatenate modality tokens, prompt and target into one task sequence.

    Ordering: ASR=[audio, prompt, target]; VSR=[video, ...]; AVSR has audio
    first then video. Off-task modalities are ignored entirely.
    """
    if task == TaskKind.ASR:
        if Z_a is None:
            raise AssemblyError("ASR requires an audio segment")
        mod, segs = Z_a, {"audio": (0, Z_a.shape[0])}
    elif task == TaskKind.VSR:
        if Z_v is None:
            raise AssemblyError("VSR requires a video segment")
        mod, segs = Z_v, {"video": (0, Z_v.shape[0])}
    else:
        if Z_a is None or Z_v is None:
            raise AssemblyError("AVSR requires both audio and video segments")
        mod = T.concat_time([Z_a, Z_v])
        segs = {"audio": (0, Z_a.shape[0]),
                "video": (Z_a.shape[0], Z_a.shape[0] + Z_v.shape[0])}
    L = mod.shape[0]
    P = len(prompt)
    segs["prompt"] = (L, L + P)
    segs["target"] = (L + P, L + P + len(target))
    return TaskSequence(task=task, utt_id=utt_id, modality=mod,
                        prompt_ids=np.asarray(prompt), target_ids=np.asarray(target),
                        segment_map=segs)


def batch_forward(backbone: Backbone, variant: OmniLoraVariant | None,
                  seqs: list[TaskSequence]) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Embed, pad and run a batch of same-task sequences in one backbone pass.

    Returns (logits (B,S,V), shifted targets (B,S), shifted mask (B,S)):
    position p's logits are scored against the token at p+1 when that token
    belongs to the target span.
    """
    task = seqs[0].task
    if any(s.task != task for s in seqs):
        raise ConsistencyError("mixed tasks in one batch")
    S = max(s.length for s in seqs)
    rows = []
    targets = np.zeros((len(seqs), S), dtype=np.int64)
    mask = np.zeros((len(seqs), S), dtype=bool)
    for i, s in enumerate(seqs):
        ids = np.concatenate([s.prompt_ids, s.target_ids,
                              np.full(S - s.length, VOCAB.pad, dtype=np.int64)])
        row = T.concat_time([s.modality, backbone.embed_ids(ids)])
        rows.append(row)
        a, b = s.segment_map["target"]
        full = np.concatenate([np.zeros(s.modality.shape[0], dtype=np.int64), ids])
        targets[i, a - 1:b - 1] = full[a:b]
        mask[i, a - 1:b - 1] = True
    x = backbone.add_positions(T.stack_rows(rows))
    logits = backbone.forward(x, task, variant)
    return logits, targets, mask


def task_loss(backbone: Backbone, variant: OmniLoraVariant | None,
              seqs: list[TaskSequence]) -> Tensor:
    logits, targets, mask = batch_forward(backbone, variant, seqs)
    return T.softmax_cross_entropy(logits, targets, mask)


def omni_loss(backbone: Backbone, variant: OmniLoraVariant | None,
              triple: dict[TaskKind, list[TaskSequence]],
              weights: LossWeights) -> tuple[Tensor, dict[TaskKind, float]]:
    """Weighted sum of per-task losses; exactly one backbone pass per task."""
    ids = {tuple(s.utt_id for s in seqs) for seqs in triple.values()}
    if len(ids) != 1:
        raise ConsistencyError(f"triple mixes utterances: {ids}")
    total: Tensor | None = None
    per_task: dict[TaskKind, float] = {}
    for task in (TaskKind.ASR, TaskKind.VSR, TaskKind.AVSR):
        loss = task_loss(backbone, variant, triple[task])
        per_task[task] = loss.item()
        term = T.scale(loss, weights.get(task))
        total = term if total is None else T.add(total, term)
    return total, per_task


# -- cost accounting ------------------------------------------------------

COST_METHODS = ("LlamaAVSR", "LlamaMTSK", "LlamaMT", "Omni")


def count_cost(method: str, T_tasks: int, C_A: int, C_V: int) -> CostReport:
    """Trained-model and per-batch LLM pass counts for each training scheme."""
    if min(T_tasks, C_A, C_V) < 1:
        raise ValueError("T, C_A, C_V must all be >= 1")
    full = C_A + C_V + C_A * C_V
    if method == "LlamaAVSR":
        return CostReport(method, full, full)
    if method == "LlamaMTSK":
        return CostReport(method, T_tasks, full)
    if method == "LlamaMT":
        return CostReport(method, C_A * C_V, T_tasks * C_A * C_V)
    if method == "Omni":
        return CostReport(method, 1, T_tasks)
    raise ValueError(f"unknown method {method!r}")


# -- training step --------------------------------------------------------

@dataclass
class TrainNoise:
    """Optional input augmentation applied during training: babble noise on
    the audio channel, and gaussian re-jitter of the raw streams (emulates a
    fresh render of the same utterance, countering overfit to the one jitter
    instantiation stored in the corpus). Audio jitter above the corpus level
    makes audio slightly unreliable at every step, which pushes the
    audio-visual task to actually integrate the video channel."""
    prob: float = 0.0
    snr_choices: tuple[float, ...] = (5.0, 0.0, -5.0)
    jitter_audio: float = 0.0
    jitter_video: float = 0.0


@dataclass
class StepMetrics:
    step: int
    losses: dict[str, float]
    audio_rate: int
    video_rate: int
    lr: float
    passes: int

    def to_json_dict(self) -> dict:
        d = {"step": self.step, "sampled_audio_rate": self.audio_rate,
             "sampled_video_rate": self.video_rate, "lr": self.lr, "passes": self.passes}
        d.update({f"loss_{k}": v for k, v in self.losses.items()})
        return d


def build_triple(model: OmniModel, utts, audio_rate: int, video_rate: int,
                 audio_raws: list[np.ndarray] | None = None,
                 video_raws: list[np.ndarray] | None = None
                 ) -> dict[TaskKind, list[TaskSequence]]:
    """Encode/compress each utterance once per modality and share the
    compressed streams across the ASR/VSR/AVSR sequences."""
    triple: dict[TaskKind, list[TaskSequence]] = {t: [] for t in TaskKind}
    for i, u in enumerate(utts):
        audio_raw = audio_raws[i] if audio_raws is not None else u.audio_raw
        video_raw = video_raws[i] if video_raws is not None else u.video_raw
        Z_a = model.project(compress(model.encode_audio(audio_raw), audio_rate))
        Z_v = model.project(compress(model.encode_video(video_raw), video_rate))
        target = VOCAB.tokenize(u.text)
        for task in TaskKind:
            triple[task].append(assemble(task, Z_a, Z_v, VOCAB.prompt_ids(task),
                                         target, utt_id=u.id))
    return triple


def train_step(model: OmniModel, batch, menu: RateMenu, weights: LossWeights,
               optimizer: AdamW, rate_rng: np.random.Generator,
               noise: TrainNoise | None = None,
               noise_rng: np.random.Generator | None = None,
               noise_pool: list[np.ndarray] | None = None) -> StepMetrics:
    """One optimizer step over a batch: sample one rate pair, compute the
    joint loss (3 backbone passes), backprop, update."""
    backbone = model.backbone
    passes_before = backbone.forward_calls
    a_rate, v_rate = sample_rates(rate_rng, menu)
    audio_raws = video_raws = None
    if noise is not None and noise.prob > 0.0:
        audio_raws = []
        for u in batch:
            if noise_rng.random() < noise.prob:
                snr = float(noise_rng.choice(noise.snr_choices))
                audio_raws.append(add_noise(u.audio_raw, snr, noise_rng, noise_pool))
            else:
                audio_raws.append(u.audio_raw)
    if noise is not None and noise.jitter_audio > 0.0:
        audio_raws = [a + noise_rng.normal(0.0, noise.jitter_audio, size=a.shape)
                      for a in (audio_raws if audio_raws is not None
                                else [u.audio_raw for u in batch])]
    if noise is not None and noise.jitter_video > 0.0:
        video_raws = [u.video_raw
                      + noise_rng.normal(0.0, noise.jitter_video,
                                         size=u.video_raw.shape)
                      for u in batch]
    triple = build_triple(model, batch, a_rate, v_rate, audio_raws, video_raws)
    total, per_task = omni_loss(backbone, model.variant, triple, weights)
    optimizer.zero_grad()
    total.backward()
    lr = optimizer.lr()
    optimizer.step()
    return StepMetrics(step=optimizer.t,
                       losses={t.value: v for t, v in per_task.items()},
                       audio_rate=a_rate, video_rate=v_rate, lr=lr,
                       passes=backbone.forward_calls - passes_before)
