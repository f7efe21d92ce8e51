"""Deterministic synthetic paired-modality corpus.

Each utterance is a short sentence of lexicon words. The audio channel embeds
every character as its own random prototype vector (fully informative); the
video channel embeds only the character's viseme class (lossy by design, which
is what makes lipreading the harder task). Audio runs at 4x the video frame
rate; a character dwells for 8 audio frames / 2 video frames, so audio rate 8
and video rate 2 yield token-per-character streams and coarser rates pool
across character boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AUDIO_FRAME_RATE = 100.0
VIDEO_FRAME_RATE = 25.0
FRAMES_PER_CHAR_AUDIO = 8
FRAMES_PER_CHAR_VIDEO = 2

ALPHABET = "abcdefghijklmnopqrstuvwxyz "

PROMPT_WORDS = ("Transcribe", "speech", "video", "and", "to", "text.")

# Characters that look alike on the lips fall into one class; several
# classes hold 2-3 characters, so lip reading is ambiguous per character but
# usually resolvable at the word level.
VISEME_CLASSES = [
    "aei", "ou", "pbm", "fv", "w", "td", "sz", "kg", "qc", "nl", "r",
    "hx", "jy", " ",
]


class TokenizationError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Character-level vocab plus pad/bos/eos and whole-word prompt tokens."""

    pad: int = 0
    bos: int = 1
    eos: int = 2

    @property
    def char_base(self) -> int:
        return 3

    @property
    def prompt_base(self) -> int:
        return self.char_base + len(ALPHABET)

    @property
    def size(self) -> int:
        return self.prompt_base + len(PROMPT_WORDS)

    def char_id(self, c: str) -> int:
        idx = ALPHABET.find(c)
        if idx < 0:
            raise TokenizationError(f"character {c!r} not in alphabet")
        return self.char_base + idx

    def prompt_word_id(self, w: str) -> int:
        return self.prompt_base + PROMPT_WORDS.index(w)

    def tokenize(self, text: str) -> np.ndarray:
        """Character ids plus a trailing eos. Empty text is rejected."""
        if not text:
            raise TokenizationError("empty text")
        return np.array([self.char_id(c) for c in text] + [self.eos], dtype=np.int64)

    def detokenize(self, ids) -> str:
        parts: list[str] = []
        prev_word = False
        for i in ids:
            i = int(i)
            if i in (self.pad, self.bos, self.eos):
                continue
            if i >= self.prompt_base:
                word = PROMPT_WORDS[i - self.prompt_base]
                if parts:
                    parts.append(" ")
                parts.append(word)
                prev_word = True
            else:
                if i < self.char_base or i >= self.prompt_base:
                    raise TokenizationError(f"id {i} out of vocabulary")
                if prev_word:
                    parts.append(" ")
                    prev_word = False
                parts.append(ALPHABET[i - self.char_base])
        return "".join(parts)

    def prompt_ids(self, task) -> np.ndarray:
        from .backbone import TaskKind
        words = {"ASR": ["speech"], "VSR": ["video"],
                 "AVSR": ["speech", "and", "video"]}[TaskKind(task).value]
        seq = ["Transcribe"] + words + ["to", "text."]
        return np.array([self.prompt_word_id(w) for w in seq], dtype=np.int64)


VOCAB = Vocabulary()


def viseme_map() -> dict[str, int]:
    m = {}
    for cls_idx, chars in enumerate(VISEME_CLASSES):
        for c in chars:
            m[c] = cls_idx
    assert set(m) == set(ALPHABET)
    return m


VISEME_OF = viseme_map()
N_VISEMES = len(VISEME_CLASSES)


def _viseme_twin(word: str, rng: np.random.Generator) -> str:
    """Replace characters by in-class lookalikes; lip-identical, sound-distinct."""
    out = []
    for c in word:
        cls = VISEME_CLASSES[VISEME_OF[c]]
        others = [x for x in cls if x != c]
        out.append(rng.choice(others) if others and rng.random() < 0.8 else c)
    return "".join(out)


def build_lexicon(n_words: int = 200, seed: int = 7, twin_fraction: float = 0.1) -> list[str]:
    """Fixed word list. A small fraction of words get a viseme-identical twin
    (lip-identical, sound-distinct), so video alone cannot always identify the
    word; the rest are random, keeping lipreading harder than listening but
    far from hopeless."""
    rng = np.random.default_rng(seed)
    letters = ALPHABET.strip()
    words: list[str] = []
    seen = set()
    n_twins = int(n_words * twin_fraction)
    while len(words) < n_words:
        length = int(rng.integers(3, 7))
        w = "".join(rng.choice(list(letters)) for _ in range(length))
        if w in seen:
            continue
        words.append(w)
        seen.add(w)
        if len(words) < n_words and n_twins > 0:
            tw = _viseme_twin(w, rng)
            if tw != w and tw not in seen:
                words.append(tw)
                seen.add(tw)
                n_twins -= 1
    return words[:n_words]


LEXICON = build_lexicon()


@dataclass
class SyntheticUtterance:
    id: int
    text: str
    audio_raw: np.ndarray  # (L_a, d_raw), ~100 frames/s
    video_raw: np.ndarray  # (L_v, d_raw), ~25 frames/s
    snr_db: float | None = None


@dataclass
class Corpus:
    seed: int
    d_raw: int
    char_protos: np.ndarray    # (len(ALPHABET), d_raw)
    viseme_protos: np.ndarray  # (N_VISEMES, d_raw)
    utterances: list[SyntheticUtterance] = field(default_factory=list)
    splits: dict[str, list[int]] = field(default_factory=dict)

    def split(self, name: str) -> list[SyntheticUtterance]:
        by_id = {u.id: u for u in self.utterances}
        return [by_id[i] for i in self.splits[name]]


def _utterance_rng(corpus_seed: int, utt_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([corpus_seed, 0xDA7A, utt_id]))


def render_streams(text: str, char_protos: np.ndarray, viseme_protos: np.ndarray,
                   jitter: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    char_idx = [ALPHABET.index(c) for c in text]
    d_raw = char_protos.shape[1]
    audio = np.repeat(char_protos[char_idx], FRAMES_PER_CHAR_AUDIO, axis=0)
    vis_idx = [VISEME_OF[c] for c in text]
    video = np.repeat(viseme_protos[vis_idx], FRAMES_PER_CHAR_VIDEO, axis=0)
    audio = audio + rng.normal(0.0, jitter, size=audio.shape)
    video = video + rng.normal(0.0, jitter, size=video.shape)
    return audio, video


def generate_corpus(n_utts: int, len_range: tuple[int, int] = (2, 4), seed: int = 0,
                    d_raw: int = 16, jitter: float = 0.1,
                    split_fracs: tuple[float, float] = (0.85, 0.05)) -> Corpus:
    """Sample `n_utts` sentences of lexicon words; deterministic given seed."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    proto_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9070]))
    char_protos = proto_rng.normal(0.0, 1.0, size=(len(ALPHABET), d_raw))
    viseme_protos = proto_rng.normal(0.0, 1.0, size=(N_VISEMES, d_raw))
    corpus = Corpus(seed=seed, d_raw=d_raw, char_protos=char_protos,
                    viseme_protos=viseme_protos)
    for uid in range(n_utts):
        rng = _utterance_rng(seed, uid)
        n_words = int(rng.integers(len_range[0], len_range[1] + 1))
        words = [LEXICON[int(rng.integers(len(LEXICON)))] for _ in range(n_words)]
        text = " ".join(words)
        audio, video = render_streams(text, char_protos, viseme_protos, jitter, rng)
        corpus.utterances.append(SyntheticUtterance(uid, text, audio, video))
    n_train = int(n_utts * split_fracs[0])
    n_valid = int(n_utts * split_fracs[1])
    ids = list(range(n_utts))
    corpus.splits = {"train": ids[:n_train],
                     "valid": ids[n_train:n_train + n_valid],
                     "test": ids[n_train + n_valid:]}
    return corpus


# -- noise ----------------------------------------------------------------

BABBLE_K = 8
SNR_GRID_DB = (5.0, 2.5, 0.0, -2.5, -5.0)


def babble_noise(length: int, pool: list[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """Babble analogue: mean of K other utterances' audio, tiled to length."""
    picks = rng.choice(len(pool), size=min(BABBLE_K, len(pool)), replace=False)
    streams = []
    for p in picks:
        a = pool[p]
        reps = -(-length // a.shape[0])
        streams.append(np.tile(a, (reps, 1))[:length])
    return np.mean(streams, axis=0)


def add_noise(audio_raw: np.ndarray, snr_db: float, rng: np.random.Generator,
              pool: list[np.ndarray]) -> np.ndarray:
    """Mix in babble noise scaled to the requested per-utterance SNR."""
    if np.isinf(snr_db):
        return audio_raw
    if not np.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    noise = babble_noise(audio_raw.shape[0], pool, rng)
    p_sig = float(np.mean(audio_raw ** 2))
    p_noise = float(np.mean(noise ** 2))
    target_noise_power = p_sig / (10.0 ** (snr_db / 10.0))
    return audio_raw + noise * np.sqrt(target_noise_power / p_noise)


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    noise = noisy - clean
    return 10.0 * np.log10(np.mean(clean ** 2) / np.mean(noise ** 2))
