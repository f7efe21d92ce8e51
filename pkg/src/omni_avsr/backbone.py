"""Tiny decoder-only transformer with a freezable base and low-rank adapters.

The base weights (embeddings, attention/FFN projections, norms, output head)
can be frozen after a pretraining stage; adaptation then happens through
low-rank adapters attached to the query and value projections of every
self-attention layer, in one of three compositions:

  S  - one adapter per site, shared by all tasks
  T  - one adapter per site per task
  ST - both, added
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class TaskKind(enum.Enum):
    ASR = "ASR"
    VSR = "VSR"
    AVSR = "AVSR"


ALL_TASKS = (TaskKind.ASR, TaskKind.VSR, TaskKind.AVSR)


class ConfigurationError(RuntimeError):
    pass


class LengthError(ValueError):
    pass


@dataclass
class BackboneConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 40
    max_len: int = 192

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")


@dataclass
class LoraAdapter:
    w_down: Tensor
    w_up: Tensor
    rank: int
    alpha: float

    @classmethod
    def init(cls, d: int, rank: int, alpha: float, rng: np.random.Generator) -> "LoraAdapter":
        if rank >= d:
            raise ConfigurationError(f"adapter rank {rank} must be < d {d}")
        # w_up starts at zero so the adapted model equals the frozen base.
        w_down = Tensor(rng.uniform(-1 / np.sqrt(d), 1 / np.sqrt(d), size=(d, rank)),
                        requires_grad=True)
        w_up = Tensor(np.zeros((rank, d)), requires_grad=True)
        return cls(w_down=w_down, w_up=w_up, rank=rank, alpha=alpha)


# An adapter site is (layer index, projection name); projections adapted are
# exactly the query and value matrices of each layer.
ADAPTER_PROJECTIONS = ("q", "v")


@dataclass
class OmniLoraVariant:
    tag: str  # "S", "T" or "ST"
    shared: dict[tuple[int, str], LoraAdapter] = field(default_factory=dict)
    per_task: dict[TaskKind, dict[tuple[int, str], LoraAdapter]] = field(default_factory=dict)

    @classmethod
    def init(cls, tag: str, cfg: BackboneConfig, rank: int, alpha: float,
             rng: np.random.Generator) -> "OmniLoraVariant":
        if tag not in ("S", "T", "ST"):
            raise ConfigurationError(f"unknown variant tag {tag!r}")
        sites = [(l, p) for l in range(cfg.n_layers) for p in ADAPTER_PROJECTIONS]
        v = cls(tag=tag)
        if tag in ("S", "ST"):
            v.shared = {s: LoraAdapter.init(cfg.d_model, rank, alpha, rng) for s in sites}
        if tag in ("T", "ST"):
            v.per_task = {t: {s: LoraAdapter.init(cfg.d_model, rank, alpha, rng) for s in sites}
                          for t in ALL_TASKS}
        return v

    def named_parameters(self) -> dict[str, Tensor]:
        params = {}
        for (l, p), ad in self.shared.items():
            params[f"lora/shared/{l}/{p}/down"] = ad.w_down
            params[f"lora/shared/{l}/{p}/up"] = ad.w_up
        for task, sites in self.per_task.items():
            for (l, p), ad in sites.items():
                params[f"lora/{task.value}/{l}/{p}/down"] = ad.w_down
                params[f"lora/{task.value}/{l}/{p}/up"] = ad.w_up
        return params


def lora_project(Z: Tensor, site: tuple[int, str], task: TaskKind,
                 variant: OmniLoraVariant | None, W: Tensor,
                 read_counter: dict | None = None) -> Tensor:
    """Base projection plus the variant's low-rank correction(s).

    S:  ZW + a (Z Wd) Wu          (shared adapter)
    T:  ZW + a (Z Wd_t) Wu_t      (task adapter)
    ST: both corrections added.
    """
    out = T.matmul(Z, W)
    if variant is None:
        return out
    terms = []
    if variant.tag in ("S", "ST"):
        ad = variant.shared.get(site)
        if ad is None:
            raise ConfigurationError(f"variant {variant.tag}: missing shared adapter at {site}")
        terms.append(("shared", ad))
    if variant.tag in ("T", "ST"):
        task_sites = variant.per_task.get(task)
        ad = task_sites.get(site) if task_sites else None
        if ad is None:
            raise ConfigurationError(
                f"variant {variant.tag}: missing {task.value} adapter at {site}")
        terms.append((task.value, ad))
    for label, ad in terms:
        if read_counter is not None:
            key = (label, site)
            read_counter[key] = read_counter.get(key, 0) + 1
        low = T.matmul(T.matmul(Z, ad.w_down), ad.w_up)
        out = T.add(out, T.scale(low, ad.alpha))
    return out


def trainable_parameter_count(variant: OmniLoraVariant, cfg: BackboneConfig) -> int:
    total = 0
    for p in variant.named_parameters().values():
        total += p.data.size
    return total


class Backbone:
    """Pre-norm causal transformer over already-embedded inputs."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, V = cfg.d_model, cfg.vocab_size
        s = 1 / np.sqrt(d)

        def p(shape, scale=s):
            return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

        self.tok_emb = p((V, d), 0.02)
        self.pos_emb = p((cfg.max_len, d), 0.02)
        self.layers = []
        for _ in range(cfg.n_layers):
            self.layers.append({
                "ln1_g": Tensor(np.ones(d), requires_grad=True),
                "ln1_b": Tensor(np.zeros(d), requires_grad=True),
                "wq": p((d, d)), "wk": p((d, d)), "wv": p((d, d)), "wo": p((d, d)),
                "ln2_g": Tensor(np.ones(d), requires_grad=True),
                "ln2_b": Tensor(np.zeros(d), requires_grad=True),
                "w1": p((d, cfg.d_ff)), "b1": Tensor(np.zeros(cfg.d_ff), requires_grad=True),
                "w2": p((cfg.d_ff, d), 1 / np.sqrt(cfg.d_ff)),
                "b2": Tensor(np.zeros(d), requires_grad=True),
            })
        self.lnf_g = Tensor(np.ones(d), requires_grad=True)
        self.lnf_b = Tensor(np.zeros(d), requires_grad=True)
        self.w_out = p((d, V))
        # instrumentation
        self.forward_calls = 0
        self.adapter_reads: dict = {}

    # -- parameter plumbing ----------------------------------------------
    def base_parameters(self) -> dict[str, Tensor]:
        params = {"base/tok_emb": self.tok_emb, "base/pos_emb": self.pos_emb,
                  "base/lnf_g": self.lnf_g, "base/lnf_b": self.lnf_b,
                  "base/w_out": self.w_out}
        for i, layer in enumerate(self.layers):
            for name, t in layer.items():
                params[f"base/layer{i}/{name}"] = t
        return params

    def freeze_base(self):
        for t in self.base_parameters().values():
            t.requires_grad = False
            t.grad = None

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.base_parameters()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.base_parameters()[name].data).tobytes())
        return h.hexdigest()

    def reset_counters(self):
        self.forward_calls = 0
        self.adapter_reads = {}

    # -- forward ----------------------------------------------------------
    def embed_ids(self, ids) -> Tensor:
        return T.embedding_lookup(self.tok_emb, ids)

    def add_positions(self, x: Tensor) -> Tensor:
        S = x.shape[-2]
        if S > self.cfg.max_len:
            raise LengthError(f"sequence length {S} > max_len {self.cfg.max_len}")
        pos_ids = np.arange(S)
        if x.ndim == 3:
            pos_ids = np.broadcast_to(pos_ids, (x.shape[0], S))
        return T.add(x, T.embedding_lookup(self.pos_emb, pos_ids))

    def forward(self, x: Tensor, task: TaskKind, variant: OmniLoraVariant | None) -> Tensor:
        """Map embedded inputs (S, d) or (B, S, d) to logits over the vocab.

        Counts one forward pass per call regardless of batch size.
        """
        self.forward_calls += 1
        if x.shape[-2] > self.cfg.max_len:
            raise LengthError(f"sequence length {x.shape[-2]} > max_len {self.cfg.max_len}")
        H = self.cfg.n_heads
        hd = self.cfg.d_model // H
        for i, layer in enumerate(self.layers):
            xn = T.layer_norm(x, layer["ln1_g"], layer["ln1_b"])
            q = lora_project(xn, (i, "q"), task, variant, layer["wq"], self.adapter_reads)
            k = T.matmul(xn, layer["wk"])
            v = lora_project(xn, (i, "v"), task, variant, layer["wv"], self.adapter_reads)
            heads = []
            for h in range(H):
                qh = T.slice_channels(q, h * hd, (h + 1) * hd)
                kh = T.slice_channels(k, h * hd, (h + 1) * hd)
                vh = T.slice_channels(v, h * hd, (h + 1) * hd)
                heads.append(T.causal_attention(qh, kh, vh))
            attn = T.matmul(T.concat_channels(heads), layer["wo"])
            x = T.add(x, attn)
            xn = T.layer_norm(x, layer["ln2_g"], layer["ln2_b"])
            ff = T.matmul(T.relu(T.add(T.matmul(xn, layer["w1"]), layer["b1"])), layer["w2"])
            x = T.add(x, T.add(ff, layer["b2"]))
        x = T.layer_norm(x, self.lnf_g, self.lnf_b)
        return T.matmul(x, self.w_out)
