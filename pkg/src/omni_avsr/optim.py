"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def cosine_lr(t: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    t = min(t, total_steps)
    return float(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * t / total_steps)))


class AdamW:
    def __init__(self, params: dict[str, Tensor], total_steps: int,
                 lr_max: float = 1e-3, lr_min: float = 1e-5,
                 weight_decay: float = 0.1, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.total_steps = total_steps
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def lr(self) -> float:
        return cosine_lr(self.t, self.total_steps, self.lr_max, self.lr_min)

    def step(self):
        """One decoupled-weight-decay Adam update; skips absent gradients."""
        lr = self.lr()
        self.t += 1
        b1, b2 = self.betas
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                    + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"opt/m/{k}": v for k, v in self.m.items()}
        out.update({f"opt/v/{k}": v for k, v in self.v.items()})
        out["opt/t"] = np.asarray(float(self.t))
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        for k in self.m:
            self.m[k] = tensors[f"opt/m/{k}"].copy()
            self.v[k] = tensors[f"opt/v/{k}"].copy()
        self.t = int(tensors["opt/t"])
