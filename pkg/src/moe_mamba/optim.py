"""AdamW with decoupled weight decay, global-norm clipping, and the
warmup-then-cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def cosine_lr(
    step: int,
    total_steps: int,
    max_lr: float,
    warmup_fraction: float = 0.01,
    final_lr_ratio: float = 0.1,
) -> float:
    """Linear warmup from 0 over warmup_fraction * total_steps, then cosine
    decay so that lr(total_steps) = final_lr_ratio * max_lr.

    ``step`` counts taken steps, 1-based: lr(warmup end) = max_lr.
    """
    warmup = warmup_fraction * total_steps
    if warmup > 0 and step < warmup:
        return max_lr * step / warmup
    if total_steps <= warmup:
        return max_lr
    progress = (step - warmup) / (total_steps - warmup)
    progress = min(max(progress, 0.0), 1.0)
    return max_lr * (final_lr_ratio + (1.0 - final_lr_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.
    Returns the pre-clip norm."""
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(np.square(t.grad.astype(np.float64))))
    norm = math.sqrt(total)
    if max_norm is not None and norm > max_norm > 0:
        factor = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= t.grad.dtype.type(factor)
    return norm


class AdamW:
    """Decoupled weight decay: p -= lr * wd * p before the Adam update.

    Decay applies only to parameters whose ``decay`` flag is set (matrix
    weights; never norms, biases, or the state-space A_log / D buffers).
    A NaN gradient aborts immediately, naming the parameter.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        weight_decay: float = 0.1,
        grad_clip: float | None = 0.5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> float:
        """One update over all parameters; returns the pre-clip grad norm."""
        for name, p in self.params.items():
            if p.grad is not None and np.isnan(p.grad).any():
                raise RuntimeError(f"NaN gradient in parameter {name!r}")
        norm = clip_global_norm(self.params, self.grad_clip)
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay and p.decay:
                p.data -= p.data.dtype.type(lr * self.weight_decay) * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= p.data.dtype.type(lr) * update.astype(p.data.dtype)
        return norm

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].copy()
            self.v[name] = arrays[f"opt.v.{name}"].copy()
