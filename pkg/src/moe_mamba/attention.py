"""Multi-head causal self-attention with rotary position embedding.

Q, K, V, O projections carry no bias, so one layer holds exactly 4*d^2
parameters; positions enter only through the rotation of Q and K.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def rotary_tables(length: int, head_dim: int, dtype, base: float = 10000.0):
    """cos/sin tables [L, head_dim/2] for half-split rotation."""
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.outer(np.arange(length, dtype=np.float64), inv_freq)
    return T.constant(np.cos(angles), dtype=dtype), T.constant(np.sin(angles), dtype=dtype)


def apply_rotary(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """Rotate [B, H, L, hd]: pair the first and second halves of each head."""
    half = x.shape[-1] // 2
    x1 = T.slice_last(x, 0, half)
    x2 = T.slice_last(x, half, 2 * half)
    rot1 = T.add(T.mul(x1, cos), T.negate(T.mul(x2, sin)))
    rot2 = T.add(T.mul(x1, sin), T.mul(x2, cos))
    return T.concat_last([rot1, rot2])


class AttentionLayer:
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, dtype=np.float32,
                 rope_base: float = 10000.0):
        if d_model % n_heads != 0:
            raise ValueError(f"n_heads {n_heads} must divide d_model {d_model}")
        if (d_model // n_heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary embedding")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.rope_base = rope_base
        self.dtype = np.dtype(dtype)
        std = d_model ** -0.5
        self.w_q = _param(rng.normal(0.0, std, size=(d_model, d_model)), dtype)
        self.w_k = _param(rng.normal(0.0, std, size=(d_model, d_model)), dtype)
        self.w_v = _param(rng.normal(0.0, std, size=(d_model, d_model)), dtype)
        self.w_o = _param(rng.normal(0.0, std, size=(d_model, d_model)), dtype)
        self._cache: dict[int, tuple[Tensor, Tensor, Tensor]] = {}

    def parameters(self, prefix: str = "attn") -> dict[str, Tensor]:
        return {
            f"{prefix}.w_q": self.w_q,
            f"{prefix}.w_k": self.w_k,
            f"{prefix}.w_v": self.w_v,
            f"{prefix}.w_o": self.w_o,
        }

    def _tables(self, length: int):
        if length not in self._cache:
            cos, sin = rotary_tables(length, self.head_dim, self.dtype, self.rope_base)
            mask = np.triu(np.full((length, length), -np.inf, dtype=self.dtype), k=1)
            self._cache[length] = (cos, sin, T.constant(mask, dtype=self.dtype))
        return self._cache[length]

    def forward(self, x: Tensor) -> Tensor:
        batch, length, d = x.shape
        h, hd = self.n_heads, self.head_dim
        cos, sin, mask = self._tables(length)

        def heads(w: Tensor) -> Tensor:
            proj = T.matmul(x, w)
            return T.transpose(T.reshape(proj, (batch, length, h, hd)), (0, 2, 1, 3))

        q = apply_rotary(heads(self.w_q), cos, sin)
        k = apply_rotary(heads(self.w_k), cos, sin)
        v = heads(self.w_v)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), hd ** -0.5)
        weights = T.softmax(T.add(scores, mask), axis=-1)
        ctx = T.matmul(weights, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (batch, length, d))
        return T.matmul(merged, self.w_o)

    def param_count(self) -> int:
        return 4 * self.d_model * self.d_model


def _param(data: np.ndarray, dtype) -> Tensor:
    t = Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
    t.decay = True
    return t
