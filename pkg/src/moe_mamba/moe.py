"""Switch-style top-1 mixture of experts, plus the dense feed-forward baseline.

Each token is scored by a linear router, the scores are softmaxed, and the
token goes to its argmax expert only (ties break to the lowest index). Each
expert accepts at most ``capacity = floor(capacity_factor * N / n_experts)``
tokens per batch, kept in token order; excess tokens contribute a zero
vector and ride the residual stream. Kept outputs are scaled by the chosen
router probability, y = p_I * E_I(x), so the router receives gradient. A
load-balancing penalty alpha * n_experts * sum_i f_i * P_i discourages
collapse, where f_i is the argmax fraction (counted before dropping, not
differentiable) and P_i the mean router probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class SwitchConfig:
    n_experts: int
    d_model: int
    d_expert: int
    capacity_factor: float = 1.0
    aux_alpha: float = 0.01

    def __post_init__(self):
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if self.capacity_factor <= 0:
            raise ValueError("capacity_factor must be positive")

    def capacity(self, n_tokens: int) -> int:
        return math.floor(self.capacity_factor * n_tokens / self.n_experts)


@dataclass
class RoutingDecision:
    scores: Tensor            # [N, n_experts]
    probs: Tensor             # [N, n_experts], rows sum to 1
    chosen: np.ndarray        # [N] int, argmax expert per token
    kept: np.ndarray | None = None          # [N] bool after capacity
    kept_counts: np.ndarray | None = None   # [n_experts] int
    fraction_dropped: float | None = None

    @property
    def n_tokens(self) -> int:
        return self.scores.shape[0]

    @property
    def n_experts(self) -> int:
        return self.scores.shape[1]


def route(x: Tensor, w_router: Tensor) -> RoutingDecision:
    """Score and softmax every token; capacity is applied separately.

    The softmax denominator uses sorted summation so that relabeling the
    experts (and permuting router columns to match) permutes the outputs
    bit-exactly.
    """
    scores = T.matmul(x, w_router)
    probs = T.softmax(scores, axis=-1, sorted_sum=True)
    chosen = np.argmax(probs.data, axis=-1)
    return RoutingDecision(scores=scores, probs=probs, chosen=chosen)


def apply_capacity(decision: RoutingDecision, capacity: int) -> RoutingDecision:
    """Keep the first ``capacity`` tokens per expert in token order."""
    if capacity < 0:
        raise ValueError("capacity must be >= 0")
    n = decision.n_tokens
    kept = np.zeros(n, dtype=bool)
    counts = np.zeros(decision.n_experts, dtype=np.int64)
    for e in range(decision.n_experts):
        idx = np.nonzero(decision.chosen == e)[0][:capacity]
        kept[idx] = True
        counts[e] = idx.size
    decision.kept = kept
    decision.kept_counts = counts
    decision.fraction_dropped = 1.0 - kept.sum() / n
    return decision


def load_balance_loss(decision: RoutingDecision, aux_alpha: float) -> Tensor:
    """alpha * n_experts * sum_i f_i * P_i.

    f_i counts argmax assignments before dropping and carries no gradient;
    the router only learns through the mean probabilities P_i.
    """
    n, n_experts = decision.probs.shape
    f = np.bincount(decision.chosen, minlength=n_experts).astype(decision.probs.dtype) / n
    mean_probs = T.mean_axis(decision.probs, axis=0)
    return T.scale(T.sum_all(T.mul(mean_probs, T.constant(f))), aux_alpha * n_experts)


def dispatch(
    x: Tensor,
    decision: RoutingDecision,
    apply_expert,
    d_out: int,
) -> Tensor:
    """Run each expert on its kept tokens and scatter p_I-scaled outputs.

    ``apply_expert(e, xe)`` maps the kept [K_e, d_in] slice through expert
    ``e``. Dropped tokens stay at the zero vector. Destinations are disjoint
    across experts, so the result is independent of expert order.
    """
    n = decision.n_tokens
    out = None
    for e in range(decision.n_experts):
        idx = np.nonzero((decision.chosen == e) & decision.kept)[0]
        if idx.size == 0:
            continue
        ye = apply_expert(e, T.gather_rows(x, idx))
        pe = T.take_pairs(decision.probs, idx, np.full(idx.size, e))
        scaled = T.mul(ye, T.reshape(pe, (idx.size, 1)))
        piece = T.scatter_rows(scaled, idx, n)
        out = piece if out is None else T.add(out, piece)
    if out is None:
        out = T.constant(np.zeros((n, d_out), dtype=x.dtype))
    return out


def _param(data: np.ndarray, dtype, decay: bool) -> Tensor:
    t = Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
    t.decay = decay
    return t


class DenseFeedForward:
    """W_out @ silu(W_in @ x), no biases; 8*d^2 parameters at d_ff = 4*d."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dtype=np.float32):
        self.d_model = d_model
        self.d_ff = d_ff
        self.w_in = _param(rng.normal(0.0, d_model ** -0.5, size=(d_model, d_ff)), dtype, decay=True)
        self.w_out = _param(rng.normal(0.0, d_ff ** -0.5, size=(d_ff, d_model)), dtype, decay=True)

    def parameters(self, prefix: str = "ff") -> dict[str, Tensor]:
        return {f"{prefix}.w_in": self.w_in, f"{prefix}.w_out": self.w_out}

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(T.silu(T.matmul(x, self.w_in)), self.w_out)

    def param_count(self) -> int:
        return 2 * self.d_model * self.d_ff


class SwitchMoELayer:
    """Router plus a bank of two-layer SiLU feed-forward experts."""

    def __init__(self, config: SwitchConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        d, h = config.d_model, config.d_expert
        self.w_router = _param(rng.normal(0.0, 0.02, size=(d, config.n_experts)), dtype, decay=True)
        self.experts_in = [
            _param(rng.normal(0.0, d ** -0.5, size=(d, h)), dtype, decay=True)
            for _ in range(config.n_experts)
        ]
        self.experts_out = [
            _param(rng.normal(0.0, h ** -0.5, size=(h, d)), dtype, decay=True)
            for _ in range(config.n_experts)
        ]

    def parameters(self, prefix: str = "moe") -> dict[str, Tensor]:
        params = {f"{prefix}.router": self.w_router}
        for i in range(self.config.n_experts):
            params[f"{prefix}.expert{i}.w_in"] = self.experts_in[i]
            params[f"{prefix}.expert{i}.w_out"] = self.experts_out[i]
        return params

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, float]:
        """x is [N, d] (batch and sequence flattened). Returns the routed
        output, the load-balance loss, and the dropped-token fraction."""
        decision = route(x, self.w_router)
        decision = apply_capacity(decision, self.config.capacity(decision.n_tokens))
        aux = load_balance_loss(decision, self.config.aux_alpha)

        def apply_expert(e: int, xe: Tensor) -> Tensor:
            return T.matmul(T.silu(T.matmul(xe, self.experts_in[e])), self.experts_out[e])

        y = dispatch(x, decision, apply_expert, self.config.d_model)
        return y, aux, decision.fraction_dropped

    def param_count(self) -> int:
        cfg = self.config
        return cfg.d_model * cfg.n_experts + cfg.n_experts * 2 * cfg.d_model * cfg.d_expert

    def active_param_count(self) -> int:
        cfg = self.config
        return cfg.d_model * cfg.n_experts + 2 * cfg.d_model * cfg.d_expert


class LinearExpertBank:
    """Top-1 routed bank of single linear maps, one of which replaces a dense
    projection inside the state-space block."""

    def __init__(self, d_in: int, d_out: int, n_experts: int, rng: np.random.Generator,
                 dtype=np.float32, capacity_factor: float = 1.0, aux_alpha: float = 0.01):
        self.d_in = d_in
        self.d_out = d_out
        self.n_experts = n_experts
        self.capacity_factor = capacity_factor
        self.aux_alpha = aux_alpha
        self.w_router = _param(rng.normal(0.0, 0.02, size=(d_in, n_experts)), dtype, decay=True)
        self.experts = [
            _param(rng.normal(0.0, d_in ** -0.5, size=(d_in, d_out)), dtype, decay=True)
            for _ in range(n_experts)
        ]

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {f"{prefix}.router": self.w_router}
        for i, w in enumerate(self.experts):
            params[f"{prefix}.expert{i}"] = w
        return params

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, float]:
        decision = route(x, self.w_router)
        capacity = math.floor(self.capacity_factor * decision.n_tokens / self.n_experts)
        decision = apply_capacity(decision, capacity)
        aux = load_balance_loss(decision, self.aux_alpha)
        y = dispatch(x, decision, lambda e, xe: T.matmul(xe, self.experts[e]), self.d_out)
        return y, aux, decision.fraction_dropped

    def param_count(self) -> int:
        return self.d_in * self.n_experts + self.n_experts * self.d_in * self.d_out

    def active_param_count(self) -> int:
        return self.d_in * self.n_experts + self.d_in * self.d_out
