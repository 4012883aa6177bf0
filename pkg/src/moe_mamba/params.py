"""Parameter accounting and the Mamba-to-MoE budget planner.

Headline numbers follow the non-embedding convention: the input embedding
and the output unembedding are counted separately and excluded from totals.
Active parameters are the ones touched when producing one token's output,
so each routed bank contributes its router plus a single expert.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .attention import AttentionLayer
from .mamba import MambaLayer
from .moe import DenseFeedForward, LinearExpertBank, SwitchMoELayer
from .model import BLOCK_PARALLEL, Model


@dataclass
class BlockParams:
    index: int
    kind: str
    total: int
    active: int
    norm: int


@dataclass
class ParamReport:
    total_params: int                 # non-embedding, norms included
    active_params_per_token: int      # non-embedding
    blocks: list[BlockParams]
    final_norm_params: int
    embedding_params: int             # excluded from the headline numbers
    unembedding_params: int           # excluded from the headline numbers

    def to_dict(self) -> dict:
        return {
            "total_params": self.total_params,
            "active_params_per_token": self.active_params_per_token,
            "embedding_params": self.embedding_params,
            "unembedding_params": self.unembedding_params,
            "final_norm_params": self.final_norm_params,
            "blocks": [vars(b) for b in self.blocks],
        }


def _mixer_counts(mixer) -> tuple[int, int]:
    """(total, active) for one mixer, from closed forms only."""
    if isinstance(mixer, (AttentionLayer, DenseFeedForward, MambaLayer)):
        n = mixer.param_count()
        return n, n
    if isinstance(mixer, (SwitchMoELayer, LinearExpertBank)):
        return mixer.param_count(), mixer.active_param_count()
    # inner-expert state-space block: dense pieces plus per-projection banks
    cfg = mixer.config
    d, ed = cfg.d_model, cfg.d_inner
    total = ed * cfg.d_conv + ed                      # conv kernel + bias
    total += ed * (cfg.dt_rank + 2 * cfg.d_state)     # x_proj
    total += cfg.dt_rank * ed + ed                    # dt projection + bias
    total += ed * cfg.d_state + ed                    # A_log + D
    active = total
    for p, d_in, d_out in (
        (mixer.gate_proj, d, ed),
        (mixer.conv_proj, d, ed),
        (mixer.output_proj, ed, d),
    ):
        if isinstance(p, LinearExpertBank):
            total += p.param_count()
            active += p.active_param_count()
        else:
            total += d_in * d_out
            active += d_in * d_out
    return total, active


def count_params(model: Model) -> ParamReport:
    """Closed-form report; must equal buffer enumeration bit-exactly."""
    blocks = []
    total = 0
    active = 0
    for i, block in enumerate(model.blocks):
        t, a = _mixer_counts(block.mixer)
        if block.spec.kind == "ParallelMambaMoE":
            mt, ma = _mixer_counts(block.moe)
            t, a = t + mt, a + ma
        norm = block.norm.param_count()
        blocks.append(BlockParams(index=i, kind=block.spec.kind, total=t, active=a, norm=norm))
        total += t + norm
        active += a + norm
    final_norm = model.final_norm.param_count()
    return ParamReport(
        total_params=total + final_norm,
        active_params_per_token=active + final_norm,
        blocks=blocks,
        final_norm_params=final_norm,
        embedding_params=model.embedding.data.size,
        unembedding_params=model.unembedding.data.size,
    )


def enumerate_buffer_sizes(model: Model) -> dict[str, int]:
    """Ground truth for the accounting tests: walk every parameter buffer."""
    return {name: t.data.size for name, t in model.parameters().items()}


def total_params_by_enumeration(model: Model) -> int:
    """Non-embedding total from the buffers themselves."""
    sizes = enumerate_buffer_sizes(model)
    return sum(n for name, n in sizes.items() if name not in ("embedding", "unembedding"))


# --- ratio planner ----------------------------------------------------------

# Design points for splitting 6 parts of 2*d^2 active parameters between the
# state-space path (r parts) and the expert path (6 - r parts). The expert
# side fixes d_expert = (6 - r) * d and recovers the expert count from a
# constant total-expert-parameter product K. Expansion factors are fixed
# design points; note the 2:4 row carries 5/3 rather than the 4/3 the other
# rows' 2r/3 progression would give.
_EXPANSION_BY_RATIO = {
    1: Fraction(2, 3),
    2: Fraction(5, 3),
    3: Fraction(2),
    4: Fraction(8, 3),
    5: Fraction(10, 3),
}


def plan_ratio(r: int, d_model: int, expert_product_k: int | None = None) -> tuple[Fraction, int, int]:
    """(expansion E, d_expert, n_experts) for a Mamba:MoE split of r : 6-r.

    ``expert_product_k`` defaults to 96 * d_model, keeping
    n_experts * d_expert (the bank's total width) constant across ratios up
    to rounding.
    """
    if r not in _EXPANSION_BY_RATIO:
        raise ValueError(
            f"ratio must be in 1..5, got {r}; 6:0 is not a planner point "
            "(all parameters in the state-space path is just a plain stack at E=4 "
            "with half the blocks)"
        )
    if expert_product_k is None:
        expert_product_k = 96 * d_model
    d_expert = (6 - r) * d_model
    n_experts = round(expert_product_k / d_expert)
    return _EXPANSION_BY_RATIO[r], d_expert, n_experts
