"""Model family: compose state-space, attention, and expert blocks.

Five stack kinds plus the inner-expert family:

  transformer          [attention, dense feed-forward] pairs
  transformer_moe      [attention, switch feed-forward] pairs
  mamba                selective-SSM blocks only (no feed-forward)
  moe_mamba            [ssm block, switch feed-forward] pairs
  parallel_moe_mamba   one residual add per block, y = x + ssm(n) + moe(n)
  inner_moe_mamba      ssm blocks whose conv/gate/output projections are
                       replaced (per a mask) by routed linear expert banks;
                       optionally only on every other block

Everything is pre-norm with a final norm before the untied unembedding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .attention import AttentionLayer
from .mamba import MambaConfig, MambaLayer, SsmCore, _param
from .moe import DenseFeedForward, LinearExpertBank, SwitchConfig, SwitchMoELayer
from .tensor import Tensor

KIND_TRANSFORMER = "transformer"
KIND_TRANSFORMER_MOE = "transformer_moe"
KIND_MAMBA = "mamba"
KIND_MOE_MAMBA = "moe_mamba"
KIND_PARALLEL = "parallel_moe_mamba"
KIND_INNER = "inner_moe_mamba"
MODEL_KINDS = (
    KIND_TRANSFORMER,
    KIND_TRANSFORMER_MOE,
    KIND_MAMBA,
    KIND_MOE_MAMBA,
    KIND_PARALLEL,
    KIND_INNER,
)

INNER_PROJECTIONS = ("conv_proj", "gate_proj", "output_proj")

BLOCK_ATTENTION = "Attention"
BLOCK_DENSE_FF = "DenseFF"
BLOCK_MOE_FF = "MoEFF"
BLOCK_MAMBA = "Mamba"
BLOCK_PARALLEL = "ParallelMambaMoE"
BLOCK_INNER = "InnerMoEMamba"


@dataclass(frozen=True)
class BlockSpec:
    """One sublayer of the stack."""

    kind: str
    inner_mask: frozenset[str] = frozenset()
    experts_per_projection: int = 0

    def __post_init__(self):
        if self.kind == BLOCK_INNER:
            if not self.inner_mask:
                raise ValueError("inner mask must be nonempty; the all-dense mask is plain Mamba")
            bad = self.inner_mask - set(INNER_PROJECTIONS)
            if bad:
                raise ValueError(f"unknown projections in inner mask: {sorted(bad)}")
            if self.experts_per_projection < 1:
                raise ValueError("experts_per_projection must be >= 1")


@dataclass
class ModelSpec:
    """Flat, JSON-serializable description of a block stack."""

    kind: str
    d_model: int
    n_blocks: int
    vocab_size: int = 256
    n_experts: int | None = None
    d_expert: int | None = None
    expansion_num: int = 2
    expansion_den: int = 1
    inner_mask: list[str] = field(default_factory=list)
    every_other: bool = False
    n_heads: int | None = None

    JSON_FIELDS = (
        "kind", "d_model", "n_blocks", "n_experts", "d_expert",
        "expansion_num", "expansion_den", "inner_mask", "every_other",
        "n_heads", "vocab_size",
    )

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.kind in (KIND_TRANSFORMER, KIND_TRANSFORMER_MOE):
            if self.n_heads is None:
                self.n_heads = 8
            if self.d_model % self.n_heads != 0:
                raise ValueError(f"n_heads {self.n_heads} must divide d_model {self.d_model}")
        if self.kind in (KIND_TRANSFORMER_MOE, KIND_MOE_MAMBA, KIND_PARALLEL, KIND_INNER):
            if self.n_experts is None or self.n_experts < 1:
                raise ValueError(f"{self.kind} requires n_experts >= 1")
        if self.kind in (KIND_TRANSFORMER_MOE, KIND_MOE_MAMBA, KIND_PARALLEL):
            if self.d_expert is None:
                self.d_expert = 3 * self.d_model
        if self.kind == KIND_INNER:
            if not self.inner_mask:
                raise ValueError("inner_moe_mamba requires a nonempty inner_mask")
            bad = set(self.inner_mask) - set(INNER_PROJECTIONS)
            if bad:
                raise ValueError(f"unknown projections in inner_mask: {sorted(bad)}")
            self.inner_mask = sorted(set(self.inner_mask), key=INNER_PROJECTIONS.index)

    @property
    def expansion(self) -> Fraction:
        return Fraction(self.expansion_num, self.expansion_den)

    @property
    def d_ff(self) -> int:
        # dense feed-forward width fixed at 4*d so the layer is exactly 8*d^2
        return 4 * self.d_model

    def mamba_config(self) -> MambaConfig:
        return MambaConfig(d_model=self.d_model, expansion=self.expansion)

    def block_specs(self) -> list[BlockSpec]:
        if self.kind == KIND_TRANSFORMER:
            pair = [BlockSpec(BLOCK_ATTENTION), BlockSpec(BLOCK_DENSE_FF)]
            return pair * self.n_blocks
        if self.kind == KIND_TRANSFORMER_MOE:
            pair = [BlockSpec(BLOCK_ATTENTION), BlockSpec(BLOCK_MOE_FF)]
            return pair * self.n_blocks
        if self.kind == KIND_MAMBA:
            return [BlockSpec(BLOCK_MAMBA)] * self.n_blocks
        if self.kind == KIND_MOE_MAMBA:
            pair = [BlockSpec(BLOCK_MAMBA), BlockSpec(BLOCK_MOE_FF)]
            return pair * self.n_blocks
        if self.kind == KIND_PARALLEL:
            return [BlockSpec(BLOCK_PARALLEL)] * self.n_blocks
        # inner family: modified blocks carry the expert banks; in
        # every-other mode the even-indexed blocks are modified
        inner = BlockSpec(BLOCK_INNER, frozenset(self.inner_mask), self.n_experts)
        if not self.every_other:
            return [inner] * self.n_blocks
        return [inner if i % 2 == 0 else BlockSpec(BLOCK_MAMBA) for i in range(self.n_blocks)]

    def to_json(self) -> str:
        doc = {name: getattr(self, name) for name in self.JSON_FIELDS}
        return json.dumps(doc, indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        unknown = set(doc) - set(cls.JSON_FIELDS)
        if unknown:
            raise ValueError(f"unknown model fields: {sorted(unknown)}")
        kwargs = {k: v for k, v in doc.items() if v is not None}
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


# --- blocks ----------------------------------------------------------------


class RmsNorm:
    def __init__(self, d: int, dtype):
        self.gain = _param(np.ones(d), dtype, decay=False)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain}

    def forward(self, x: Tensor) -> Tensor:
        return T.rmsnorm(x, self.gain)

    def param_count(self) -> int:
        return self.gain.data.size


class InnerMoEMambaLayer:
    """Selective-SSM block with some projections swapped for expert banks.

    The gate and conv projections here are separate d -> Ed maps (their
    fused form in the plain block is an implementation detail), so each can
    be a dense matrix or a routed bank independently; same for the Ed -> d
    output projection. Bank routing is per token.
    """

    def __init__(self, config: MambaConfig, mask: frozenset[str], n_experts: int,
                 rng: np.random.Generator, dtype=np.float32, scan_mode: str = "sequential"):
        self.config = config
        self.mask = mask
        self.n_experts = n_experts
        self.scan_mode = scan_mode
        d, ed, k = config.d_model, config.d_inner, config.d_conv

        def proj(name: str, d_in: int, d_out: int):
            if name in mask:
                return LinearExpertBank(d_in, d_out, n_experts, rng, dtype)
            return _param(rng.normal(0.0, d_in ** -0.5, size=(d_in, d_out)), dtype, decay=True)

        self.gate_proj = proj("gate_proj", d, ed)
        self.conv_proj = proj("conv_proj", d, ed)
        self.conv_kernel = _param(rng.uniform(-(k ** -0.5), k ** -0.5, size=(ed, k)), dtype, decay=True)
        self.conv_bias = _param(np.zeros(ed), dtype, decay=False)
        self.ssm = SsmCore.create(config, rng, dtype)
        self.output_proj = proj("output_proj", ed, d)

    def parameters(self, prefix: str = "inner") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, p in (("gate_proj", self.gate_proj), ("conv_proj", self.conv_proj)):
            if isinstance(p, LinearExpertBank):
                params.update(p.parameters(f"{prefix}.{name}"))
            else:
                params[f"{prefix}.{name}"] = p
        params[f"{prefix}.conv_kernel"] = self.conv_kernel
        params[f"{prefix}.conv_bias"] = self.conv_bias
        params.update(self.ssm.parameters(prefix))
        if isinstance(self.output_proj, LinearExpertBank):
            params.update(self.output_proj.parameters(f"{prefix}.output_proj"))
        else:
            params[f"{prefix}.output_proj"] = self.output_proj
        return params

    def _apply(self, p, x2d: Tensor, aux: list[Tensor], drops: list[float]) -> Tensor:
        if isinstance(p, LinearExpertBank):
            y, bank_aux, dropped = p.forward(x2d)
            aux.append(bank_aux)
            drops.append(dropped)
            return y
        return T.matmul(x2d, p)

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor], list[float]]:
        batch, length, d = x.shape
        ed = self.config.d_inner
        aux: list[Tensor] = []
        drops: list[float] = []
        x2d = T.reshape(x, (batch * length, d))
        gate = T.reshape(self._apply(self.gate_proj, x2d, aux, drops), (batch, length, ed))
        conv_in = T.reshape(self._apply(self.conv_proj, x2d, aux, drops), (batch, length, ed))
        u = T.silu(T.conv1d_depthwise_causal(conv_in, self.conv_kernel, self.conv_bias))
        y = self.ssm.run(u, self.scan_mode)
        gated = T.reshape(T.mul(y, T.silu(gate)), (batch * length, ed))
        out = T.reshape(self._apply(self.output_proj, gated, aux, drops), (batch, length, d))
        return out, aux, drops


class Block:
    """Pre-norm residual wrapper around one or two mixers."""

    def __init__(self, spec: BlockSpec, model_spec: ModelSpec, rng: np.random.Generator,
                 dtype, scan_mode: str):
        self.spec = spec
        self.dtype = dtype
        d = model_spec.d_model
        self.norm = RmsNorm(d, dtype)
        self.norm2 = None
        kind = spec.kind
        if kind == BLOCK_ATTENTION:
            self.mixer = AttentionLayer(d, model_spec.n_heads, rng, dtype)
        elif kind == BLOCK_DENSE_FF:
            self.mixer = DenseFeedForward(d, model_spec.d_ff, rng, dtype)
        elif kind == BLOCK_MOE_FF:
            cfg = SwitchConfig(model_spec.n_experts, d, model_spec.d_expert)
            self.mixer = SwitchMoELayer(cfg, rng, dtype)
        elif kind == BLOCK_MAMBA:
            self.mixer = MambaLayer(model_spec.mamba_config(), rng, dtype, scan_mode)
        elif kind == BLOCK_PARALLEL:
            self.mixer = MambaLayer(model_spec.mamba_config(), rng, dtype, scan_mode)
            cfg = SwitchConfig(model_spec.n_experts, d, model_spec.d_expert)
            self.moe = SwitchMoELayer(cfg, rng, dtype)
        elif kind == BLOCK_INNER:
            self.mixer = InnerMoEMambaLayer(
                model_spec.mamba_config(), spec.inner_mask, spec.experts_per_projection,
                rng, dtype, scan_mode,
            )
        else:
            raise ValueError(f"unknown block kind {kind!r}")

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        params = self.norm.parameters(f"{prefix}.norm")
        params.update(self.mixer.parameters(f"{prefix}.{self.spec.kind}"))
        if self.spec.kind == BLOCK_PARALLEL:
            params.update(self.moe.parameters(f"{prefix}.MoEFF"))
        return params

    def forward(self, x: Tensor, aux: list[Tensor], drops: list[float]) -> Tensor:
        normed = self.norm.forward(x)
        kind = self.spec.kind
        if kind in (BLOCK_ATTENTION, BLOCK_MAMBA):
            return T.add(x, self.mixer.forward(normed))
        if kind == BLOCK_DENSE_FF:
            return T.add(x, self.mixer.forward(normed))
        batch, length, d = x.shape
        if kind == BLOCK_MOE_FF:
            y2d, block_aux, dropped = self.mixer.forward(T.reshape(normed, (batch * length, d)))
            aux.append(block_aux)
            drops.append(dropped)
            return T.add(x, T.reshape(y2d, (batch, length, d)))
        if kind == BLOCK_PARALLEL:
            # one shared normalized input, one residual add for both branches
            ssm_out = self.mixer.forward(normed)
            y2d, block_aux, dropped = self.moe.forward(T.reshape(normed, (batch * length, d)))
            aux.append(block_aux)
            drops.append(dropped)
            return T.add(x, T.add(ssm_out, T.reshape(y2d, (batch, length, d))))
        out, block_aux, block_drops = self.mixer.forward(normed)
        aux.extend(block_aux)
        drops.extend(block_drops)
        return T.add(x, out)


class Model:
    """Embedding, pre-norm residual block stack, final norm, untied unembedding."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32, scan_mode: str = "sequential"):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d, v = spec.d_model, spec.vocab_size
        self.embedding = _param(rng.normal(0.0, 0.02, size=(v, d)), dtype, decay=True)
        self.blocks = [
            Block(bs, spec, rng, dtype, scan_mode) for bs in spec.block_specs()
        ]
        self.final_norm = RmsNorm(d, dtype)
        self.unembedding = _param(rng.normal(0.0, 0.02, size=(d, v)), dtype, decay=True)

    def parameters(self) -> dict[str, Tensor]:
        params = {"embedding": self.embedding}
        for i, block in enumerate(self.blocks):
            params.update(block.parameters(f"block{i}"))
        params.update(self.final_norm.parameters("final_norm"))
        params["unembedding"] = self.unembedding
        return params

    def forward(self, ids: np.ndarray) -> tuple[Tensor, Tensor | None, list[float]]:
        """ids [B, L] -> (logits [B, L, V], total aux loss or None, per-bank
        dropped fractions in block order)."""
        aux: list[Tensor] = []
        drops: list[float] = []
        x = T.embedding(self.embedding, ids)
        for block in self.blocks:
            x = block.forward(x, aux, drops)
        logits = T.matmul(self.final_norm.forward(x), self.unembedding)
        total_aux = None
        if aux:
            total_aux = aux[0]
            for extra in aux[1:]:
                total_aux = T.add(total_aux, extra)
        return logits, total_aux, drops

    def loss(self, inputs: np.ndarray, targets: np.ndarray) -> tuple[Tensor, Tensor | None, list[float]]:
        """Next-token cross entropy over a batch, plus aux loss and drops."""
        logits, total_aux, drops = self.forward(inputs)
        batch, length, v = logits.shape
        flat = T.reshape(logits, (batch * length, v))
        ce = T.cross_entropy(flat, np.asarray(targets).reshape(-1))
        return ce, total_aux, drops


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32, scan_mode: str = "sequential") -> Model:
    return Model(spec, seed=seed, dtype=dtype, scan_mode=scan_mode)


# --- the named variant family ----------------------------------------------


def inner_variant_name(mask, every_other: bool) -> str:
    parts = [p.removesuffix("_proj") for p in INNER_PROJECTIONS if p in mask]
    suffix = "every_other" if every_other else "all"
    return "inner_" + "_".join(parts) + "_" + suffix


def inner_masks() -> list[frozenset[str]]:
    """The 7 nonempty subsets of {conv_proj, gate_proj, output_proj}, in
    conv < gate < output order: singletons, pairs, then the full set."""
    masks = []
    for size in (1, 2, 3):
        for bits in range(1, 8):
            picked = [p for i, p in enumerate(INNER_PROJECTIONS) if bits >> i & 1]
            if len(picked) == size:
                masks.append(frozenset(picked))
    return masks


def enumerate_variants(
    d_model: int = 64,
    n_blocks: int = 2,
    vocab_size: int = 256,
    n_experts: int = 8,
    d_expert: int | None = None,
    n_heads: int = 8,
    inner_total_experts: int = 24,
) -> dict[str, ModelSpec]:
    """All 19 named stack variants: 3 baselines, sequential, parallel, and
    7 + 7 inner-expert designs.

    Inner designs split ``inner_total_experts`` evenly across the masked
    projections; the every-other designs double the total so the modified
    half of the blocks holds the same number of parameters.
    """
    common = dict(d_model=d_model, n_blocks=n_blocks, vocab_size=vocab_size)
    variants: dict[str, ModelSpec] = {
        "transformer": ModelSpec(kind=KIND_TRANSFORMER, n_heads=n_heads, **common),
        "transformer_moe": ModelSpec(
            kind=KIND_TRANSFORMER_MOE, n_heads=n_heads,
            n_experts=n_experts, d_expert=d_expert, **common),
        "mamba": ModelSpec(kind=KIND_MAMBA, **common),
        "moe_mamba": ModelSpec(
            kind=KIND_MOE_MAMBA, n_experts=n_experts, d_expert=d_expert, **common),
        "parallel_moe_mamba": ModelSpec(
            kind=KIND_PARALLEL, n_experts=n_experts, d_expert=d_expert, **common),
    }
    for every_other in (False, True):
        total = inner_total_experts * (2 if every_other else 1)
        for mask in inner_masks():
            per_projection = total // len(mask)
            spec = ModelSpec(
                kind=KIND_INNER, n_experts=per_projection,
                inner_mask=sorted(mask, key=INNER_PROJECTIONS.index),
                every_other=every_other, **common)
            variants[inner_variant_name(mask, every_other)] = spec
    return variants
