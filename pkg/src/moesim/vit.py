"""Forward-only vision transformer with MoE layers in place of some MLPs.

Blocks are pre-norm: x += attention(LN(x)); then x += mlp_or_moe(LN(x)).
Every ``moe_every``-th block (1-indexed) carries an MoE layer instead of
the dense MLP; ``moe_every = 0`` disables MoE entirely.  The forward pass
records each MoE layer's input tokens and gating decision so a scheduler
can replay exactly the same computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import ShapeError, layer_norm, matmul, softmax_rows
from .moe import (
    ROUTING_KINDS,
    TASK_EMBED_DIM,
    ExpertParams,
    GatingDecision,
    MoeLayerParams,
    expert_forward,
    moe_forward_reference,
    route,
)


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the model; all derived sizes hang off this."""

    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    patch_size: int = 8
    hidden_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 2
    mlp_ratio: float = 4.0
    moe_every: int = 2
    expert_count: int = 16
    top_k: int = 4
    expert_hidden: int | None = None
    n_tasks: int = 2
    routing_kind: str = "single"

    def __post_init__(self):
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ShapeError("image size must be divisible by patch size")
        if self.hidden_dim % self.num_heads:
            raise ShapeError("hidden_dim must be divisible by num_heads")
        if self.routing_kind not in ROUTING_KINDS:
            raise ShapeError(f"unknown routing kind {self.routing_kind!r}")
        if self.moe_every < 0:
            raise ShapeError("moe_every must be >= 0")
        if not 0 < self.top_k <= self.expert_count:
            raise ShapeError("top_k must be in [1, expert_count]")
        if self.n_tasks < 1:
            raise ShapeError("n_tasks must be >= 1")
        dense_hidden = self.mlp_ratio * self.hidden_dim
        if dense_hidden != int(dense_hidden):
            raise ShapeError("mlp_ratio * hidden_dim must be an integer")
        if self.expert_hidden is None and self.moe_every:
            eh = dense_hidden / self.top_k
            if eh != int(eh):
                raise ShapeError(
                    "default expert hidden (mlp_ratio * hidden_dim / top_k) is not an "
                    "integer; set expert_hidden explicitly"
                )

    @property
    def tokens(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def d_head(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def dense_hidden(self) -> int:
        return int(self.mlp_ratio * self.hidden_dim)

    @property
    def expert_hidden_resolved(self) -> int:
        if self.expert_hidden is not None:
            return self.expert_hidden
        return self.dense_hidden // self.top_k

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def is_moe_block(self, block_index: int) -> bool:
        """True when the 0-indexed block carries an MoE layer."""
        return self.moe_every > 0 and (block_index + 1) % self.moe_every == 0

    @property
    def moe_block_indices(self) -> list[int]:
        return [i for i in range(self.num_blocks) if self.is_moe_block(i)]

    @property
    def n_moe_blocks(self) -> int:
        return len(self.moe_block_indices)

    @property
    def n_dense_blocks(self) -> int:
        return self.num_blocks - self.n_moe_blocks


@dataclass(frozen=True)
class PatchEmbedParams:
    projection: np.ndarray  # (patch_size^2 * channels, C)
    bias: np.ndarray  # (C,)
    pos_embed: np.ndarray  # (T, C)


@dataclass(frozen=True)
class AttentionParams:
    """Per-head projection matrices (no biases) plus the output projection."""

    wq: list[np.ndarray]  # each (C, d_head)
    wk: list[np.ndarray]
    wv: list[np.ndarray]
    wo: np.ndarray  # (C, C)


@dataclass(frozen=True)
class BlockParams:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    attn: AttentionParams
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    mlp: ExpertParams | None = None  # dense MLP (same math as one expert)
    moe: MoeLayerParams | None = None

    def __post_init__(self):
        if (self.mlp is None) == (self.moe is None):
            raise ShapeError("a block carries exactly one of a dense MLP or an MoE layer")


@dataclass(frozen=True)
class ModelParams:
    patch: PatchEmbedParams
    blocks: list[BlockParams]
    ln_f_gamma: np.ndarray
    ln_f_beta: np.ndarray


@dataclass(frozen=True)
class MoeRecord:
    """One MoE layer's replayable inputs: the tokens it saw and its routing."""

    block_index: int
    inputs: np.ndarray  # (T, C) tokens after the block's second layer norm
    decision: GatingDecision


@dataclass(frozen=True)
class ForwardResult:
    tokens: np.ndarray  # (T, C) final features
    moe_records: list[MoeRecord]

    @property
    def decisions(self) -> list[GatingDecision]:
        return [r.decision for r in self.moe_records]


def extract_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Flatten non-overlapping patches row-major: patch grid, then row/col/channel."""
    h, w, ch = image.shape
    p = patch_size
    gh, gw = h // p, w // p
    patches = np.empty((gh * gw, p * p * ch), dtype=np.float32)
    idx = 0
    for pr in range(gh):
        for pc in range(gw):
            patches[idx] = image[pr * p : (pr + 1) * p, pc * p : (pc + 1) * p, :].reshape(-1)
            idx += 1
    return patches


def patch_embed(params: PatchEmbedParams, image: np.ndarray, patch_size: int) -> np.ndarray:
    """Project flattened patches to token features and add position embeddings."""
    if image.dtype != np.float32 or image.ndim != 3:
        raise ShapeError(f"image must be float32 (H, W, C), got {image.dtype} {image.shape}")
    patches = extract_patches(image, patch_size)
    return matmul(patches, params.projection) + params.bias + params.pos_embed


def self_attention(attn: AttentionParams, tokens: np.ndarray) -> np.ndarray:
    """Multi-head scaled dot-product attention over the token sequence."""
    d_head = attn.wq[0].shape[1]
    scale = np.float32(1.0 / math.sqrt(d_head))
    heads = []
    for wq, wk, wv in zip(attn.wq, attn.wk, attn.wv):
        q = matmul(tokens, wq)
        k = matmul(tokens, wk)
        v = matmul(tokens, wv)
        weights = softmax_rows(matmul(q, k.T) * scale)
        heads.append(matmul(weights, v))
    return matmul(np.concatenate(heads, axis=1), attn.wo)


def model_forward(
    config: ModelConfig, params: ModelParams, image: np.ndarray, task_id: int = 0
) -> ForwardResult:
    """Run the full model on one image, recording every MoE layer's work."""
    x = patch_embed(params.patch, image, config.patch_size)
    records: list[MoeRecord] = []
    for i, block in enumerate(params.blocks):
        x = x + self_attention(block.attn, layer_norm(x, block.ln1_gamma, block.ln1_beta))
        h = layer_norm(x, block.ln2_gamma, block.ln2_beta)
        if block.moe is not None:
            decision = route(block.moe, h, task_id)
            records.append(MoeRecord(block_index=i, inputs=h, decision=decision))
            x = x + moe_forward_reference(block.moe, h, decision)
        else:
            x = x + expert_forward(block.mlp, h)
    x = layer_norm(x, params.ln_f_gamma, params.ln_f_beta)
    return ForwardResult(tokens=x, moe_records=records)


# --- FLOP accounting (multiply-accumulate counts; 1 MAC = 2 FLOPs) ---


def dense_mlp_per_token_macs(config: ModelConfig) -> int:
    """MACs one token spends in a dense MLP: up- and down-projection."""
    return 2 * config.hidden_dim * config.dense_hidden


def moe_expert_per_token_macs(config: ModelConfig) -> int:
    """MACs one token spends across its top_k experts in an MoE layer."""
    return config.top_k * 2 * config.hidden_dim * config.expert_hidden_resolved


@dataclass(frozen=True)
class FlopBreakdown:
    """Per-frame multiply-accumulate counts by component."""

    patch_embed: int
    attention: int
    dense_mlp: int
    moe_experts: int
    moe_router: int

    @property
    def total_macs(self) -> int:
        return self.patch_embed + self.attention + self.dense_mlp + self.moe_experts + self.moe_router

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    def to_dict(self) -> dict:
        return {
            "macs": {
                "patch_embed": self.patch_embed,
                "attention": self.attention,
                "dense_mlp": self.dense_mlp,
                "moe_experts": self.moe_experts,
                "moe_router": self.moe_router,
                "total": self.total_macs,
            },
            "flops_total": self.total_flops,
        }


def flop_count(config: ModelConfig) -> FlopBreakdown:
    """Count per-frame MACs analytically from the config."""
    t, c = config.tokens, config.hidden_dim
    patch = t * config.patch_dim * c
    attention = config.num_blocks * (4 * t * c * c + 2 * t * t * c)
    dense = config.n_dense_blocks * t * dense_mlp_per_token_macs(config)
    moe = config.n_moe_blocks * t * moe_expert_per_token_macs(config)
    if config.routing_kind == "task_conditioned":
        router_in = c + TASK_EMBED_DIM
        embed = config.n_tasks * TASK_EMBED_DIM + TASK_EMBED_DIM * TASK_EMBED_DIM
        router = config.n_moe_blocks * (t * router_in * config.expert_count + embed)
    else:
        router = config.n_moe_blocks * t * c * config.expert_count
    return FlopBreakdown(
        patch_embed=patch,
        attention=attention,
        dense_mlp=dense,
        moe_experts=moe,
        moe_router=router,
    )


def non_moe_macs(config: ModelConfig) -> int:
    """Fixed per-frame work outside MoE layers: patch embed, attention, dense MLPs."""
    b = flop_count(config)
    return b.patch_embed + b.attention + b.dense_mlp
