"""Mixture-of-experts layer: gating, expert math, and the reference forward.

Gating keeps the exact softmax probabilities of the selected experts as
combination weights -- there is no renormalization over the selected set.
Ties in the softmax break toward the lower expert index, and every
accumulation over experts runs in ascending expert-index order so that a
reordered executor can reproduce the same bits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import ShapeError, gelu, matmul, relu, softmax_rows, top_k_indices

ROUTING_KINDS = ("single", "multi_gate", "task_conditioned")
TASK_EMBED_DIM = 64
DEFAULT_BALANCING_WEIGHT = 0.01


@dataclass(frozen=True)
class ExpertParams:
    """One expert: y = w2 @ gelu(w1 @ x + b1) + b2, acting on C-dim tokens."""

    w1: np.ndarray  # (C, H)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, C)
    b2: np.ndarray  # (C,)

    def __post_init__(self):
        c, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h, c) or self.b2.shape != (c,):
            raise ShapeError(
                f"inconsistent expert shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )

    @property
    def token_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]


@dataclass(frozen=True)
class RouterParams:
    """Single-layer router producing one logit per expert."""

    wg: np.ndarray  # (C_in, N)
    bg: np.ndarray  # (N,)

    @property
    def n_experts(self) -> int:
        return self.wg.shape[1]


@dataclass(frozen=True)
class TaskEmbedderParams:
    """Two-layer MLP (hidden 64, output 64) over a one-hot task vector.

    Both layers are followed by ReLU; the embedding depends only on the
    task index, never on token content.
    """

    w1: np.ndarray  # (n_tasks, 64)
    b1: np.ndarray  # (64,)
    w2: np.ndarray  # (64, 64)
    b2: np.ndarray  # (64,)

    @property
    def n_tasks(self) -> int:
        return self.w1.shape[0]


@dataclass(frozen=True)
class MoeLayerParams:
    """A full MoE layer: N experts plus routing parameters for one kind.

    ``routers`` holds one router for the "single" and "task_conditioned"
    kinds and one per task for "multi_gate".  ``task_embedder`` is only
    present for "task_conditioned".
    """

    experts: list[ExpertParams]
    routers: list[RouterParams]
    top_k: int
    routing_kind: str = "single"
    task_embedder: TaskEmbedderParams | None = None

    def __post_init__(self):
        if self.routing_kind not in ROUTING_KINDS:
            raise ShapeError(f"unknown routing kind {self.routing_kind!r}")
        if not 0 < self.top_k <= len(self.experts):
            raise ShapeError(f"top_k {self.top_k} out of range for {len(self.experts)} experts")
        if self.routing_kind == "task_conditioned" and self.task_embedder is None:
            raise ShapeError("task_conditioned routing requires a task embedder")
        for r in self.routers:
            if r.n_experts != len(self.experts):
                raise ShapeError(
                    f"router emits {r.n_experts} logits for {len(self.experts)} experts"
                )

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def token_dim(self) -> int:
        return self.experts[0].token_dim


@dataclass(frozen=True)
class GatingDecision:
    """Routing outcome for a batch of tokens.

    ``expert_ids[t]`` lists token t's selected experts in descending gate
    weight (ties toward the lower index); ``gate_weights`` are the matching
    raw softmax entries; ``full_softmax`` keeps the distribution over all
    experts for the balancing statistics.
    """

    expert_ids: np.ndarray  # (T, K) int64
    gate_weights: np.ndarray  # (T, K) float32
    full_softmax: np.ndarray  # (T, N) float32

    @property
    def n_tokens(self) -> int:
        return self.expert_ids.shape[0]

    @property
    def top_k(self) -> int:
        return self.expert_ids.shape[1]

    @property
    def n_experts(self) -> int:
        return self.full_softmax.shape[1]


def gate_logits(router: RouterParams, tokens: np.ndarray) -> np.ndarray:
    """Router logits, one row per token: tokens @ wg + bg."""
    return matmul(tokens, router.wg) + router.bg


def top_k_gate(logits: np.ndarray, k: int) -> GatingDecision:
    """Select the k most probable experts per token, keeping raw softmax weights."""
    full = softmax_rows(logits)
    t, n = full.shape
    if not 0 < k <= n:
        raise ShapeError(f"top_k {k} out of range for {n} experts")
    ids = np.empty((t, k), dtype=np.int64)
    for row in range(t):
        ids[row] = top_k_indices(full[row], k)
    weights = np.take_along_axis(full, ids, axis=1)
    return GatingDecision(expert_ids=ids, gate_weights=weights, full_softmax=full)


def expert_forward(expert: ExpertParams, x: np.ndarray) -> np.ndarray:
    """Apply one expert to a batch of rows: w2-projection of gelu(w1 x + b1)."""
    h = gelu(matmul(x, expert.w1) + expert.b1)
    return matmul(h, expert.w2) + expert.b2


def moe_forward_reference(
    layer: MoeLayerParams, tokens: np.ndarray, decision: GatingDecision
) -> np.ndarray:
    """Token-serial reference: each token visits its experts one at a time.

    Per token, contributions accumulate in ascending expert-index order;
    this fixes the bit pattern any other execution order must reproduce.
    """
    out = np.zeros_like(tokens)
    for t in range(tokens.shape[0]):
        row = tokens[t : t + 1]
        ids = decision.expert_ids[t]
        order = np.argsort(ids)
        for slot in order:
            e = int(ids[slot])
            w = decision.gate_weights[t, slot]
            out[t] = out[t] + w * expert_forward(layer.experts[e], row)[0]
    return out


def select_multi_gate(layer: MoeLayerParams, tokens: np.ndarray, task_id: int) -> GatingDecision:
    """Route with the task's own router; experts are shared across tasks."""
    if not 0 <= task_id < len(layer.routers):
        raise ShapeError(f"task_id {task_id} out of range for {len(layer.routers)} routers")
    return top_k_gate(gate_logits(layer.routers[task_id], tokens), layer.top_k)


def task_embed(params: TaskEmbedderParams, task_id: int) -> np.ndarray:
    """64-dim embedding of a task index via the one-hot two-layer MLP."""
    if not 0 <= task_id < params.n_tasks:
        raise ShapeError(f"task_id {task_id} out of range for {params.n_tasks} tasks")
    onehot = np.zeros((1, params.n_tasks), dtype=np.float32)
    onehot[0, task_id] = 1.0
    h = relu(matmul(onehot, params.w1) + params.b1)
    return relu(matmul(h, params.w2) + params.b2)[0]


def select_task_conditioned(
    layer: MoeLayerParams, tokens: np.ndarray, task_id: int
) -> GatingDecision:
    """Route on tokens concatenated with the task embedding (shared router)."""
    if layer.task_embedder is None:
        raise ShapeError("layer has no task embedder")
    emb = task_embed(layer.task_embedder, task_id)
    aug = np.concatenate([tokens, np.tile(emb, (tokens.shape[0], 1))], axis=1)
    return top_k_gate(gate_logits(layer.routers[0], aug), layer.top_k)


def route(layer: MoeLayerParams, tokens: np.ndarray, task_id: int = 0) -> GatingDecision:
    """Dispatch to the layer's routing kind."""
    if layer.routing_kind == "single":
        return top_k_gate(gate_logits(layer.routers[0], tokens), layer.top_k)
    if layer.routing_kind == "multi_gate":
        return select_multi_gate(layer, tokens, task_id)
    return select_task_conditioned(layer, tokens, task_id)


def _cv_squared(v: np.ndarray) -> float:
    mean = float(v.mean())
    if mean == 0.0:
        return 0.0
    return float(v.var()) / (mean * mean)


def balancing_loss(
    decision: GatingDecision, weight: float = DEFAULT_BALANCING_WEIGHT
) -> float:
    """weight * (CV^2 of importance + CV^2 of load) over the experts.

    Importance sums each expert's full softmax probability over tokens;
    load counts hard selections.  CV^2 uses the population variance.
    """
    importance = decision.full_softmax.astype(np.float64).sum(axis=0)
    load = np.bincount(
        decision.expert_ids.ravel(), minlength=decision.n_experts
    ).astype(np.float64)
    return weight * (_cv_squared(importance) + _cv_squared(load))
