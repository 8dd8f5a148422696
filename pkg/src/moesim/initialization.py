"""Deterministic model initialization keyed by (seed, tensor name).

Each tensor comes from its own counter-based Philox stream whose key is a
hash of the seed and the tensor's hierarchical name, so values depend only
on that pair -- never on how many tensors were created before it or on
which other modules exist.  Weights and biases are uniform in
[-0.02, 0.02]; layer-norm gains center at 1 instead of 0 so freshly
initialized models still propagate signal.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .moe import (
    ExpertParams,
    MoeLayerParams,
    RouterParams,
    TASK_EMBED_DIM,
    TaskEmbedderParams,
)
from .params_io import ContainerError
from .vit import (
    AttentionParams,
    BlockParams,
    ModelConfig,
    ModelParams,
    PatchEmbedParams,
)

WEIGHT_SCALE = 0.02


def keyed_generator(seed: int, name: str) -> np.random.Generator:
    """A counter-based stream that depends only on (seed, name)."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


def draw_tensor(seed: int, name: str, shape: tuple[int, ...]) -> np.ndarray:
    """The tensor ``name`` would have under ``seed``, independent of context."""
    return keyed_generator(seed, name).uniform(-WEIGHT_SCALE, WEIGHT_SCALE, shape).astype(np.float32)


def _tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor name in a model of this shape, with its shape."""
    c, t = config.hidden_dim, config.tokens
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.projection": (config.patch_dim, c),
        "patch_embed.bias": (c,),
        "patch_embed.pos": (t, c),
        "final.ln.gamma": (c,),
        "final.ln.beta": (c,),
    }
    for i in range(config.num_blocks):
        b = f"block{i:02d}"
        shapes[f"{b}.ln1.gamma"] = (c,)
        shapes[f"{b}.ln1.beta"] = (c,)
        shapes[f"{b}.ln2.gamma"] = (c,)
        shapes[f"{b}.ln2.beta"] = (c,)
        for h in range(config.num_heads):
            for proj in ("wq", "wk", "wv"):
                shapes[f"{b}.attn.head{h:02d}.{proj}"] = (c, config.d_head)
        shapes[f"{b}.attn.wo"] = (c, c)
        if config.is_moe_block(i):
            he = config.expert_hidden_resolved
            for e in range(config.expert_count):
                x = f"{b}.moe.expert{e:02d}"
                shapes[f"{x}.w1"] = (c, he)
                shapes[f"{x}.b1"] = (he,)
                shapes[f"{x}.w2"] = (he, c)
                shapes[f"{x}.b2"] = (c,)
            n_routers = config.n_tasks if config.routing_kind == "multi_gate" else 1
            router_in = c + TASK_EMBED_DIM if config.routing_kind == "task_conditioned" else c
            for r in range(n_routers):
                shapes[f"{b}.moe.router{r:02d}.wg"] = (router_in, config.expert_count)
                shapes[f"{b}.moe.router{r:02d}.bg"] = (config.expert_count,)
            if config.routing_kind == "task_conditioned":
                shapes[f"{b}.moe.embedder.w1"] = (config.n_tasks, TASK_EMBED_DIM)
                shapes[f"{b}.moe.embedder.b1"] = (TASK_EMBED_DIM,)
                shapes[f"{b}.moe.embedder.w2"] = (TASK_EMBED_DIM, TASK_EMBED_DIM)
                shapes[f"{b}.moe.embedder.b2"] = (TASK_EMBED_DIM,)
        else:
            hd = config.dense_hidden
            shapes[f"{b}.mlp.w1"] = (c, hd)
            shapes[f"{b}.mlp.b1"] = (hd,)
            shapes[f"{b}.mlp.w2"] = (hd, c)
            shapes[f"{b}.mlp.b2"] = (c,)
    return shapes


def _materialize(config: ModelConfig, fetch, gain_offset: bool) -> ModelParams:
    """Assemble ModelParams by pulling tensors from ``fetch(name)``.

    With ``gain_offset`` the layer-norm gains are shifted to center at 1
    (used at init time); stored tensors already carry the shift.
    """

    def ln_gamma(name):
        if gain_offset:
            return np.float32(1.0) + fetch(name)
        return fetch(name)

    patch = PatchEmbedParams(
        projection=fetch("patch_embed.projection"),
        bias=fetch("patch_embed.bias"),
        pos_embed=fetch("patch_embed.pos"),
    )
    blocks = []
    for i in range(config.num_blocks):
        b = f"block{i:02d}"
        attn = AttentionParams(
            wq=[fetch(f"{b}.attn.head{h:02d}.wq") for h in range(config.num_heads)],
            wk=[fetch(f"{b}.attn.head{h:02d}.wk") for h in range(config.num_heads)],
            wv=[fetch(f"{b}.attn.head{h:02d}.wv") for h in range(config.num_heads)],
            wo=fetch(f"{b}.attn.wo"),
        )
        mlp = moe = None
        if config.is_moe_block(i):
            experts = [
                ExpertParams(
                    w1=fetch(f"{b}.moe.expert{e:02d}.w1"),
                    b1=fetch(f"{b}.moe.expert{e:02d}.b1"),
                    w2=fetch(f"{b}.moe.expert{e:02d}.w2"),
                    b2=fetch(f"{b}.moe.expert{e:02d}.b2"),
                )
                for e in range(config.expert_count)
            ]
            n_routers = config.n_tasks if config.routing_kind == "multi_gate" else 1
            routers = [
                RouterParams(
                    wg=fetch(f"{b}.moe.router{r:02d}.wg"),
                    bg=fetch(f"{b}.moe.router{r:02d}.bg"),
                )
                for r in range(n_routers)
            ]
            embedder = None
            if config.routing_kind == "task_conditioned":
                embedder = TaskEmbedderParams(
                    w1=fetch(f"{b}.moe.embedder.w1"),
                    b1=fetch(f"{b}.moe.embedder.b1"),
                    w2=fetch(f"{b}.moe.embedder.w2"),
                    b2=fetch(f"{b}.moe.embedder.b2"),
                )
            moe = MoeLayerParams(
                experts=experts,
                routers=routers,
                top_k=config.top_k,
                routing_kind=config.routing_kind,
                task_embedder=embedder,
            )
        else:
            mlp = ExpertParams(
                w1=fetch(f"{b}.mlp.w1"),
                b1=fetch(f"{b}.mlp.b1"),
                w2=fetch(f"{b}.mlp.w2"),
                b2=fetch(f"{b}.mlp.b2"),
            )
        blocks.append(
            BlockParams(
                ln1_gamma=ln_gamma(f"{b}.ln1.gamma"),
                ln1_beta=fetch(f"{b}.ln1.beta"),
                attn=attn,
                ln2_gamma=ln_gamma(f"{b}.ln2.gamma"),
                ln2_beta=fetch(f"{b}.ln2.beta"),
                mlp=mlp,
                moe=moe,
            )
        )
    return ModelParams(
        patch=patch,
        blocks=blocks,
        ln_f_gamma=ln_gamma("final.ln.gamma"),
        ln_f_beta=fetch("final.ln.beta"),
    )


def seeded_init(config: ModelConfig, seed: int) -> ModelParams:
    """Build a full model whose every tensor is a pure function of (seed, name)."""
    shapes = _tensor_shapes(config)
    return _materialize(
        config, lambda name: draw_tensor(seed, name, shapes[name]), gain_offset=True
    )


def params_to_tensors(config: ModelConfig, params: ModelParams) -> dict[str, np.ndarray]:
    """Flatten a model into the named-tensor dict the binary container stores.

    Layer-norm gains are stored as-is (centered at 1); the +1 offset from
    :func:`seeded_init` is an initialization detail, not a storage one.
    """
    out: dict[str, np.ndarray] = {
        "patch_embed.projection": params.patch.projection,
        "patch_embed.bias": params.patch.bias,
        "patch_embed.pos": params.patch.pos_embed,
        "final.ln.gamma": params.ln_f_gamma,
        "final.ln.beta": params.ln_f_beta,
    }
    for i, blk in enumerate(params.blocks):
        b = f"block{i:02d}"
        out[f"{b}.ln1.gamma"] = blk.ln1_gamma
        out[f"{b}.ln1.beta"] = blk.ln1_beta
        out[f"{b}.ln2.gamma"] = blk.ln2_gamma
        out[f"{b}.ln2.beta"] = blk.ln2_beta
        for h in range(config.num_heads):
            out[f"{b}.attn.head{h:02d}.wq"] = blk.attn.wq[h]
            out[f"{b}.attn.head{h:02d}.wk"] = blk.attn.wk[h]
            out[f"{b}.attn.head{h:02d}.wv"] = blk.attn.wv[h]
        out[f"{b}.attn.wo"] = blk.attn.wo
        if blk.moe is not None:
            for e, expert in enumerate(blk.moe.experts):
                x = f"{b}.moe.expert{e:02d}"
                out[f"{x}.w1"] = expert.w1
                out[f"{x}.b1"] = expert.b1
                out[f"{x}.w2"] = expert.w2
                out[f"{x}.b2"] = expert.b2
            for r, router in enumerate(blk.moe.routers):
                out[f"{b}.moe.router{r:02d}.wg"] = router.wg
                out[f"{b}.moe.router{r:02d}.bg"] = router.bg
            if blk.moe.task_embedder is not None:
                emb = blk.moe.task_embedder
                out[f"{b}.moe.embedder.w1"] = emb.w1
                out[f"{b}.moe.embedder.b1"] = emb.b1
                out[f"{b}.moe.embedder.w2"] = emb.w2
                out[f"{b}.moe.embedder.b2"] = emb.b2
        else:
            out[f"{b}.mlp.w1"] = blk.mlp.w1
            out[f"{b}.mlp.b1"] = blk.mlp.b1
            out[f"{b}.mlp.w2"] = blk.mlp.w2
            out[f"{b}.mlp.b2"] = blk.mlp.b2
    return out


def tensors_to_params(config: ModelConfig, tensors: dict[str, np.ndarray]) -> ModelParams:
    """Rebuild ModelParams from a named-tensor dict; names must match exactly."""
    expected = _tensor_shapes(config)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ContainerError(f"missing tensors for this config: {missing[:5]}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise ContainerError(
                f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}"
            )
    return _materialize(config, lambda name: tensors[name], gain_offset=False)
