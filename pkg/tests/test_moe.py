import numpy as np
import pytest

from moesim.kernels import ShapeError, gelu
from moesim.moe import (
    ExpertParams,
    GatingDecision,
    MoeLayerParams,
    RouterParams,
    TaskEmbedderParams,
    balancing_loss,
    expert_forward,
    gate_logits,
    moe_forward_reference,
    route,
    select_multi_gate,
    select_task_conditioned,
    task_embed,
    top_k_gate,
)


def f32(x):
    return np.asarray(x, dtype=np.float32)


def rand_expert(rng, c, h):
    return ExpertParams(
        w1=rng.uniform(-0.5, 0.5, (c, h)).astype(np.float32),
        b1=rng.uniform(-0.1, 0.1, h).astype(np.float32),
        w2=rng.uniform(-0.5, 0.5, (h, c)).astype(np.float32),
        b2=rng.uniform(-0.1, 0.1, c).astype(np.float32),
    )


def rand_router(rng, c_in, n):
    return RouterParams(
        wg=rng.uniform(-0.5, 0.5, (c_in, n)).astype(np.float32),
        bg=rng.uniform(-0.1, 0.1, n).astype(np.float32),
    )


def rand_embedder(rng, n_tasks):
    return TaskEmbedderParams(
        w1=rng.uniform(-0.5, 0.5, (n_tasks, 64)).astype(np.float32),
        b1=rng.uniform(-0.1, 0.1, 64).astype(np.float32),
        w2=rng.uniform(-0.5, 0.5, (64, 64)).astype(np.float32),
        b2=rng.uniform(-0.1, 0.1, 64).astype(np.float32),
    )


def rand_layer(rng, c=8, n=4, k=2, h=None, kind="single", n_tasks=3):
    h = h or c
    experts = [rand_expert(rng, c, h) for _ in range(n)]
    embedder = None
    if kind == "multi_gate":
        routers = [rand_router(rng, c, n) for _ in range(n_tasks)]
    elif kind == "task_conditioned":
        routers = [rand_router(rng, c + 64, n)]
        embedder = rand_embedder(rng, n_tasks)
    else:
        routers = [rand_router(rng, c, n)]
    return MoeLayerParams(
        experts=experts, routers=routers, top_k=k, routing_kind=kind, task_embedder=embedder
    )


def moe_oracle_all_experts(layer, tokens, decision):
    """Independent route: run every expert on the whole batch, mask, and sum."""
    outs = [expert_forward(e, tokens) for e in layer.experts]
    acc = np.zeros_like(tokens)
    for t in range(tokens.shape[0]):
        ids = decision.expert_ids[t]
        slot_of = {int(ids[s]): s for s in range(ids.shape[0])}
        for e in sorted(slot_of):
            w = decision.gate_weights[t, slot_of[e]]
            acc[t] = acc[t] + w * outs[e][t]
    return acc


def test_top_k_gate_invariants():
    rng = np.random.default_rng(101)
    for _ in range(200):
        t = int(rng.integers(1, 12))
        n = int(rng.integers(2, 16))
        k = int(rng.integers(1, n + 1))
        logits = (rng.standard_normal((t, n)) * 3).astype(np.float32)
        d = top_k_gate(logits, k)
        assert d.expert_ids.shape == (t, k)
        for row in range(t):
            ids = d.expert_ids[row]
            assert len(set(ids.tolist())) == k
            assert ids.min() >= 0 and ids.max() < n
            # descending gate weight along the row
            assert all(
                d.gate_weights[row, j] >= d.gate_weights[row, j + 1] for j in range(k - 1)
            )
        gathered = np.take_along_axis(d.full_softmax, d.expert_ids, axis=1)
        assert np.array_equal(gathered, d.gate_weights)
        assert np.allclose(d.full_softmax.sum(axis=1), 1.0, atol=1e-6)
        assert (d.gate_weights.sum(axis=1) <= 1.0 + 1e-6).all()


def test_top_k_gate_keeps_raw_softmax_no_renormalization():
    d = top_k_gate(f32([[3.0, 0.0, 0.0, 0.0]]), 2)
    assert d.expert_ids[0].tolist() == [0, 1]
    # retained weights are the raw softmax entries, so they do not sum to 1
    assert float(d.gate_weights.sum()) < 0.99
    assert np.array_equal(d.gate_weights[0], d.full_softmax[0, [0, 1]])


def test_top_k_gate_ties_break_toward_lower_index():
    d = top_k_gate(f32([[1.0, 2.0, 2.0, 0.0]]), 2)
    assert d.expert_ids[0].tolist() == [1, 2]
    d = top_k_gate(f32([[5.0, 5.0, 5.0, 5.0]]), 4)
    assert d.expert_ids[0].tolist() == [0, 1, 2, 3]
    assert np.allclose(d.gate_weights[0], 0.25, atol=1e-6)


def test_top_k_gate_rejects_bad_k():
    with pytest.raises(ShapeError):
        top_k_gate(f32([[1.0, 2.0]]), 3)


def test_expert_forward_identity_weights_is_gelu():
    c = 6
    eye = np.eye(c, dtype=np.float32)
    zero = np.zeros(c, dtype=np.float32)
    expert = ExpertParams(w1=eye, b1=zero, w2=eye, b2=zero)
    x = (np.random.default_rng(5).standard_normal((4, c))).astype(np.float32)
    assert np.array_equal(expert_forward(expert, x), gelu(x))


def test_expert_forward_rows_are_batch_independent():
    rng = np.random.default_rng(7)
    expert = rand_expert(rng, 8, 12)
    x = rng.standard_normal((10, 8)).astype(np.float32)
    full = expert_forward(expert, x)
    rows = np.vstack([expert_forward(expert, x[i : i + 1]) for i in range(10)])
    assert np.array_equal(full, rows)


def test_moe_forward_reference_matches_all_expert_masked_oracle():
    rng = np.random.default_rng(11)
    for kind in ("single", "multi_gate", "task_conditioned"):
        for k in (1, 2, 4):
            layer = rand_layer(rng, c=8, n=4, k=k, kind=kind)
            tokens = rng.standard_normal((6, 8)).astype(np.float32)
            d = route(layer, tokens, task_id=1)
            assert np.array_equal(
                moe_forward_reference(layer, tokens, d),
                moe_oracle_all_experts(layer, tokens, d),
            )


def test_full_routing_weights_sum_to_one():
    rng = np.random.default_rng(13)
    layer = rand_layer(rng, c=8, n=4, k=4)
    tokens = rng.standard_normal((5, 8)).astype(np.float32)
    d = route(layer, tokens)
    assert np.allclose(d.gate_weights.sum(axis=1), 1.0, atol=1e-6)


def test_task_embed_is_a_function_of_the_task_only():
    rng = np.random.default_rng(17)
    emb = rand_embedder(rng, n_tasks=4)
    e0 = task_embed(emb, 0)
    assert e0.shape == (64,)
    assert (e0 >= 0).all()  # ReLU output
    assert np.array_equal(e0, task_embed(emb, 0))
    assert not np.array_equal(e0, task_embed(emb, 3))
    with pytest.raises(ShapeError):
        task_embed(emb, 4)


def test_task_conditioned_routing_varies_with_task():
    rng = np.random.default_rng(19)
    layer = rand_layer(rng, c=8, n=8, k=2, kind="task_conditioned", n_tasks=3)
    tokens = rng.standard_normal((16, 8)).astype(np.float32)
    d0 = select_task_conditioned(layer, tokens, 0)
    d1 = select_task_conditioned(layer, tokens, 1)
    assert not np.array_equal(d0.full_softmax, d1.full_softmax)


def test_multi_gate_uses_the_tasks_own_router():
    rng = np.random.default_rng(23)
    layer = rand_layer(rng, c=8, n=8, k=2, kind="multi_gate", n_tasks=2)
    tokens = rng.standard_normal((16, 8)).astype(np.float32)
    d0 = select_multi_gate(layer, tokens, 0)
    d1 = select_multi_gate(layer, tokens, 1)
    assert not np.array_equal(d0.full_softmax, d1.full_softmax)
    assert np.array_equal(
        d0.full_softmax,
        top_k_gate(gate_logits(layer.routers[0], tokens), 2).full_softmax,
    )
    with pytest.raises(ShapeError):
        select_multi_gate(layer, tokens, 2)


def test_balancing_loss_zero_for_perfectly_uniform_routing():
    # token t routes to experts {t, t+1, t+2, t+3} mod N with identical weight
    # patterns, so importance and load are both flat across experts.
    n, k = 8, 4
    logits = np.full((n, n), -10.0, dtype=np.float32)
    for t in range(n):
        for j in range(k):
            logits[t, (t + j) % n] = 10.0 - j
    d = top_k_gate(logits, k)
    assert abs(balancing_loss(d, weight=0.01)) < 1e-9


def test_balancing_loss_concentrated_example_is_two_hundredths():
    # four tokens, two experts, every token routed entirely to expert 0
    d = GatingDecision(
        expert_ids=np.zeros((4, 1), dtype=np.int64),
        gate_weights=np.ones((4, 1), dtype=np.float32),
        full_softmax=np.tile(f32([[1.0, 0.0]]), (4, 1)),
    )
    assert abs(balancing_loss(d, weight=0.01) - 0.02) < 1e-12
    # the same situation reached through extreme logits
    d2 = top_k_gate(np.tile(f32([[40.0, -40.0]]), (4, 1)), 1)
    assert abs(balancing_loss(d2, weight=0.01) - 0.02) < 1e-6


def test_layer_params_validation():
    rng = np.random.default_rng(29)
    experts = [rand_expert(rng, 4, 4) for _ in range(2)]
    wide_router = rand_router(rng, 4, 3)  # wrong width for 2 experts
    with pytest.raises(ShapeError):
        MoeLayerParams(experts=experts, routers=[wide_router], top_k=1)
    ok_router = rand_router(rng, 4, 2)
    with pytest.raises(ShapeError):
        MoeLayerParams(experts=experts, routers=[ok_router], top_k=3)
    with pytest.raises(ShapeError):
        MoeLayerParams(
            experts=experts, routers=[ok_router], top_k=1, routing_kind="task_conditioned"
        )
