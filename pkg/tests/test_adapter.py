"""Adapter-layer oracles: hand-chained forward, isolation, counting, routing."""
import numpy as np
import pytest

from clorae.adapter import (AdapterConfigError, CloraeLinear, ForwardContext,
                            LoraFactors, RoutingStats, count_trainable,
                            layer_groups_by_depth, routing_report)
from clorae.autodiff import Tensor
from clorae.gradcheck import finite_diff_check


def _randomized_layer(d_in=8, d_out=8, rank=4, n_tasks=2, seed=7, **kw):
    layer = CloraeLinear(d_in, d_out, rank, n_tasks, **kw)
    layer.initialize(seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in layer.named_parameters():
        if name.endswith(".B") or name.endswith("gate_weight"):
            p.data[...] = rng.normal(0.0, 0.3, p.data.shape)
    return layer


# -- lora_delta ------------------------------------------------------------------


def test_lora_delta_zero_init_gives_zero():
    f = LoraFactors(5, 4, rank=2)
    f.initialize(0)
    x = Tensor(np.random.default_rng(1).normal(size=(3, 5)))
    out = f.delta(x, ForwardContext())
    assert np.array_equal(out.data, np.zeros((3, 4)))


def test_lora_delta_hand_case():
    # A = [[1, 1]], B = [[2], [3]]: x=[1,2] -> Ax = 3 -> B*3 = [6, 9]
    f = LoraFactors(2, 2, rank=1)
    f.A.data[...] = [[1.0, 1.0]]
    f.B.data[...] = [[2.0], [3.0]]
    out = f.delta(Tensor([[1.0, 2.0]]), ForwardContext())
    assert np.allclose(out.data, [[6.0, 9.0]], atol=1e-14)


def test_lora_delta_matches_dense_product_oracle():
    rng = np.random.default_rng(5)
    f = LoraFactors(7, 6, rank=3)
    f.A.data[...] = rng.normal(size=(3, 7))
    f.B.data[...] = rng.normal(size=(6, 3))
    x = rng.normal(size=(4, 7))
    got = f.delta(Tensor(x), ForwardContext()).data
    want = x @ (f.B.data @ f.A.data).T
    assert np.max(np.abs(got - want)) <= 1e-10


def test_lora_factors_rank_validation():
    with pytest.raises(AdapterConfigError):
        LoraFactors(4, 4, rank=5)
    with pytest.raises(AdapterConfigError):
        LoraFactors(4, 4, rank=0)


# -- gate ------------------------------------------------------------------------


def test_gate_zero_weights_gives_even_split():
    layer = CloraeLinear(2, 2, rank=2, n_tasks=2)
    layer.initialize(0)  # router init is zeros
    g = layer.gate(Tensor([[3.0, -1.0]]))
    assert np.allclose(g.data, [[0.5, 0.5]], atol=1e-15)


def test_gate_pair_sums_to_one():
    layer = _randomized_layer(d_in=6, d_out=6, rank=2)
    rng = np.random.default_rng(8)
    g = layer.gate(Tensor(rng.normal(size=(100, 6)))).data
    assert np.max(np.abs(g.sum(axis=-1) - 1.0)) <= 1e-12
    assert np.all(g > 0)


def test_gate_exp_normalize_oracle():
    layer = CloraeLinear(2, 2, rank=2, n_tasks=2)
    layer.gate_weight.data[...] = np.eye(2)
    g = layer.gate(Tensor([[2.0, 0.0]])).data
    want = np.exp([2.0, 0.0]) / np.exp([2.0, 0.0]).sum()
    assert np.max(np.abs(g[0] - want)) <= 1e-12
    assert np.allclose(g[0], [0.8808, 0.1192], atol=5e-5)


# -- clorae_forward -----------------------------------------------------------------


def test_forward_zero_init_equals_frozen_base_exactly():
    layer = CloraeLinear(8, 8, rank=4, n_tasks=2, dropout_p=0.1)
    layer.initialize(3)
    x = np.random.default_rng(4).normal(size=(5, 8))
    for task in range(2):
        y = layer(Tensor(x), task, ForwardContext())
        assert np.array_equal(y.data, x @ layer.weight.data.T)


def test_forward_alpha_equals_rank_means_unit_scale():
    layer = _randomized_layer(rank=4)
    assert layer.alpha == 4.0
    x = np.random.default_rng(0).normal(size=(3, 8))
    ctx = ForwardContext()
    y = layer(Tensor(x), 0, ctx).data
    base = x @ layer.weight.data.T
    uni = x @ (layer.universal.B.data @ layer.universal.A.data).T
    tsk = x @ (layer.task_experts[0].B.data @ layer.task_experts[0].A.data).T
    logits = x @ layer.gate_weight.data.T
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    g = e / e.sum(axis=-1, keepdims=True)
    want = base + g[:, 0:1] * uni + g[:, 1:2] * tsk
    assert np.max(np.abs(y - want)) <= 1e-12


def test_forward_hand_chained_oracle():
    """Scalar chain through base, both experts, the gate and the scaled sum."""
    layer = CloraeLinear(2, 2, rank=2, n_tasks=2, alpha=4.0)
    layer.weight.data[...] = [[1.0, 0.0], [0.0, 2.0]]
    layer.universal.A.data[...] = [[1.0, 0.0], [0.0, 1.0]]
    layer.universal.B.data[...] = [[0.5, 0.0], [0.0, 0.5]]
    layer.task_experts[1].A.data[...] = [[1.0, 1.0]]
    layer.task_experts[1].B.data[...] = [[1.0], [2.0]]
    layer.gate_weight.data[...] = [[1.0, 0.0], [0.0, 1.0]]
    x = np.array([[1.0, 2.0]])
    # scalar oracle
    base = np.array([1.0, 4.0])
    uni = np.array([0.5, 1.0])          # B_u A_u x
    tsk = np.array([3.0, 6.0])          # rank-1 task pair: A x = 3, B [1, 2]
    logits = np.array([1.0, 2.0])       # W_g x
    g = np.exp(logits - 2.0)
    g /= g.sum()
    want = base + (4.0 / 2.0) * (g[0] * uni + g[1] * tsk)
    got = layer(Tensor(x), 1, ForwardContext()).data[0]
    assert np.max(np.abs(got - want)) <= 1e-12


def test_task_forward_out_of_range_names_count():
    layer = _randomized_layer(n_tasks=2)
    with pytest.raises(AdapterConfigError, match="2 experts"):
        layer(Tensor(np.zeros((1, 8))), 5, ForwardContext())


def test_rank_split_and_construction_rules():
    layer = CloraeLinear(16, 16, rank=6, n_tasks=3)
    assert all(e.rank == 2 for e in layer.task_experts)
    with pytest.raises(AdapterConfigError):
        CloraeLinear(16, 16, rank=7, n_tasks=3)
    with pytest.raises(AdapterConfigError):
        CloraeLinear(16, 16, rank=2, n_tasks=3)
    with pytest.raises(AdapterConfigError):
        CloraeLinear(16, 16, rank=0, n_tasks=2)


# -- gradients -----------------------------------------------------------------------


def test_gradient_isolation_other_experts_get_exactly_zero():
    layer = _randomized_layer(n_tasks=3, rank=6, d_in=8, d_out=8)
    x = Tensor(np.random.default_rng(11).normal(size=(4, 8)))
    loss = (layer(x, 0, ForwardContext()) ** 2.0).sum()
    loss.backward()
    for m in (1, 2):
        assert layer.task_experts[m].A.grad is None
        assert layer.task_experts[m].B.grad is None
    uni_norm = (np.linalg.norm(layer.universal.A.grad)
                + np.linalg.norm(layer.universal.B.grad))
    assert uni_norm > 0
    assert layer.weight.grad is None  # frozen base


def test_full_layer_finite_diff_at_1e4():
    layer = _randomized_layer()
    x = np.random.default_rng(2).normal(size=(5, 8))

    def closure():
        return (layer(Tensor(x), 1, ForwardContext()) ** 2.0).sum() * 0.25

    err = finite_diff_check(closure, list(layer.named_parameters()))
    assert err <= 1e-4


def test_gate_convexity_of_prescale_combination():
    layer = _randomized_layer(d_in=6, d_out=6, rank=2)
    rng = np.random.default_rng(13)
    g = layer.gate(Tensor(rng.normal(size=(500, 6)))).data
    assert np.all(np.abs(g.sum(axis=-1) - 1.0) <= 1e-6)
    assert np.all(g > 0)


# -- equivalence collapse ---------------------------------------------------------------


def test_collapse_to_vanilla_lora_with_fixed_gate():
    """N=1, gate pinned to the task side, task rank r: plain single-expert map."""
    full = CloraeLinear(8, 8, rank=4, n_tasks=1, fixed_gate=(0.0, 1.0))
    full.initialize(5)
    rng = np.random.default_rng(6)
    full.task_experts[0].A.data[...] = rng.normal(size=(4, 8))
    full.task_experts[0].B.data[...] = rng.normal(size=(8, 4))
    assert full.task_experts[0].rank == 4

    vanilla = CloraeLinear(8, 8, rank=4, n_tasks=1, variant="vanilla")
    vanilla.weight.data[...] = full.weight.data
    vanilla.universal.A.data[...] = full.task_experts[0].A.data
    vanilla.universal.B.data[...] = full.task_experts[0].B.data

    x = rng.normal(size=(6, 8))
    got = full(Tensor(x), 0, ForwardContext()).data
    want = vanilla(Tensor(x), 0, ForwardContext()).data
    assert np.array_equal(got, want)


def test_no_gate_variant_is_unweighted_addition():
    layer = _randomized_layer(variant="no_gate")
    assert layer.gate_weight is None and layer.fixed_gate == (1.0, 1.0)
    x = np.random.default_rng(3).normal(size=(4, 8))
    y = layer(Tensor(x), 0, ForwardContext()).data
    base = x @ layer.weight.data.T
    uni = x @ (layer.universal.B.data @ layer.universal.A.data).T
    tsk = x @ (layer.task_experts[0].B.data @ layer.task_experts[0].A.data).T
    assert np.max(np.abs(y - (base + uni + tsk))) <= 1e-12


def test_only_task_variant_keeps_router_drops_universal():
    layer = _randomized_layer(variant="only_task")
    assert layer.universal is None and layer.gate_weight is not None
    x = np.random.default_rng(3).normal(size=(4, 8))
    y = layer(Tensor(x), 1, ForwardContext()).data
    base = x @ layer.weight.data.T
    tsk = x @ (layer.task_experts[1].B.data @ layer.task_experts[1].A.data).T
    logits = x @ layer.gate_weight.data.T
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    g2 = (e / e.sum(axis=-1, keepdims=True))[:, 1:2]
    assert np.max(np.abs(y - (base + g2 * tsk))) <= 1e-12


# -- parameter accounting -----------------------------------------------------------------


def test_count_trainable_closed_form():
    layer = CloraeLinear(16, 16, rank=8, n_tasks=2)
    counts = count_trainable(layer)
    assert counts["universal"] == 8 * (16 + 16) == 256
    assert counts["task_experts"] == 2 * 4 * (16 + 16) == 256
    assert counts["gate"] == 2 * 16 == 32
    assert counts["total"] == 544


def test_clorae_lora_matrices_exactly_double_vanilla():
    clorae = CloraeLinear(16, 16, rank=8, n_tasks=2)
    vanilla = CloraeLinear(16, 16, rank=8, n_tasks=2, variant="vanilla")
    c, v = count_trainable(clorae), count_trainable(vanilla)
    lora_c = c["universal"] + c["task_experts"]
    lora_v = v["universal"] + v["task_experts"]
    assert lora_v == 256 and lora_c == 2 * lora_v


# -- routing stats -----------------------------------------------------------------------


def test_routing_stats_single_token():
    stats = RoutingStats()
    stats.record("L0", 0, np.array([0.7]))
    report = routing_report(stats, {"bottom": ["L0"]})
    assert report["bottom"][0]["task_expert"] == pytest.approx(0.7)
    assert report["bottom"][0]["universal"] == pytest.approx(0.3)


def test_routing_report_uniform_gate_is_half():
    layer = CloraeLinear(4, 4, rank=2, n_tasks=2)
    layer.initialize(0)
    stats = RoutingStats()
    ctx = ForwardContext(stats=stats)
    layer(Tensor(np.random.default_rng(0).normal(size=(9, 4))), 0, ctx,
          layer_name="L")
    report = routing_report(stats, {"bottom": ["L"]})
    assert report["bottom"][0]["task_expert"] == pytest.approx(0.5, abs=1e-12)


def test_routing_report_matches_flat_scan_oracle():
    rng = np.random.default_rng(21)
    stats = RoutingStats()
    raw = []  # (layer, task, value)
    for layer in ("A", "B", "C"):
        for task in (0, 1):
            for _ in range(rng.integers(1, 4)):
                vals = rng.random(rng.integers(1, 30))
                stats.record(layer, task, vals)
                raw.extend((layer, task, v) for v in vals)
    groups = {"bottom": ["A"], "middle": ["B"], "top": ["C"]}
    report = routing_report(stats, groups)
    for group, layers in groups.items():
        for task in (0, 1):
            flat = [v for (l, t, v) in raw if l in layers and t == task]
            want = sum(flat) / len(flat)
            assert abs(report[group][task]["task_expert"] - want) <= 1e-9


def test_routing_report_empty_errors():
    with pytest.raises(ValueError, match="empty"):
        routing_report(RoutingStats(), {"bottom": []})


def test_routing_respects_token_mask():
    layer = _randomized_layer(d_in=4, d_out=4, rank=2)
    stats = RoutingStats()
    ctx = ForwardContext(stats=stats)
    x = np.random.default_rng(2).normal(size=(2, 5, 4))
    mask = np.zeros((2, 5), dtype=bool)
    mask[0, :3] = True
    layer(Tensor(x), 0, ctx, token_mask=mask, layer_name="L")
    assert stats.counts[("L", 0)] == 3


def test_layer_groups_by_depth_thirds():
    names = [f"L{i}" for i in range(8)]
    depths = [0, 0, 1, 1, 2, 2, 3, 3]
    groups = layer_groups_by_depth(names, depths)
    assert groups["bottom"] == ["L0", "L1"]
    assert groups["top"] == ["L6", "L7"]
    assert groups["middle"] == ["L2", "L3", "L4", "L5"]
