"""MIM regularizer: closed forms, per-channel loop oracle, gradient routing."""
import numpy as np
import pytest

from clorae.adapter import CloraeLinear, ForwardContext
from clorae.autodiff import Tensor
from clorae.gradcheck import finite_diff_check
from clorae.mim import RAW_UNIT_VARIANCE, VidHead, mim_loss
from clorae.nn import Parameter


def _head(dim=6, seed=1, perturb=True):
    head = VidHead(dim)
    head.initialize(0)
    if perturb:
        rng = np.random.default_rng(seed)
        head.mean_weight.data += rng.normal(0.0, 0.2, (dim, dim))
        head.mean_bias.data += rng.normal(0.0, 0.1, dim)
        head.raw_var.data += rng.normal(0.0, 0.3, dim)
    return head


def test_unit_variance_initialization():
    head = _head(perturb=False)
    assert np.allclose(head.variance().data, 1.0, atol=1e-12)
    assert head.raw_var.data[0] == pytest.approx(RAW_UNIT_VARIANCE)


def test_perfect_prediction_unit_variance_gives_zero():
    head = _head(perturb=False)  # identity mean map, zero bias, variance one
    rng = np.random.default_rng(2)
    d = rng.normal(size=(4, 6))
    loss = head.loss(Tensor(d), Tensor(d.copy()))
    assert abs(loss.item()) <= 1e-12


def test_unit_error_unit_variance_gives_half():
    head = _head(perturb=False)
    d = np.zeros((3, 6))
    u = np.ones((3, 6))  # per-channel squared error 1, variance 1
    loss = head.loss(Tensor(d), Tensor(u))
    assert loss.item() == pytest.approx(0.5, abs=1e-12)


def test_matches_per_channel_loop_oracle():
    head = _head()
    rng = np.random.default_rng(3)
    d = rng.normal(size=(5, 6))
    u = rng.normal(size=(5, 6))
    got = head.loss(Tensor(d), Tensor(u)).item()

    w, b = head.mean_weight.data, head.mean_bias.data
    var = np.log1p(np.exp(head.raw_var.data))
    total = 0.0
    for t in range(5):
        mu = w @ d[t] + b
        for c in range(6):
            total += 0.5 * np.log(var[c]) + (u[t, c] - mu[c]) ** 2 / (2 * var[c])
    want = total / (5 * 6)
    assert abs(got - want) <= 1e-10


def test_shape_mismatch_errors():
    head = _head()
    with pytest.raises(ValueError):
        head.loss(Tensor(np.zeros((2, 6))), Tensor(np.zeros((3, 6))))
    with pytest.raises(ValueError):
        head.loss(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))


def test_monotone_in_prediction_error_for_fixed_variance():
    head = _head(perturb=False)
    d = np.zeros((2, 6))
    losses = [head.loss(Tensor(d), Tensor(np.full((2, 6), s))).item()
              for s in (0.0, 0.5, 1.0, 2.0)]
    assert losses == sorted(losses)


def test_gradient_flows_to_task_side_and_head_never_to_teacher():
    layer = CloraeLinear(6, 6, rank=2, n_tasks=2)
    layer.initialize(4)
    rng = np.random.default_rng(5)
    for f in (layer.universal, layer.task_experts[0]):
        f.B.data[...] = rng.normal(0.0, 0.3, f.B.data.shape)
    head = _head()
    ctx = ForwardContext(trace=[])
    layer(Tensor(rng.normal(size=(4, 6))), 0, ctx, layer_name="L")
    loss = mim_loss(ctx.trace, {"L": head})
    loss.backward()
    assert layer.universal.A.grad is None and layer.universal.B.grad is None
    assert np.linalg.norm(layer.task_experts[0].A.grad) > 0
    assert np.linalg.norm(head.mean_weight.grad) > 0
    assert np.linalg.norm(head.raw_var.grad) > 0


def test_head_finite_diff_at_1e4():
    head = _head()
    rng = np.random.default_rng(6)
    d = rng.normal(size=(4, 6))
    u = rng.normal(size=(4, 6))

    def closure():
        return head.loss(Tensor(d), Tensor(u))

    assert finite_diff_check(closure, list(head.named_parameters())) <= 1e-4


def test_mim_loss_averages_over_layers():
    heads = {"a": _head(seed=10), "b": _head(seed=11)}
    rng = np.random.default_rng(7)
    pairs = []
    per_layer = []
    for name in ("a", "b"):
        u, d = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        pairs.append((name, Tensor(u), Tensor(d)))
        per_layer.append(heads[name].loss(Tensor(d), Tensor(u)).item())
    got = mim_loss(pairs, heads).item()
    assert got == pytest.approx(sum(per_layer) / 2, abs=1e-12)


def test_mim_loss_empty_trace_is_zero():
    assert mim_loss([], {}).item() == 0.0


def test_variance_strictly_positive_everywhere():
    head = _head()
    head.raw_var.data[...] = [-30.0, -5.0, 0.0, 5.0, 30.0, -1.0]
    assert np.all(head.variance().data > 0.0)
