"""Optimizer contracts: step decay, frozen invariance, determinism."""
import numpy as np
import pytest

from clorae.autodiff import Tensor, matmul
from clorae.gradcheck import finite_diff_check
from clorae.nn import Parameter, derive_rng
from clorae.optim import Adam


def _quadratic_param(value=3.0):
    p = Parameter((1,))
    p.data[...] = value
    return p


def test_effective_lr_decays_by_factor_per_event():
    p = _quadratic_param()
    opt = Adam([p], lr=1e-4, decay_factor=0.5, decay_every=5)
    for epoch, want_events in [(0, 0), (4, 0), (5, 1), (9, 1), (10, 2), (19, 3)]:
        opt.set_epoch(epoch)
        assert opt.decay_events == want_events
        assert opt.effective_lr == pytest.approx(1e-4 * 0.5 ** want_events)


def test_frozen_parameters_are_excluded_and_never_move():
    frozen = Parameter((3,), frozen=True)
    frozen.data[...] = [1.0, 2.0, 3.0]
    raw = frozen.data.tobytes()
    live = _quadratic_param()
    opt = Adam([frozen, live], lr=0.1)
    assert frozen not in opt.params
    for _ in range(25):
        loss = (live * live).sum() + (frozen * 0.0).sum()
        loss.backward()
        opt.step()
        opt.zero_grad()
    assert frozen.data.tobytes() == raw
    assert frozen.grad is None or np.all(frozen.grad == 0.0)


def test_adam_drives_quadratic_toward_zero():
    p = _quadratic_param(2.0)
    opt = Adam([p], lr=0.05)
    for _ in range(400):
        (p * p).sum().backward()
        opt.step()
        opt.zero_grad()
    assert abs(p.data[0]) < 1e-2


def test_identical_seed_gives_bitwise_identical_trajectory():
    def run():
        rng = derive_rng(123, "traj")
        w = Parameter((4, 4))
        w.data[...] = rng.normal(size=(4, 4))
        opt = Adam([w], lr=1e-3)
        snaps = []
        for step in range(30):
            x = Tensor(rng.normal(size=(5, 4)))
            loss = (matmul(x, w) ** 2.0).mean()
            loss.backward()
            opt.step()
            opt.zero_grad()
            snaps.append(w.data.tobytes())
        return snaps

    assert run() == run()


def test_finite_diff_check_known_quadratic():
    p = _quadratic_param(3.0)
    err = finite_diff_check(lambda: (p * p).sum(), [("w", p)])
    # analytic 6 vs central difference 6 +- O(eps^2)
    assert err <= 1e-6


def test_finite_diff_check_frozen_param_reports_zero_grad():
    frozen = Parameter((2,), frozen=True)
    frozen.data[...] = [1.0, 2.0]
    live = _quadratic_param()
    err = finite_diff_check(lambda: (live * live).sum() + (frozen * 2.0).sum(),
                            [("f", frozen), ("w", live)])
    assert err <= 1e-6  # frozen contributes nothing; live passes
