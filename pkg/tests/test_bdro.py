import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_banks, random_encoder
from oodfl.bdro import (bdro_step, composite_terms, mean_cost, penalized_objective,
                        perturb_bank, plain_step, robust_loss, robust_weights, transport_cost)
from oodfl.core import BdroConfig, PromptBank, PromptContext, Role
from oodfl.gradcheck import central_difference, relative_error
from oodfl.objective import Banks, banks_loss_and_grad

finite_f = arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50))


def _bank1(value, role=Role.GLOBAL_ID):
    return PromptBank(role, np.array([[value]], dtype=float), np.zeros((1, 1)))


# -- transport cost ----------------------------------------------------------------

def test_transport_cost_examples():
    p = PromptContext([3.0, 4.0], [0.0, 0.0], Role.OOD)
    q = PromptContext([0.0, 0.0], [1.0, 1.0], Role.OOD)
    assert transport_cost(p, p) == 0.0
    assert transport_cost(p, q) == 5.0


def test_transport_cost_random(rng):
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    p, q = (PromptContext(v, np.zeros(6), Role.OOD) for v in (a, b))
    assert transport_cost(p, q) == pytest.approx(np.sqrt(sum((a - b) ** 2)), rel=1e-14)


def test_transport_cost_dimension_mismatch():
    with pytest.raises(ValueError):
        transport_cost(PromptContext([0.0], [0.0], Role.OOD),
                       PromptContext([0.0, 1.0], [0.0, 0.0], Role.OOD))


def test_mean_cost_averages_over_prompts():
    eps = np.array([[3.0, 4.0], [0.0, 0.0], [0.0, 1.0]])
    assert mean_cost(eps) == pytest.approx(2.0)
    assert mean_cost(np.empty((0, 2))) == 0.0


# -- perturbation -------------------------------------------------------------------

def test_perturb_without_noise_or_steps_is_zero(rng):
    bank = PromptBank(Role.GLOBAL_ID, rng.standard_normal((3, 2)), np.zeros((3, 2)))
    cfg = BdroConfig(sigma=0.0, steps_global=0)
    st_ = perturb_bank(bank, lambda c: (0.0, np.zeros_like(c)), 1.0, cfg, rng)
    np.testing.assert_array_equal(st_.epsilons, 0)
    np.testing.assert_array_equal(st_.apply(bank), bank.contexts)


def test_perturb_unit_gradient_one_step():
    cfg = BdroConfig(sigma=0.3, gamma=0.0, steps_global=1, inner_lr=0.25)
    eps0 = np.random.default_rng(9).normal(0.0, 0.3, size=(1, 1))
    out = perturb_bank(_bank1(1.0), lambda c: (float(c.sum()), np.ones_like(c)), 0.0, cfg,
                       np.random.default_rng(9))
    np.testing.assert_allclose(out.epsilons, eps0 + 0.25, rtol=0, atol=1e-15)


def test_perturb_quadratic_converges_to_peak():
    a = 2.5
    cfg = BdroConfig(sigma=0.0, gamma=0.0, steps_global=200, inner_lr=0.2)
    out = perturb_bank(_bank1(0.0), lambda c: (float(-((c - a) ** 2).sum()), -2 * (c - a)),
                       0.0, cfg, np.random.default_rng(0))
    assert abs(out.apply(_bank1(0.0))[0, 0] - a) < 1e-3


def test_perturb_rejects_local_bank(rng):
    with pytest.raises(ValueError):
        perturb_bank(_bank1(0.0, Role.LOCAL), lambda c: (0.0, c), 1.0, BdroConfig(), rng)


def test_perturb_ascent_never_lowers_loss(rng):
    banks, enc = random_banks(rng), random_encoder(rng)
    X, y = rng.standard_normal((6, 6)), rng.integers(0, 3, 6)

    def ev(ctx):
        losses, grads = banks_loss_and_grad(X, y, banks, enc, 0.3, 0.5, global_ctx=ctx)
        return float(losses.mean()), grads[1]

    base = ev(banks.glob.contexts)[0]
    for steps in (1, 3):
        cfg = BdroConfig(sigma=0.0, gamma=0.0, steps_global=steps, inner_lr=5.0)
        out = perturb_bank(banks.glob, ev, 0.5, cfg, rng)
        assert ev(out.apply(banks.glob))[0] >= base - 1e-9
        obj = penalized_objective(ev(out.apply(banks.glob))[0], out.epsilons, 0.5, 0.0)
        assert obj >= base - 1e-9


# -- robust loss ---------------------------------------------------------------------

def test_robust_loss_examples():
    assert robust_loss([2.0, 2.0], 1.0) == pytest.approx(2.0, abs=1e-15)
    assert robust_loss([0.0, 2.0], 1.0) == pytest.approx(np.log((1 + np.e ** 2) / 2), rel=1e-14)
    assert robust_loss([0.0, 2.0], 1.0) == pytest.approx(1.43379, abs=1e-5)
    assert robust_loss([0.0, 2.0], 1e6) == pytest.approx(1.0, abs=1e-5)


def test_robust_loss_errors():
    with pytest.raises(ValueError):
        robust_loss([], 1.0)
    with pytest.raises(ValueError):
        robust_loss([1.0], 0.0)


def test_robust_loss_no_overflow():
    assert np.isfinite(robust_loss([1e4, -1e4], 1e-3))


@settings(max_examples=200, deadline=None)
@given(f=finite_f, scale=st.floats(1e-3, 1e3))
def test_robust_loss_jensen(f, scale):
    assert robust_loss(f, scale) >= f.mean() - 1e-9 * (1 + abs(f).max())


@settings(max_examples=100, deadline=None)
@given(f=finite_f, s1=st.floats(1e-2, 1e2), s2=st.floats(1e-2, 1e2))
def test_robust_loss_nonincreasing_in_scale(f, s1, s2):
    lo, hi = sorted((s1, s2))
    assert robust_loss(f, hi) <= robust_loss(f, lo) + 1e-9 * (1 + abs(f).max())


@settings(max_examples=100, deadline=None)
@given(f=finite_f, scale=st.floats(0.1, 10))
def test_robust_weights_are_gradient(f, scale):
    w = robust_weights(f, scale)
    assert w.sum() == pytest.approx(1.0)
    fd = central_difference(lambda v: robust_loss(v, scale), f, 1e-6)
    np.testing.assert_allclose(w, fd, atol=1e-5)


# -- steps --------------------------------------------------------------------------

def test_disabled_bos_is_plain_descent(rng):
    banks, enc = random_banks(rng), random_encoder(rng)
    X, y = rng.standard_normal((5, 6)), rng.integers(0, 3, 5)
    cfg = BdroConfig(outer_lr=0.1)
    res = bdro_step(X, y, banks, enc, cfg, 0.5, 0.5, rng, enable_bos=False)
    losses, (gl, gg, go) = banks_loss_and_grad(X, y, banks, enc, 0.5, 0.5)
    np.testing.assert_array_equal(res.banks.local.contexts, banks.local.contexts - 0.1 * gl)
    np.testing.assert_array_equal(res.banks.glob.contexts, banks.glob.contexts - 0.1 * gg)
    np.testing.assert_array_equal(res.banks.ood.contexts, banks.ood.contexts - 0.1 * go)
    assert res.loss == pytest.approx(losses.mean())


def test_zero_perturbation_removes_cost_terms(rng):
    banks, enc = random_banks(rng), random_encoder(rng)
    X, y = rng.standard_normal((5, 6)), rng.integers(0, 3, 5)
    cfg = BdroConfig(sigma=0.0, gamma=3.0, steps_global=0, steps_ood=0, tau2=0.7, mu=0.4)
    zg, zo = np.zeros_like(banks.glob.contexts), np.zeros_like(banks.ood.contexts)
    f, value, _ = composite_terms(X, y, banks, enc, 0.5, 0.5, cfg, zg, zo)
    plain, _ = banks_loss_and_grad(X, y, banks, enc, 0.5, 0.5, need_grad=False)
    np.testing.assert_array_equal(f, plain)
    assert value == robust_loss(plain, 0.7 * 0.4)
    res = bdro_step(X, y, banks, enc, cfg, 0.5, 0.5, rng)
    assert res.loss == value


def test_composite_gradient_matches_finite_differences():
    rng = np.random.default_rng(21)
    banks, enc = random_banks(rng, C=2, U=2, d_ctx=3), random_encoder(rng, d=5, d_ctx=3)
    X, y = rng.standard_normal((4, 5)), np.array([0, 1, 1, 0])
    cfg = BdroConfig(tau1=0.8, tau2=1.3, mu=0.6)
    ge = 0.1 * rng.standard_normal(banks.glob.contexts.shape)
    oe = 0.1 * rng.standard_normal(banks.ood.contexts.shape)
    _, _, grads = composite_terms(X, y, banks, enc, 0.4, 0.5, cfg, ge, oe)
    for i, g in enumerate(grads):
        def fun(ctx, i=i):
            parts = list(banks)
            parts[i] = parts[i].with_contexts(ctx)
            return composite_terms(X, y, Banks(*parts), enc, 0.4, 0.5, cfg, ge, oe,
                                   need_grad=False)[1]
        assert relative_error(g, central_difference(fun, banks[i].contexts)) <= 1e-4


def test_small_outer_step_does_not_raise_robust_loss():
    rng = np.random.default_rng(8)
    banks, enc = random_banks(rng), random_encoder(rng)
    X, y = rng.standard_normal((6, 6)), rng.integers(0, 3, 6)
    cfg = BdroConfig(sigma=0.05, outer_lr=1e-4, tau2=0.5, mu=0.5)
    res = bdro_step(X, y, banks, enc, cfg, 0.5, 0.5, np.random.default_rng(3))
    _, after, _ = composite_terms(X, y, res.banks, enc, 0.5, 0.5, cfg, res.global_eps,
                                  res.ood_eps, need_grad=False)
    assert after <= res.loss + 1e-9


def test_bdro_step_deterministic_given_rng():
    rng = np.random.default_rng(4)
    banks, enc = random_banks(rng), random_encoder(rng)
    X, y = rng.standard_normal((5, 6)), rng.integers(0, 3, 5)
    a = bdro_step(X, y, banks, enc, BdroConfig(), 0.5, 0.5, np.random.default_rng(1))
    b = bdro_step(X, y, banks, enc, BdroConfig(), 0.5, 0.5, np.random.default_rng(1))
    assert a.banks == b.banks and a.loss == b.loss


def test_plain_step_reports_zero_perturbation(rng):
    banks, enc = random_banks(rng), random_encoder(rng)
    res = plain_step(rng.standard_normal((2, 6)), [0, 1], banks, enc, 0.5, 0.5, 0.1)
    assert not res.global_eps.any() and not res.ood_eps.any()
