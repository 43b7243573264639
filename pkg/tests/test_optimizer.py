"""Optimizer and optimality-diagnostics tests."""

import numpy as np
import pytest

from convecopt.objective import Control
from convecopt.optimizer import (OptOptions, project_box, kkt_residual,
                                 kkt_residual_from_grad, bang_bang_fraction,
                                 projected_gradient, conditional_gradient,
                                 pointwise_sign_check, loglog_fit,
                                 smallness_mass, measure_condition_estimate,
                                 adjoint_restriction_samples)

from conftest import make_problem, rand_control


def test_project_box_elementwise_oracle():
    prob = make_problem()
    rng = np.random.default_rng(0)
    ctrl = rand_control(prob.space, rng, 3.0)
    p = project_box(ctrl)
    sp = prob.space
    assert np.array_equal(p.q, np.minimum(np.maximum(ctrl.q, sp.q_lo), sp.q_hi))
    assert np.array_equal(p.th, np.minimum(np.maximum(ctrl.th, sp.th_lo), sp.th_hi))


def test_project_box_idempotent_and_nonexpansive():
    prob = make_problem()
    rng = np.random.default_rng(1)
    a = rand_control(prob.space, rng, 3.0)
    b = rand_control(prob.space, rng, 3.0)
    pa, pb = project_box(a), project_box(b)
    assert np.array_equal(project_box(pa).q, pa.q)
    da = pa.axpy(-1.0, pb).norm_l2()
    d = a.axpy(-1.0, b).norm_l2()
    assert da <= d + 1e-14


def test_kkt_residual_elementwise_oracle():
    prob = make_problem()
    rng = np.random.default_rng(2)
    ctrl = project_box(rand_control(prob.space, rng, 2.0))
    grad = rand_control(prob.space, rng)
    sp = prob.space
    w = sp.tg.dt * sp.grid.vol
    rq = ctrl.q - np.clip(ctrl.q - grad.q, sp.q_lo, sp.q_hi)
    rt = ctrl.th - np.clip(ctrl.th - grad.th, sp.th_lo, sp.th_hi)
    num = w * (np.abs(rq).sum() + np.abs(rt).sum())
    den = 1.0 + w * (np.abs(grad.q).sum() + np.abs(grad.th).sum())
    assert np.isclose(kkt_residual_from_grad(ctrl, grad), num / den, rtol=1e-14)


def test_kkt_residual_zero_at_interior_stationary_point():
    prob = make_problem()
    ctrl = prob.space.zero()
    grad = prob.space.zero()
    assert kkt_residual_from_grad(ctrl, grad) == 0.0


def test_projected_gradient_converges_on_convex_problem():
    prob = make_problem(coupling=False, eps1=1e-2, eps2=1e-2)
    opts = OptOptions(max_iters=300, kkt_tol=1e-7)
    res = projected_gradient(prob, prob.space.zero(), opts)
    assert res.termination == "kkt_tol"
    assert res.kkt_history[-1] <= 1e-7
    assert res.control.is_admissible()
    # objective never rises above the nonmonotone reference by construction;
    # final value is the lowest seen
    assert res.J_history[-1] == min(res.J_history)


def test_projected_gradient_zero_iterations_when_optimal():
    prob = make_problem(coupling=False, eps1=1e-2, eps2=1e-2)
    opts = OptOptions(max_iters=300, kkt_tol=1e-7)
    res = projected_gradient(prob, prob.space.zero(), opts)
    res2 = projected_gradient(prob, res.control, opts)
    assert res2.iterations == 0
    assert res2.termination == "kkt_tol"
    assert np.array_equal(res2.control.q, res.control.q)


def test_projected_gradient_deterministic():
    prob = make_problem()
    opts = OptOptions(max_iters=30, kkt_tol=1e-12)
    a = projected_gradient(prob, prob.space.zero(), opts)
    b = projected_gradient(prob, prob.space.zero(), opts)
    assert a.J_history == b.J_history
    assert np.array_equal(a.control.q, b.control.q)


def test_brute_force_optimality_on_micro_instance():
    # on a tiny instance, no sampled admissible direction may improve J to
    # first order beyond the KKT tolerance at the computed solution
    prob = make_problem(nx=4, ny=4, nt=3, coupling=False, eps1=1e-2, eps2=1e-2)
    opts = OptOptions(max_iters=400, kkt_tol=1e-9)
    res = projected_gradient(prob, prob.space.zero(), opts)
    assert res.kkt_history[-1] <= 1e-9
    J = prob.eval_J(res.control)
    rng = np.random.default_rng(3)
    for _ in range(40):
        d = rand_control(prob.space, rng)
        cand = project_box(res.control.axpy(1e-4, d))
        assert prob.eval_J(cand) >= J - 1e-10


def test_conditional_gradient_decreases_objective():
    prob = make_problem(coupling=False)
    opts = OptOptions(max_iters=40, kkt_tol=1e-12)
    res = conditional_gradient(prob, prob.space.zero(), opts)
    assert res.J_history[-1] < res.J_history[0]
    assert res.control.is_admissible()


def test_bang_bang_fraction_trivial_cases():
    prob = make_problem()
    sp = prob.space
    ctrl = sp.zero()             # all interior (bounds are -1, 1)
    assert bang_bang_fraction(ctrl) == (0.0, 0.0)
    ctrl.q[:] = sp.q_hi
    ctrl.th[:] = sp.th_lo
    assert bang_bang_fraction(ctrl) == (1.0, 1.0)
    # band wide enough to absorb everything
    assert bang_bang_fraction(sp.zero(), band=2.0) == (1.0, 1.0)
    with pytest.raises(ValueError):
        bang_bang_fraction(ctrl, band=-1.0)


def test_sign_check_flags_planted_violation():
    prob = make_problem(coupling=False, eps1=1e-2, eps2=1e-2)
    opts = OptOptions(max_iters=300, kkt_tol=1e-9)
    res = projected_gradient(prob, prob.space.zero(), opts)
    clean = pointwise_sign_check(prob, res.control, tol=1e-6)
    assert clean.mass_q <= 1e-12 and clean.mass_th <= 1e-12
    # move one interior entry: its gradient is no longer ~0 there
    bad = res.control.copy()
    bad.q[0, 0, 0] = 0.5 * (prob.space.q_lo + prob.space.q_hi)
    rep = pointwise_sign_check(prob, bad, tol=1e-6)
    assert rep.mass_q > 0


def test_loglog_fit_recovers_power_law():
    x = np.geomspace(1e-3, 1.0, 12)
    y = 3.5 * x ** 1.7
    slope, intercept, r2 = loglog_fit(x, y)
    assert abs(slope - 1.7) < 1e-12
    assert abs(np.exp(intercept) - 3.5) < 1e-12
    assert r2 == 1.0


def test_smallness_mass_counting_oracle():
    vals = np.array([0.0, 0.5, -0.2, 0.9, -1.5])
    assert smallness_mass(vals, 0.5, 2.0) == 2.0 * 3   # |v| <= 0.5: three entries


def test_measure_estimate_linear_field_has_unit_exponent():
    # |{ |x| <= eps }| = 2 eps for a uniform linear ramp: mu = 1 exactly
    x = np.linspace(-1.0, 1.0, 20001)
    eps = np.geomspace(1e-3, 1e-1, 10)
    fit = measure_condition_estimate(x, eps, 2.0 / len(x))
    assert fit.reliable
    assert abs(fit.mu_hat - 1.0) <= 0.02
    assert fit.r2 >= 0.999


def test_measure_estimate_zero_mass_marker():
    vals = np.full(100, 5.0)    # bounded away from zero
    eps = np.geomspace(1e-3, 1e-1, 6)
    fit = measure_condition_estimate(vals, eps, 1.0)
    assert np.isinf(fit.mu_hat)
    assert np.all(fit.mass == 0.0)


def test_measure_estimate_mass_is_monotone():
    rng = np.random.default_rng(4)
    vals = rng.standard_normal(500)
    eps = np.geomspace(1e-2, 1.0, 8)
    fit = measure_condition_estimate(vals, eps, 1.0)
    assert np.all(np.diff(fit.mass) >= 0)


def test_measure_estimate_validates_grid():
    with pytest.raises(ValueError):
        measure_condition_estimate(np.ones(5), np.array([0.1]), 1.0)
    with pytest.raises(ValueError):
        measure_condition_estimate(np.ones(5), np.array([0.1, 0.05]), 1.0)


def test_adjoint_samples_shapes():
    prob = make_problem()
    ctrl = prob.space.zero()
    w1, w2, ps = adjoint_restriction_samples(prob, ctrl)
    assert w1.shape == (prob.tg.nt, prob.space.mask_q.ncells)
    assert w2.shape == w1.shape
    assert ps.shape == (prob.tg.nt, prob.space.mask_h.ncells)
    # the tracking problem has nonzero misfit, so the adjoint is nontrivial
    assert np.abs(w1).max() + np.abs(w2).max() + np.abs(ps).max() > 0


def test_options_validation():
    with pytest.raises(ValueError):
        OptOptions(kkt_tol=0.0)
    with pytest.raises(ValueError):
        OptOptions(backtrack=1.5)
