"""Box-constrained minimization and first-order/structural diagnostics.

The solver is a spectral projected gradient method with a nonmonotone Armijo
line search.  Diagnostics implement the pointwise sign conditions of the
first-order optimality theorem, the bang-bang mass fraction, and the
least-squares estimator for the structural measure condition
|{ |adjoint| <= eps }| <= c eps^mu on the control regions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .objective import Control, ControlSpace, Problem, Perturbation


@dataclass(frozen=True)
class OptOptions:
    max_iters: int = 500
    kkt_tol: float = 1e-6
    initial_step: float = 1.0
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30
    step_min: float = 1e-10
    step_max: float = 1e6
    nonmonotone_window: int = 10
    stagnation_window: int = 20
    stagnation_rtol: float = 1e-14

    def __post_init__(self):
        if self.kkt_tol <= 0 or self.initial_step <= 0:
            raise ValueError("tolerances and steps must be positive")
        if not (0.0 < self.backtrack < 1.0):
            raise ValueError("backtrack factor must lie in (0, 1)")


@dataclass
class OptResult:
    control: Control
    J_history: list
    kkt_history: list
    iterations: int
    termination: str
    bang_fraction: tuple
    step_history: list = field(default_factory=list)
    backtrack_history: list = field(default_factory=list)


def project_box(ctrl: Control) -> Control:
    """Componentwise clamp onto the admissible box."""
    sp = ctrl.space
    if sp.q_lo > sp.q_hi or sp.th_lo > sp.th_hi:
        raise ValueError("control bounds must satisfy lo <= hi")
    return Control(sp, np.clip(ctrl.q, sp.q_lo, sp.q_hi),
                   np.clip(ctrl.th, sp.th_lo, sp.th_hi))


def kkt_residual_from_grad(ctrl: Control, grad: Control) -> float:
    """L1-normalized natural-residual norm of the variational inequality."""
    proj = project_box(ctrl.axpy(-1.0, grad))
    diff = ctrl.axpy(-1.0, proj)
    return diff.norm_l1() / (1.0 + grad.norm_l1())


def kkt_residual(prob: Problem, ctrl: Control,
                 pert: Perturbation | None = None) -> float:
    return kkt_residual_from_grad(ctrl, prob.grad_J(ctrl, pert))


def bang_bang_fraction(ctrl: Control, band: float | None = None):
    """Fraction of control mass within `band` of either bound, per component.

    Default band is 1e-6 of the box gap per component.  Returns a pair
    (force fraction, heat fraction); components with an empty region return 0.
    """
    if band is not None and band < 0:
        raise ValueError("band must be nonnegative")
    sp = ctrl.space
    gap_q = sp.q_hi - sp.q_lo
    gap_t = sp.th_hi - sp.th_lo
    bq = 1e-6 * gap_q if band is None else band
    bt = 1e-6 * gap_t if band is None else band
    fq = 0.0
    if ctrl.q.size:
        at = (ctrl.q <= sp.q_lo + bq) | (ctrl.q >= sp.q_hi - bq)
        fq = float(np.count_nonzero(at)) / ctrl.q.size
    ft = 0.0
    if ctrl.th.size:
        at = (ctrl.th <= sp.th_lo + bt) | (ctrl.th >= sp.th_hi - bt)
        ft = float(np.count_nonzero(at)) / ctrl.th.size
    return fq, ft


def projected_gradient(prob: Problem, ctrl0: Control, opts: OptOptions,
                       pert: Perturbation | None = None,
                       callback=None) -> OptResult:
    """Spectral projected gradient with nonmonotone Armijo backtracking.

    Deterministic given its inputs.  A failed line search returns the best
    iterate found with the termination reason recorded rather than raising.
    """
    x = project_box(ctrl0)
    J = prob.eval_J(x, pert)
    g = prob.grad_J(x, pert)
    kkt = kkt_residual_from_grad(x, g)
    J_hist = [J]
    kkt_hist = [kkt]
    step_hist = []
    bt_hist = []
    term = "max_iters"
    it = 0
    step = opts.initial_step
    while it < opts.max_iters:
        if kkt <= opts.kkt_tol:
            term = "kkt_tol"
            break
        ref = max(J_hist[-opts.nonmonotone_window:])
        cand = None
        n_bt = 0
        s = min(max(step, opts.step_min), opts.step_max)
        while n_bt <= opts.max_backtracks:
            trial = project_box(x.axpy(-s, g))
            d = trial.axpy(-1.0, x)
            dn2 = d.dot_l2(d)
            if dn2 == 0.0:
                break
            Jt = prob.eval_J(trial, pert)
            if Jt <= ref + opts.armijo * g.dot_l2(d):
                cand = (trial, Jt, d, s)
                break
            s *= opts.backtrack
            n_bt += 1
        if cand is None:
            term = "line_search_failure"
            break
        trial, Jt, d, s_used = cand
        g_new = prob.grad_J(trial, pert)
        # Barzilai-Borwein step from the accepted displacement
        y = g_new.axpy(-1.0, g)
        sy = d.dot_l2(y)
        ss = d.dot_l2(d)
        step = ss / sy if sy > 0 else opts.step_max
        x, J, g = trial, Jt, g_new
        kkt = kkt_residual_from_grad(x, g)
        J_hist.append(J)
        kkt_hist.append(kkt)
        step_hist.append(s_used)
        bt_hist.append(n_bt)
        it += 1
        if callback is not None:
            callback(it, x, J, kkt)
        if it >= opts.stagnation_window:
            recent = J_hist[-opts.stagnation_window:]
            if max(recent) - min(recent) <= opts.stagnation_rtol * (1.0 + abs(J)):
                if kkt > opts.kkt_tol:
                    term = "stagnation"
                break
    if kkt <= opts.kkt_tol:
        term = "kkt_tol"
    return OptResult(x, J_hist, kkt_hist, it, term,
                     bang_bang_fraction(x), step_hist, bt_hist)


def conditional_gradient(prob: Problem, ctrl0: Control, opts: OptOptions,
                         pert: Perturbation | None = None) -> OptResult:
    """Frank-Wolfe mode for unregularized runs: vertex steps, 2/(k+2) rule.

    Flagged option; useful when the expected solution is bang-bang.
    """
    sp = ctrl0.space
    x = project_box(ctrl0)
    J_hist = []
    kkt_hist = []
    term = "max_iters"
    it = 0
    while True:
        J = prob.eval_J(x, pert)
        g = prob.grad_J(x, pert)
        kkt = kkt_residual_from_grad(x, g)
        J_hist.append(J)
        kkt_hist.append(kkt)
        if kkt <= opts.kkt_tol:
            term = "kkt_tol"
            break
        if it >= opts.max_iters:
            break
        vq = np.where(g.q > 0, sp.q_lo, sp.q_hi)
        vt = np.where(g.th > 0, sp.th_lo, sp.th_hi)
        v = Control(sp, vq, vt)
        gamma = 2.0 / (it + 2.0)
        x = x.axpy(gamma, v.axpy(-1.0, x))
        it += 1
    return OptResult(x, J_hist, kkt_hist, it, term, bang_bang_fraction(x))


@dataclass
class ViolationReport:
    """Quadrature mass of cells violating the pointwise sign conditions."""

    mass_q: float
    mass_th: float
    total_mass_q: float
    total_mass_th: float
    tol: float


def pointwise_sign_check(prob: Problem, ctrl: Control,
                         pert: Perturbation | None = None,
                         tol: float = 1e-6) -> ViolationReport:
    """Check the a.e. sign conditions of the first-order theorem.

    At the lower bound the gradient must be >= -tol, at the upper bound
    <= tol, and in the interior |gradient| <= tol.  Returns the dt*volume
    mass of violations for the force and heat components.
    """
    sp = ctrl.space
    g = prob.grad_J(ctrl, pert)
    w = sp.tg.dt * sp.grid.vol
    gap_q = max(sp.q_hi - sp.q_lo, 1.0)
    gap_t = max(sp.th_hi - sp.th_lo, 1.0)
    bq = 1e-9 * gap_q
    bt = 1e-9 * gap_t
    lower = ctrl.q <= sp.q_lo + bq
    upper = ctrl.q >= sp.q_hi - bq
    inner = ~(lower | upper)
    bad_q = (lower & (g.q < -tol)) | (upper & (g.q > tol)) | (inner & (np.abs(g.q) > tol))
    lower = ctrl.th <= sp.th_lo + bt
    upper = ctrl.th >= sp.th_hi - bt
    inner = ~(lower | upper)
    bad_t = (lower & (g.th < -tol)) | (upper & (g.th > tol)) | (inner & (np.abs(g.th) > tol))
    return ViolationReport(w * float(np.count_nonzero(bad_q)),
                           w * float(np.count_nonzero(bad_t)),
                           w * bad_q.size, w * bad_t.size, tol)


@dataclass
class MeasureFit:
    mu_hat: float          # +inf marker when every mass is zero
    intercept: float
    r2: float
    eps: np.ndarray
    mass: np.ndarray
    n_used: int

    @property
    def reliable(self):
        return np.isfinite(self.mu_hat) and self.r2 >= 0.8


def loglog_fit(x, y):
    """OLS fit of log y vs log x; returns slope, intercept, R^2."""
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    pred = A @ coef
    sse = float(np.sum((ly - pred) ** 2))
    sst = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if sst == 0.0 else 1.0 - sse / sst
    return float(coef[0]), float(coef[1]), r2


def smallness_mass(values, eps, weight):
    """Quadrature mass of {|value| <= eps}; values is any array."""
    return weight * float(np.count_nonzero(np.abs(values) <= eps))


def measure_condition_estimate(values, eps_grid, weight) -> MeasureFit:
    """Fit the smallness-set growth |{|field| <= eps}| ~ c eps^mu.

    `values` are the adjoint samples on a control region over time, `weight`
    the dt*cell-volume quadrature weight.  Entries with zero mass (field
    bounded away from zero there) or saturated mass (the whole region) are
    excluded from the fit; all-zero masses return a +inf marker meaning the
    structural condition holds vacuously.
    """
    eps_grid = np.asarray(eps_grid, dtype=float)
    if eps_grid.ndim != 1 or len(eps_grid) < 2:
        raise ValueError("eps_grid must hold at least two points")
    if np.any(eps_grid <= 0) or np.any(np.diff(eps_grid) <= 0):
        raise ValueError("eps_grid must be positive and strictly increasing")
    flat = np.abs(np.asarray(values).ravel())
    total = weight * flat.size
    mass = np.array([smallness_mass(flat, e, weight) for e in eps_grid])
    if not np.any(mass > 0):
        return MeasureFit(np.inf, 0.0, 1.0, eps_grid, mass, 0)
    use = (mass > 0) & (mass < total)
    if np.count_nonzero(use) < 2:
        # degenerate curve: report the raw slope over positive entries
        use = mass > 0
    if np.count_nonzero(use) < 2:
        return MeasureFit(np.inf, 0.0, 0.0, eps_grid, mass, int(np.count_nonzero(use)))
    slope, intercept, r2 = loglog_fit(eps_grid[use], mass[use])
    return MeasureFit(slope, intercept, r2, eps_grid, mass,
                      int(np.count_nonzero(use)))


def adjoint_restriction_samples(prob: Problem, ctrl: Control,
                                pert: Perturbation | None = None):
    """Adjoint gradient densities on the control regions, per component.

    Returns (w1, w2, psi) arrays of shape (nt, ncells); these are the fields
    whose smallness sets the structural measure condition constrains.  The
    Tikhonov and tilt contributions are excluded: the condition is about the
    adjoint state itself.
    """
    from .objective import restrict_adjoint
    adj = prob.adjoint(ctrl, pert)
    nt = prob.tg.nt
    sp = prob.space
    w1 = np.zeros((nt, sp.mask_q.ncells))
    w2 = np.zeros((nt, sp.mask_q.ncells))
    ps = np.zeros((nt, sp.mask_h.ncells))
    for k in range(nt):
        q, th = restrict_adjoint(sp, adj.w[k], adj.psi[k])
        w1[k] = q[0]
        w2[k] = q[1]
        ps[k] = th
    return w1, w2, ps
