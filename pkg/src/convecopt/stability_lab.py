"""Perturbation and regularization experiments around a computed minimizer.

Everything here drives the objective/optimizer layers: solve the perturbed
problems warm-started from the unperturbed solution, record distances in the
norms the theory pairs (L1 for controls, L2 for states, sup-gradient for the
adjoints), and fit log-log exponents with ordinary least squares.  Exponent
fits carry an R^2 and are reported as unreliable below 0.8.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import Grid, Vec2
from .boussinesq import TimeGrid
from .objective import Control, Perturbation, Problem
from .optimizer import (OptOptions, OptResult, projected_gradient,
                        kkt_residual_from_grad, loglog_fit, MeasureFit,
                        measure_condition_estimate, adjoint_restriction_samples)


# ---------------------------------------------------------------------------
# perturbation synthesis
# ---------------------------------------------------------------------------

def fourier_scalar(grid: Grid, rng, modes=4, decay=2.0, x=None, y=None):
    """Seeded truncated Fourier sine series sampled on cell centers.

    Coefficients are standard normal damped by (m^2+n^2)^(-decay/2); the
    field is normalized to unit L2 norm.  Optional x/y coordinate vectors
    sample the same series on other (e.g. face) layouts.
    """
    if x is None:
        x = grid.xc
    if y is None:
        y = grid.yc
    out = np.zeros((len(x), len(y)))
    for m in range(1, modes + 1):
        for n in range(1, modes + 1):
            c = rng.standard_normal() * (m * m + n * n) ** (-decay / 2.0)
            out += c * np.outer(np.sin(m * np.pi * x / grid.lx),
                                np.sin(n * np.pi * y / grid.ly))
    nrm = np.sqrt(grid.vol * float(np.sum(out * out)))
    if nrm > 0:
        out /= nrm
    return out


def fourier_vec2(grid: Grid, rng, modes=4, decay=2.0, div_free=False):
    """Fourier-synthesized face field; optionally projected divergence-free."""
    u = fourier_scalar(grid, rng, modes, decay, x=grid.xf, y=grid.yc)
    v = fourier_scalar(grid, rng, modes, decay, x=grid.xc, y=grid.yf)
    w = Vec2(u, v).zero_normal_boundary()
    if div_free:
        w = grid.leray_project(w)
    nrm = grid.norm2(w)
    if nrm > 0:
        w = w * (1.0 / nrm)
    return w


KNOWN_FAMILIES = ("control-tilt", "source", "initial", "objective-tilt",
                  "target-shift", "tikhonov")


def make_perturbation(prob: Problem, family: str, magnitude: float,
                      seed: int, modes: int = 4, decay: float = 2.0) -> Perturbation:
    """A perturbation of the given family with shapes drawn from `seed`.

    Shapes are unit-normalized so the magnitude parameter sets the scale;
    the reported size should still be the computed perturbation norm.
    """
    rng = np.random.default_rng(seed)
    g = prob.grid
    sp = prob.space
    if family == "control-tilt":
        sigma = rng.standard_normal((2, sp.mask_q.ncells))
        sigma *= magnitude / max(np.abs(sigma).max(), 1e-300)
        lam = rng.standard_normal(sp.mask_h.ncells)
        lam *= magnitude / max(np.abs(lam).max(), 1e-300)
        return Perturbation(sigma=sigma, lam=lam)
    if family == "source":
        return Perturbation(f_hat=fourier_vec2(g, rng, modes, decay) * magnitude,
                            h_hat=magnitude * fourier_scalar(g, rng, modes, decay))
    if family == "initial":
        return Perturbation(u0_hat=fourier_vec2(g, rng, modes, decay, div_free=True) * magnitude,
                            th0_hat=magnitude * fourier_scalar(g, rng, modes, decay))
    if family == "objective-tilt":
        return Perturbation(eta_u=fourier_vec2(g, rng, modes, decay) * magnitude,
                            eta_th=magnitude * fourier_scalar(g, rng, modes, decay))
    if family == "target-shift":
        return Perturbation(u_d_hat=fourier_vec2(g, rng, modes, decay) * magnitude,
                            th_d_hat=magnitude * fourier_scalar(g, rng, modes, decay))
    if family == "tikhonov":
        return Perturbation(eps1=magnitude, eps2=magnitude)
    raise ValueError(f"unknown perturbation family {family!r}; "
                     f"known: {', '.join(KNOWN_FAMILIES)}")


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------

def control_distance_l1(a: Control, b: Control) -> float:
    return a.axpy(-1.0, b).norm_l1()


def state_distance_l2(prob: Problem, ta, tb) -> float:
    """L2(Q) distance of two trajectories: velocity plus temperature."""
    g = prob.grid
    dt = prob.tg.dt
    su = 0.0
    st = 0.0
    for k in range(1, prob.tg.nt + 1):
        su += dt * g.norm2(ta.u[k] - tb.u[k]) ** 2
        st += dt * g.norm2(ta.theta[k] - tb.theta[k]) ** 2
    return float(np.sqrt(su) + np.sqrt(st))


def state_distance_linf(prob: Problem, ta, tb) -> float:
    g = prob.grid
    m = 0.0
    for k in range(prob.tg.nt + 1):
        m = max(m, (ta.u[k] - tb.u[k]).max_abs())
    return m


def adjoint_gradient_gap(prob: Problem, adj_a, adj_b) -> float:
    """sup-norm of the discrete gradients of (w - w*) and (Psi - Psi*)."""
    g = prob.grid
    m = 0.0
    for k in range(prob.tg.nt + 1):
        m = max(m, g.grad_inf_vec(adj_a.w[k] - adj_b.w[k]))
        m = max(m, g.grad_inf_scalar_any(adj_a.psi[k] - adj_b.psi[k]))
    return m


# ---------------------------------------------------------------------------
# perturbed solves
# ---------------------------------------------------------------------------

def solve_perturbed(prob: Problem, pert: Perturbation, ctrl0: Control,
                    opts: OptOptions) -> OptResult:
    """Minimize the perturbed objective starting from ctrl0."""
    return projected_gradient(prob, ctrl0, opts, pert)


@dataclass
class StabilityRecord:
    magnitude: float
    zeta_norm: float
    control_dist_l1: float
    state_dist_l2: float
    state_dist_linf: float
    adjoint_grad_gap: float
    kkt: float
    iterations: int
    termination: str
    seed: int
    in_trust_region: bool
    flags: str = ""


@dataclass
class SweepPlan:
    family: str
    magnitudes: np.ndarray
    seed: int = 0
    modes: int = 4
    decay: float = 2.0
    warm_start: bool = True
    threads: int = 1
    trust_radius: float | None = None

    def __post_init__(self):
        mags = np.asarray(self.magnitudes, dtype=float)
        if np.any(mags <= 0) or np.any(np.diff(mags) <= 0):
            raise ValueError("magnitudes must be positive and strictly increasing")
        self.magnitudes = mags


@dataclass
class HolderFit:
    slope: float
    intercept: float
    r2: float
    n_used: int

    @property
    def reliable(self):
        return self.n_used >= 2 and self.r2 >= 0.8

    def describe(self):
        if not self.reliable:
            return "no reliable fit"
        return f"{self.slope:.4f} (R^2 {self.r2:.4f})"


@dataclass
class SweepReport:
    records: list
    control_fit: HolderFit
    state_fit: HolderFit
    linf_constant: float      # fitted c in |u-u*|_inf <= c |rho-rho*|_L1^(1/s)
    exponent_consistency: bool


def _fit_records(xs, ys):
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    use = (xs > 0) & (ys > 0)
    if np.count_nonzero(use) < 2:
        return HolderFit(np.nan, np.nan, 0.0, int(np.count_nonzero(use)))
    s, b, r2 = loglog_fit(xs[use], ys[use])
    return HolderFit(s, b, r2, int(np.count_nonzero(use)))


def default_trust_radius(prob: Problem) -> float:
    """0.1 * M_U * |control region| * T (the configurable locality radius)."""
    sp = prob.space
    area = sp.grid.vol * (sp.mask_q.ncells + sp.mask_h.ncells)
    return 0.1 * sp.m_u * area * prob.tg.T


def stability_sweep(prob: Problem, ctrl_star: Control, plan: SweepPlan,
                    opts: OptOptions, s_norm: int = 4) -> SweepReport:
    """Distances of perturbed solutions vs perturbation size, with fits.

    Each magnitude solves an independent perturbed problem warm-started at
    the reference solution; points may run on a thread pool (results are
    aggregated in magnitude order, so thread count does not affect output).
    """
    base_state = prob.state(ctrl_star)
    base_adj = prob.adjoint(ctrl_star)
    trust = plan.trust_radius if plan.trust_radius is not None \
        else default_trust_radius(prob)

    def run_point(idx_mag):
        idx, mag = idx_mag
        pert = make_perturbation(prob, plan.family, mag, plan.seed + idx,
                                 plan.modes, plan.decay)
        start = ctrl_star if plan.warm_start else prob.space.zero()
        res = solve_perturbed(prob, pert, start, opts)
        dl1 = control_distance_l1(res.control, ctrl_star)
        pstate = prob.state(res.control, pert)
        padj = prob.adjoint(res.control, pert)
        rec = StabilityRecord(
            magnitude=mag,
            zeta_norm=pert.norm_P(prob.grid, prob.tg, s=s_norm, control=res.control),
            control_dist_l1=dl1,
            state_dist_l2=state_distance_l2(prob, pstate, base_state),
            state_dist_linf=state_distance_linf(prob, pstate, base_state),
            adjoint_grad_gap=adjoint_gradient_gap(prob, padj, base_adj),
            kkt=res.kkt_history[-1],
            iterations=res.iterations,
            termination=res.termination,
            seed=plan.seed + idx,
            in_trust_region=dl1 <= trust,
            flags=("" if plan.warm_start else "cold-start;non-local")
                  + ("" if res.termination in ("kkt_tol", "stagnation") else ";unconverged"),
        )
        return idx, rec

    items = list(enumerate(plan.magnitudes, start=1))
    if plan.threads > 1:
        with ThreadPoolExecutor(max_workers=plan.threads) as ex:
            done = list(ex.map(run_point, items))
    else:
        done = [run_point(it) for it in items]
    done.sort(key=lambda t: t[0])
    records = [StabilityRecord(0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                               kkt_residual_from_grad(ctrl_star, prob.grad_J(ctrl_star)),
                               0, "reference", plan.seed, True)]
    records.extend(r for _, r in done)
    zn = [r.zeta_norm for r in records]
    cfit = _fit_records(zn, [r.control_dist_l1 for r in records])
    sfit = _fit_records(zn, [r.state_dist_l2 for r in records])
    # fitted constant of the sup-norm vs control-distance consistency check
    cs = [r.state_dist_linf / r.control_dist_l1 ** (1.0 / s_norm)
          for r in records if r.control_dist_l1 > 0]
    linf_c = max(cs) if cs else 0.0
    consistent = True
    if cfit.reliable and sfit.reliable:
        consistent = sfit.slope >= 0.5 * cfit.slope - 0.15
    return SweepReport(records, cfit, sfit, linf_c, consistent)


# ---------------------------------------------------------------------------
# Tikhonov continuation
# ---------------------------------------------------------------------------

@dataclass
class PathPoint:
    eps: float
    control_dist_l1: float
    J: float
    kkt: float
    iterations: int


@dataclass
class PathReport:
    points: list
    fit: HolderFit
    mu_hat: float            # from the measure-condition estimate at the base
    mu_r2: float
    slope_vs_inv_mu: float   # fitted slope minus 1/mu_hat (nan if unreliable)


def tikhonov_path(prob: Problem, ctrl_star: Control, eps_grid,
                  opts: OptOptions, measure_eps_grid=None) -> PathReport:
    """Warm-started continuation over decreasing Tikhonov weights.

    eps_grid must be strictly decreasing; a trailing 0 reproduces the base
    problem and must return the reference solution unchanged.
    """
    eps_grid = np.asarray(eps_grid, dtype=float)
    if np.any(np.diff(eps_grid) >= 0):
        raise ValueError("eps_grid must be strictly decreasing")
    if np.any(eps_grid < 0):
        raise ValueError("eps values must be nonnegative")
    points = []
    current = ctrl_star
    for eps in eps_grid:
        pert = Perturbation(eps1=float(eps), eps2=float(eps))
        res = solve_perturbed(prob, pert, current, opts)
        current = res.control
        points.append(PathPoint(float(eps),
                                control_distance_l1(res.control, ctrl_star),
                                res.J_history[-1],
                                res.kkt_history[-1],
                                res.iterations))
    fit = _fit_records([p.eps for p in points],
                       [p.control_dist_l1 for p in points])
    if measure_eps_grid is None:
        measure_eps_grid = np.geomspace(1e-4, 1e-1, 8)
    w1, w2, ps = adjoint_restriction_samples(prob, ctrl_star)
    weight = prob.tg.dt * prob.grid.vol
    fits = [measure_condition_estimate(a, measure_eps_grid, weight)
            for a in (w1, w2, ps)]
    finite = [f for f in fits if np.isfinite(f.mu_hat)]
    if finite:
        best = max(finite, key=lambda f: f.r2)
        mu_hat, mu_r2 = best.mu_hat, best.r2
    else:
        mu_hat, mu_r2 = np.inf, 1.0
    gap = np.nan
    if fit.reliable and np.isfinite(mu_hat) and mu_hat > 0:
        gap = fit.slope - 1.0 / mu_hat
    return PathReport(points, fit, mu_hat, mu_r2, gap)


# ---------------------------------------------------------------------------
# growth-assumption probes
# ---------------------------------------------------------------------------

@dataclass
class GrowthSample:
    radius: float
    delta_l1: float
    lhs: float
    rhs: float
    ratio: float
    kind: str


@dataclass
class GrowthReport:
    variant: str
    tau: float
    samples: list
    min_ratio_per_radius: dict
    c_hat: float
    mu_hat: float
    fit_r2: float
    tracking_misfit: float
    adjoint_grad_sup: float
    delta_hat: float
    margin: float              # min(alpha1, alpha2) - 2*(sup grad w + sup grad Psi)

    @property
    def margin_positive(self):
        return self.margin > 0


def _random_directions(prob: Problem, ctrl_star: Control, n, rng):
    """Admissible directions: box vertices and smooth interior moves."""
    sp = prob.space
    out = []
    for i in range(n):
        if i % 2 == 0:
            vq = np.where(rng.random(ctrl_star.q.shape) < 0.5, sp.q_lo, sp.q_hi)
            vt = np.where(rng.random(ctrl_star.th.shape) < 0.5, sp.th_lo, sp.th_hi)
            kind = "vertex"
        else:
            vq = np.clip(ctrl_star.q + rng.standard_normal(ctrl_star.q.shape),
                         sp.q_lo, sp.q_hi)
            vt = np.clip(ctrl_star.th + rng.standard_normal(ctrl_star.th.shape),
                         sp.th_lo, sp.th_hi)
            kind = "smooth"
        d = Control(sp, vq - ctrl_star.q, vt - ctrl_star.th)
        nrm = d.norm_l1()
        if nrm > 0:
            out.append((d, kind, nrm))
    return out


def tracking_margin(prob: Problem, ctrl_star: Control, s_norm: int = 4):
    """Tracking-closeness quantities at the reference solution.

    Returns (misfit, sup-gradient of the adjoint pair, delta_hat, margin)
    where margin = min(alpha1, alpha2) - 2 * adjoint sup-gradient.
    """
    g = prob.grid
    dt = prob.tg.dt
    traj = prob.state(ctrl_star)
    adj = prob.adjoint(ctrl_star)
    mis = 0.0
    zero = Perturbation()
    mu_s = 0.0
    mth_s = 0.0
    for k in range(1, prob.tg.nt + 1):
        du, dth = prob._misfits(traj, zero, k)
        mu_s += dt * g.norm_lp(du, s_norm) ** s_norm
        mth_s += dt * g.norm_lp(dth, s_norm) ** s_norm
    mis = mu_s ** (1.0 / s_norm) + mth_s ** (1.0 / s_norm)
    sup = 0.0
    for k in range(prob.tg.nt + 1):
        sup = max(sup, g.grad_inf_vec(adj.w[k]) + g.grad_inf_scalar_any(adj.psi[k]))
    delta_hat = 2.0 * sup / mis if mis > 0 else np.inf
    margin = min(prob.weights.alpha1, prob.weights.alpha2) - 2.0 * sup
    return mis, sup, delta_hat, margin


def growth_probe(prob: Problem, ctrl_star: Control, n_samples, radius_grid,
                 seed, variant="control", tau=0.5, s_norm: int = 4) -> GrowthReport:
    """Empirical test of the first/second-variation growth assumptions.

    For each radius r, admissible points rho = rho* + r*(direction) are
    sampled; LHS = J'(rho*)(delta) + tau*J''(rho*)(delta)^2 is compared to
    the variant's growth quantity: the control L1 norm to a fitted power, or
    the squared state distance.
    """
    if variant not in ("control", "state"):
        raise ValueError("variant must be 'control' or 'state'")
    rng = np.random.default_rng(seed)
    grad = prob.grad_J(ctrl_star)
    base_state = prob.state(ctrl_star)
    dirs = _random_directions(prob, ctrl_star, n_samples, rng)
    samples = []
    per_radius = {}
    xs, ys = [], []
    for r in np.asarray(radius_grid, dtype=float):
        if r <= 0:
            continue
        ratios = []
        for d, kind, _ in dirs:
            from .optimizer import project_box
            cand = project_box(ctrl_star.axpy(r, d))
            delta = cand.axpy(-1.0, ctrl_star)
            dl1 = delta.norm_l1()
            if dl1 == 0.0:
                continue
            lin = prob.tangent(ctrl_star, delta)
            lhs = grad.dot_l2(delta) \
                + tau * prob.second_variation(ctrl_star, delta, lin=lin)
            if variant == "control":
                w = prob.weights
                g = prob.grid
                term = w.beta1 * g.norm2(lin.v[-1]) ** 2 \
                    + w.beta2 * g.norm2(lin.theta[-1]) ** 2
                rhs = dl1 ** 2 + term     # quadratic reference; mu fitted below
                xs.append(dl1)
                ys.append(max(lhs, 0.0))
            else:
                pstate = prob.state(cand)
                rhs = state_distance_l2(prob, pstate, base_state) ** 2
            ratio = lhs / rhs if rhs > 0 else np.inf
            ratios.append(ratio)
            samples.append(GrowthSample(float(r), dl1, lhs, rhs, ratio, kind))
        if ratios:
            per_radius[float(r)] = min(ratios)
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    mu_hat = np.nan
    c_hat = np.nan
    r2 = 0.0
    use = (xs > 0) & (ys > 0)
    if variant == "control" and np.count_nonzero(use) >= 2:
        slope, b, r2 = loglog_fit(xs[use], ys[use])
        mu_hat = slope - 1.0
        c_hat = float(np.exp(b))
    mis, sup, delta_hat, margin = tracking_margin(prob, ctrl_star, s_norm)
    return GrowthReport(variant, tau, samples, per_radius, c_hat, mu_hat, r2,
                        mis, sup, delta_hat, margin)


# ---------------------------------------------------------------------------
# second-order stability
# ---------------------------------------------------------------------------

@dataclass
class SecondOrderReport:
    skipped: bool
    reason: str
    margin: float
    zeta_norm: float
    smallness: float           # |zeta|_P + |zeta|_P^(1/5)
    min_ratio: float
    adjoint_margin_degradation: float
    samples: list


def second_order_stability_check(prob: Problem, ctrl_star: Control,
                                 pert: Perturbation, n_samples, seed,
                                 opts: OptOptions, s_norm: int = 4) -> SecondOrderReport:
    """Positivity of the perturbed second variation against state distances.

    Requires the tracking-closeness margin to be positive at the reference
    solution; otherwise returns a skipped report with the measured margin.
    """
    mis, sup, delta_hat, margin = tracking_margin(prob, ctrl_star, s_norm)
    if margin <= 0:
        return SecondOrderReport(True, "tracking-closeness margin not positive",
                                 margin, np.nan, np.nan, np.nan, np.nan, [])
    res = solve_perturbed(prob, pert, ctrl_star, opts)
    rho_hat = res.control
    zn = pert.norm_P(prob.grid, prob.tg, s=s_norm, control=rho_hat)
    small = zn + zn ** 0.2
    pstate_hat = prob.state(rho_hat, pert)
    adj_hat = prob.adjoint(rho_hat, pert)
    adj_star = prob.adjoint(ctrl_star)
    degr = adjoint_gradient_gap(prob, adj_hat, adj_star)
    rng = np.random.default_rng(seed)
    dirs = _random_directions(prob, rho_hat, n_samples, rng)
    from .optimizer import project_box
    ratios = []
    samples = []
    for d, kind, _ in dirs:
        cand = project_box(rho_hat.axpy(1.0, d))
        delta = cand.axpy(-1.0, rho_hat)
        if delta.norm_l1() == 0.0:
            continue
        j2 = prob.second_variation(rho_hat, delta, pert)
        cstate = prob.state(cand, pert)
        dist2 = state_distance_l2(prob, cstate, pstate_hat) ** 2
        if dist2 > 0:
            ratios.append(j2 / dist2)
            samples.append((kind, delta.norm_l1(), j2, dist2))
    mr = min(ratios) if ratios else np.inf
    return SecondOrderReport(False, "", margin, zn, small, mr, degr, samples)
