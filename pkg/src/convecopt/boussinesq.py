"""Forward-in-time solver for the buoyancy-coupled incompressible flow system.

One IMEX Euler step per time level: explicit advection, buoyancy and forcing,
then an implicit diffusion solve per unknown, then projection of the velocity
onto the discretely divergence-free space.  The step is deliberately a
composition of linear solves and bilinear terms so that its linearization and
transpose can be written down exactly (see the sensitivity module).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid, Vec2, NumericalFailure


@dataclass(frozen=True)
class PhysicalParams:
    nu: float
    kappa: float
    buoyancy_dir: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.nu <= 0 or self.kappa <= 0:
            raise ValueError("nu and kappa must be positive")
        n = np.hypot(*self.buoyancy_dir)
        if abs(n - 1.0) > 1e-12:
            raise ValueError("buoyancy_dir must be a unit vector")


@dataclass(frozen=True)
class TimeGrid:
    T: float
    nt: int

    def __post_init__(self):
        if self.T <= 0 or self.nt < 1:
            raise ValueError("need T > 0 and nt >= 1")

    @property
    def dt(self):
        return self.T / self.nt

    def times(self):
        return np.linspace(0.0, self.T, self.nt + 1)


@dataclass
class SourceData:
    """Body force and heat source, constant in time or one entry per step.

    f entries are Vec2 (face layout), h entries cell scalars.  `None` means
    zero.  Per-step lists must have nt entries (value held on [t_k, t_{k+1})).
    """

    f: object = None
    h: object = None

    def f_at(self, k):
        if self.f is None:
            return None
        if isinstance(self.f, Vec2):
            return self.f
        return self.f[k]

    def h_at(self, k):
        if self.h is None:
            return None
        if isinstance(self.h, np.ndarray):
            return self.h
        return self.h[k]


@dataclass
class StateTrajectory:
    u: list            # Vec2 per level 0..nt
    p: list            # cell scalar per level (p[0] is zeros by convention)
    theta: list        # cell scalar per level

    @property
    def nlevels(self):
        return len(self.u)


@dataclass
class EnergyReport:
    max_energy: float
    dissipation: float
    data_norm: float
    ratio: float
    series: np.ndarray  # columns: k, t, ke_u, ke_theta, enstrophy_u, grad_theta


def _cfl_advisory(grid: Grid, dt, u0: Vec2, extra_scale=0.0):
    vmax = u0.max_abs() + extra_scale
    if vmax > 0 and dt * vmax / min(grid.hx, grid.hy) > 0.5:
        warnings.warn(
            f"advective CFL estimate {dt * vmax / min(grid.hx, grid.hy):.3g} exceeds 0.5",
            stacklevel=3,
        )


def step_explicit(grid: Grid, pp: PhysicalParams, u: Vec2, theta, dt,
                  f: Vec2 | None, h, coupling=True):
    """Explicit stage of one IMEX step; returns tentative (u*, theta*)."""
    if coupling:
        adv_u = grid.advect_vector(u, u)
        adv_t = grid.advect_scalar(u, theta)
    else:
        adv_u = None
        adv_t = None
    buoy = grid.buoyancy(theta, pp.buoyancy_dir)
    us = Vec2(u.u + dt * buoy.u, u.v + dt * buoy.v)
    if adv_u is not None:
        us.u -= dt * adv_u.u
        us.v -= dt * adv_u.v
    if f is not None:
        us.u += dt * f.u
        us.v += dt * f.v
    ts = theta.copy() if adv_t is None else theta - dt * adv_t
    if h is not None:
        ts = ts + dt * h
    us.zero_normal_boundary()
    return us, ts


def step(grid: Grid, pp: PhysicalParams, dt, u: Vec2, theta,
         f: Vec2 | None, h, coupling=True):
    """One full IMEX step; returns (u_next, p_next, theta_next).

    The tentative velocity is projected both before and after the implicit
    diffusion solve.  The extra projection keeps the one-step map of the
    symmetric form P D P E, whose transpose produces adjoint velocities that
    are themselves discretely divergence-free.
    """
    us, ts = step_explicit(grid, pp, u, theta, dt, f, h, coupling)
    usp = grid.leray_project(us)
    uss = grid.helmholtz_solve_vec(dt * pp.nu, usp)
    tn = grid.helmholtz_solve_scalar(dt * pp.kappa, ts)
    un, phi = grid.leray_project(uss, return_phi=True)
    return un, phi / dt, tn


def solve_state(grid: Grid, pp: PhysicalParams, tg: TimeGrid,
                sources: SourceData, u0: Vec2, theta0,
                coupling=True, check_cfl=True) -> StateTrajectory:
    """March the nonlinear system from (u0, theta0) over the full time grid.

    Sources must already include any control forcing (see objective module
    for the control-to-source mapping).  NaNs abort with the failing step.
    """
    grid.check_vec2(u0)
    grid.check_scalar(theta0)
    if not (u0.isfinite() and np.all(np.isfinite(theta0))):
        raise ValueError("initial data must be finite")
    dt = tg.dt
    if check_cfl:
        _cfl_advisory(grid, dt, u0)
    u = u0.copy().zero_normal_boundary()
    th = theta0.copy()
    us = [u]
    ps = [grid.scalar()]
    ths = [th]
    for k in range(tg.nt):
        try:
            un, pn, tn = step(grid, pp, dt, us[-1], ths[-1],
                              sources.f_at(k), sources.h_at(k), coupling)
        except NumericalFailure as exc:
            raise NumericalFailure(f"step {k}: {exc}") from exc
        if not (un.isfinite() and np.all(np.isfinite(tn))):
            raise NumericalFailure(
                f"non-finite state detected at step {k} "
                f"(|u| max so far {us[-1].max_abs():.3g})")
        us.append(un)
        ps.append(pn)
        ths.append(tn)
    return StateTrajectory(us, ps, ths)


def energy_report(grid: Grid, tg: TimeGrid, traj: StateTrajectory,
                  sources: SourceData, u0: Vec2, theta0) -> EnergyReport:
    """Discrete analog of the weak-solution energy estimate, for regression.

    Reports max_k(|u_k|^2 + |theta_k|^2), the accumulated gradient
    dissipation, the data functional, and their ratio.
    """
    dt = tg.dt
    nt = tg.nt
    times = tg.times()
    rows = np.zeros((nt + 1, 6))
    max_e = 0.0
    diss = 0.0
    for k in range(nt + 1):
        u = traj.u[k]
        th = traj.theta[k]
        keu = grid.norm2(u) ** 2
        ket = grid.norm2(th) ** 2
        # H1 seminorms via interior differences (enstrophy-like diagnostics)
        eu = _h1_semi_sq_vec(grid, u)
        et = _h1_semi_sq_scalar(grid, th)
        rows[k] = (k, times[k], keu, ket, eu, et)
        max_e = max(max_e, keu + ket)
        if k >= 1:
            diss += dt * (eu + et)
    fnorm = 0.0
    gnorm = 0.0
    for k in range(nt):
        fk = sources.f_at(k)
        hk = sources.h_at(k)
        if fk is not None:
            fnorm += dt * grid.norm2(fk) ** 2
        if hk is not None:
            gnorm += dt * grid.norm2(hk) ** 2
    data = np.sqrt(fnorm) + np.sqrt(gnorm) + grid.norm2(u0) + grid.norm2(theta0)
    num = max_e + diss
    ratio = 0.0 if data == 0.0 else num / data ** 2
    return EnergyReport(max_e, diss, data, ratio, rows)


def _h1_semi_sq_scalar(grid: Grid, s):
    gx = np.diff(s, axis=0) / grid.hx
    gy = np.diff(s, axis=1) / grid.hy
    return grid.vol * (float(np.sum(gx * gx)) + float(np.sum(gy * gy)))


def _h1_semi_sq_vec(grid: Grid, w: Vec2):
    return _h1_semi_sq_any(grid, w.u) + _h1_semi_sq_any(grid, w.v)


def _h1_semi_sq_any(grid: Grid, arr):
    gx = np.diff(arr, axis=0) / grid.hx
    gy = np.diff(arr, axis=1) / grid.hy
    return grid.vol * (float(np.sum(gx * gx)) + float(np.sum(gy * gy)))
