"""Tangent, second-derivative, and discrete adjoint solvers.

The forward step is the composition  x_{k+1} = (P D P) E_k(x_k)  where E_k is
the explicit stage around the base state at level k, D the implicit diffusion
solve, and P the Leray projection (the heat part omits P).  The tangent solver
applies the exact Frechet derivative of that composition; the adjoint solver
applies its exact transpose, term by term, so the discrete duality identity
holds to roundoff.  No automatic differentiation is involved: the transposed
advection terms are the stencil transposes from the grid module, which is
where the (grad u)^T w and Psi grad(theta) structure of the continuous
adjoint system comes out.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid, Vec2
from .boussinesq import PhysicalParams, TimeGrid, StateTrajectory


@dataclass
class LinTrajectory:
    v: list        # Vec2 per level 0..nt
    theta: list    # cell scalar per level

    @property
    def nlevels(self):
        return len(self.v)


@dataclass
class AdjointTrajectory:
    """Backward-sweep output.

    w[k], psi[k] for k < nt are the gradient-carrier fields: the pairing
    sum_k dt*<w[k], F_k> + dt*<psi[k], G_k> equals the tangent/terminal
    pairing exactly.  Level nt holds the supplied terminal data (velocity
    projected if it was not divergence-free).  lam0_* is the costate at
    level 0, which pairs against tangent initial data.
    """

    w: list
    psi: list
    r: list
    lam0_u: Vec2
    lam0_t: np.ndarray

    @property
    def nlevels(self):
        return len(self.w)


def _check_compat(tg: TimeGrid, base: StateTrajectory):
    if base.nlevels != tg.nt + 1:
        raise ValueError("base trajectory does not match the time grid")


def _at(seq, k):
    if seq is None:
        return None
    return seq[k]


def tangent_explicit(grid: Grid, pp: PhysicalParams, uk: Vec2, thk,
                     v: Vec2, vth, dt, F: Vec2 | None, G, coupling=True):
    """Exact linearization of the explicit stage around (uk, thk)."""
    buoy = grid.buoyancy(vth, pp.buoyancy_dir)
    vs = Vec2(v.u + dt * buoy.u, v.v + dt * buoy.v)
    ts = vth.copy()
    if coupling:
        a1 = grid.advect_vector(uk, v)
        a2 = grid.advect_vector(v, uk)
        vs.u -= dt * (a1.u + a2.u)
        vs.v -= dt * (a1.v + a2.v)
        ts = ts - dt * (grid.advect_scalar(uk, vth) + grid.advect_scalar(v, thk))
    if F is not None:
        vs.u += dt * F.u
        vs.v += dt * F.v
    if G is not None:
        ts = ts + dt * G
    vs.zero_normal_boundary()
    return vs, ts


def tangent_explicit_t(grid: Grid, pp: PhysicalParams, uk: Vec2, thk,
                       w: Vec2, psi, dt, coupling=True):
    """Transpose of tangent_explicit in its (v, vth) argument."""
    lu = w.copy()
    lt = psi + dt * grid.buoyancy_t(w, pp.buoyancy_dir)
    if coupling:
        a1 = grid.advect_vector_t_field(uk, w)
        a2 = grid.advect_vector_t_vel(uk, w)
        a3 = grid.advect_scalar_t_vel(thk, psi)
        lu.u -= dt * (a1.u + a2.u + a3.u)
        lu.v -= dt * (a1.v + a2.v + a3.v)
        lt = lt - dt * grid.advect_scalar_t_field(uk, psi)
    lu.zero_normal_boundary()
    return lu, lt


def solve_linearized(grid: Grid, pp: PhysicalParams, tg: TimeGrid,
                     base: StateTrajectory, rhsF=None, rhsG=None,
                     v0: Vec2 | None = None, theta0=None,
                     coupling=True) -> LinTrajectory:
    """Tangent solve: rhsF/rhsG hold one entry per step (k = 0..nt-1)."""
    _check_compat(tg, base)
    dt = tg.dt
    v = v0.copy().zero_normal_boundary() if v0 is not None else grid.vec2()
    th = theta0.copy() if theta0 is not None else grid.scalar()
    vs_list = [v]
    th_list = [th]
    for k in range(tg.nt):
        vs, ts = tangent_explicit(grid, pp, base.u[k], base.theta[k],
                                  vs_list[-1], th_list[-1], dt,
                                  _at(rhsF, k), _at(rhsG, k), coupling)
        vp = grid.leray_project(vs)
        vd = grid.helmholtz_solve_vec(dt * pp.nu, vp)
        tn = grid.helmholtz_solve_scalar(dt * pp.kappa, ts)
        vn = grid.leray_project(vd)
        vs_list.append(vn)
        th_list.append(tn)
    return LinTrajectory(vs_list, th_list)


def second_rhs(grid: Grid, lin1: LinTrajectory, lin2: LinTrajectory, nt):
    """Symmetrized bilinear right-hand sides for the second derivative."""
    rhsF = []
    rhsG = []
    for k in range(nt):
        a = grid.advect_vector(lin1.v[k], lin2.v[k])
        b = grid.advect_vector(lin2.v[k], lin1.v[k])
        rhsF.append(Vec2(-(a.u + b.u), -(a.v + b.v)))
        g = grid.advect_scalar(lin1.v[k], lin2.theta[k]) \
            + grid.advect_scalar(lin2.v[k], lin1.theta[k])
        rhsG.append(-g)
    return rhsF, rhsG


def solve_second(grid: Grid, pp: PhysicalParams, tg: TimeGrid,
                 base: StateTrajectory, lin1: LinTrajectory,
                 lin2: LinTrajectory, coupling=True) -> LinTrajectory:
    """Second derivative of the control-to-state map along (lin1, lin2).

    Solves the linearized system with the bilinear advection sources built
    from the two tangent trajectories; symmetric in its two arguments by
    construction of the right-hand side.
    """
    _check_compat(tg, base)
    if lin1.nlevels != base.nlevels or lin2.nlevels != base.nlevels:
        raise ValueError("tangent trajectories do not match the base")
    rhsF, rhsG = second_rhs(grid, lin1, lin2, tg.nt)
    return solve_linearized(grid, pp, tg, base, rhsF, rhsG, coupling=coupling)


def solve_adjoint(grid: Grid, pp: PhysicalParams, tg: TimeGrid,
                  base: StateTrajectory, rhsF=None, rhsG=None,
                  wT: Vec2 | None = None, psiT=None,
                  coupling=True) -> AdjointTrajectory:
    """Backward sweep applying the exact transpose of the tangent step.

    rhsF/rhsG hold one entry per time level (index k = 1..nt used; index 0
    ignored), pairing against the tangent state at the same level.  Terminal
    velocity data that are not discretely divergence-free are projected with
    a warning.
    """
    _check_compat(tg, base)
    dt = tg.dt
    nt = tg.nt
    if wT is None:
        wT = grid.vec2()
    else:
        wT = wT.copy().zero_normal_boundary()
        if grid.norm_lp(grid.divergence(wT), np.inf) > 1e-10 * (1.0 + wT.max_abs()):
            warnings.warn("adjoint terminal velocity was not divergence-free; projecting")
            wT = grid.leray_project(wT)
    if psiT is None:
        psiT = grid.scalar()
    w = [None] * (nt + 1)
    psi = [None] * (nt + 1)
    r = [None] * (nt + 1)
    w[nt] = wT
    psi[nt] = psiT.copy()
    r[nt] = grid.scalar()
    lu = wT.copy()
    lt = psiT.copy()
    fN = _at(rhsF, nt)
    gN = _at(rhsG, nt)
    if fN is not None:
        lu.u += dt * fN.u
        lu.v += dt * fN.v
    if gN is not None:
        lt = lt + dt * gN
    for k in range(nt - 1, -1, -1):
        # transpose of the implicit/projection block of step k
        lup = grid.leray_project(lu)
        lud = grid.helmholtz_solve_vec(dt * pp.nu, lup)
        wk, phi = grid.leray_project(lud, return_phi=True)
        pk = grid.helmholtz_solve_scalar(dt * pp.kappa, lt)
        w[k] = wk
        psi[k] = pk
        r[k] = phi / dt
        # transpose of the explicit stage around base level k
        lu, lt = tangent_explicit_t(grid, pp, base.u[k], base.theta[k],
                                    wk, pk, dt, coupling)
        if k >= 1:
            fk = _at(rhsF, k)
            gk = _at(rhsG, k)
            if fk is not None:
                lu.u += dt * fk.u
                lu.v += dt * fk.v
            if gk is not None:
                lt = lt + dt * gk
    return AdjointTrajectory(w, psi, r, lu, lt)


def duality_residual(grid: Grid, pp: PhysicalParams, tg: TimeGrid,
                     base: StateTrajectory,
                     tanF=None, tanG=None, v0=None, theta0=None,
                     adjF=None, adjG=None, wT=None, psiT=None,
                     coupling=True) -> float:
    """Relative mismatch of the discrete duality identity.

    LHS pairs the tangent trajectory against the adjoint sources and terminal
    data; RHS pairs the tangent sources and initial data against the adjoint
    sweep output.  Both sides are evaluated independently.
    """
    dt = tg.dt
    nt = tg.nt
    lin = solve_linearized(grid, pp, tg, base, tanF, tanG, v0, theta0, coupling)
    adj = solve_adjoint(grid, pp, tg, base, adjF, adjG, wT, psiT, coupling)
    lhs = 0.0
    for k in range(1, nt + 1):
        fk = _at(adjF, k)
        gk = _at(adjG, k)
        if fk is not None:
            lhs += dt * grid.inner(fk, lin.v[k])
        if gk is not None:
            lhs += dt * grid.inner(gk, lin.theta[k])
    lhs += grid.inner(lin.v[nt], adj.w[nt])
    lhs += grid.inner(lin.theta[nt], adj.psi[nt])
    rhs = 0.0
    for k in range(nt):
        fk = _at(tanF, k)
        gk = _at(tanG, k)
        if fk is not None:
            rhs += dt * grid.inner(adj.w[k], fk)
        if gk is not None:
            rhs += dt * grid.inner(adj.psi[k], gk)
    if v0 is not None:
        rhs += grid.inner(adj.lam0_u, v0)
    if theta0 is not None:
        rhs += grid.inner(adj.lam0_t, theta0)
    return abs(lhs - rhs) / (1.0 + abs(lhs))
