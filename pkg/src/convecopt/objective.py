"""Tracking objective, its adjoint gradient, and second variation.

The control is a zero-order-hold pair (q, Theta): a two-component force
density supported on one cell region and a heat source on another, one value
per cell per time step, with box bounds.  The objective is the weighted sum
of squared tracking misfits over the space-time cylinder and at final time,
plus optional Tikhonov terms and the linear tilt terms of the perturbed
problem family.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import Grid, Vec2, RegionMask
from .boussinesq import (PhysicalParams, TimeGrid, SourceData, StateTrajectory,
                         solve_state)
from . import sensitivity as sen


@dataclass(frozen=True)
class ObjectiveWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta1: float = 0.0
    beta2: float = 0.0
    eps1: float = 0.0
    eps2: float = 0.0

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.beta1, self.beta2) < 0:
            raise ValueError("tracking weights must be nonnegative")
        if self.alpha1 + self.alpha2 + self.beta1 + self.beta2 <= 0:
            raise ValueError("at least one tracking weight must be positive")
        if self.eps1 < 0 or self.eps2 < 0:
            raise ValueError("Tikhonov weights must be nonnegative")


@dataclass
class Targets:
    """Tracking data; `None` entries mean zero fields."""

    u_d: Vec2 | None = None          # constant in time (or list per level)
    theta_d: np.ndarray | None = None
    u_T: Vec2 | None = None
    theta_T: np.ndarray | None = None

    def u_d_at(self, k):
        if self.u_d is None or isinstance(self.u_d, Vec2):
            return self.u_d
        return self.u_d[k]

    def theta_d_at(self, k):
        if self.theta_d is None or isinstance(self.theta_d, np.ndarray):
            return self.theta_d
        return self.theta_d[k]


@dataclass
class ControlSpace:
    """Geometry and bounds of the admissible set."""

    grid: Grid
    tg: TimeGrid
    mask_q: RegionMask
    mask_h: RegionMask
    q_lo: float = -1.0
    q_hi: float = 1.0
    th_lo: float = -1.0
    th_hi: float = 1.0

    def __post_init__(self):
        if self.q_lo > self.q_hi or self.th_lo > self.th_hi:
            raise ValueError("control bounds must satisfy lo <= hi")

    def zero(self):
        nt = self.tg.nt
        return Control(self,
                       np.zeros((nt, 2, self.mask_q.ncells)),
                       np.zeros((nt, self.mask_h.ncells)))

    def from_vector(self, x):
        nt = self.tg.nt
        nq = self.mask_q.ncells
        nh = self.mask_h.ncells
        q = x[: nt * 2 * nq].reshape(nt, 2, nq)
        th = x[nt * 2 * nq:].reshape(nt, nh)
        return Control(self, q.copy(), th.copy())

    @property
    def m_u(self):
        """Largest admissible control magnitude (the paper's box bound)."""
        return max(abs(self.q_lo), abs(self.q_hi), abs(self.th_lo), abs(self.th_hi))


@dataclass
class Control:
    """Zero-order-hold control: q[(k, comp, cell)], theta[(k, cell)]."""

    space: ControlSpace
    q: np.ndarray
    th: np.ndarray

    def copy(self):
        return Control(self.space, self.q.copy(), self.th.copy())

    def as_vector(self):
        return np.concatenate([self.q.ravel(), self.th.ravel()])

    def axpy(self, a, other):
        return Control(self.space, self.q + a * other.q, self.th + a * other.th)

    def scale(self, a):
        return Control(self.space, a * self.q, a * self.th)

    def dot_l2(self, other):
        """L2(Q) control-space inner product (dt and cell-volume weighted)."""
        w = self.space.tg.dt * self.space.grid.vol
        return w * (float(np.dot(self.q.ravel(), other.q.ravel()))
                    + float(np.dot(self.th.ravel(), other.th.ravel())))

    def norm_l2(self):
        return float(np.sqrt(self.dot_l2(self)))

    def norm_l1(self):
        w = self.space.tg.dt * self.space.grid.vol
        return w * (float(np.abs(self.q).sum()) + float(np.abs(self.th).sum()))

    def norm_linf(self):
        m = 0.0
        if self.q.size:
            m = max(m, float(np.abs(self.q).max()))
        if self.th.size:
            m = max(m, float(np.abs(self.th).max()))
        return m

    def is_admissible(self, tol=0.0):
        sp = self.space
        return (self.q.min(initial=sp.q_lo) >= sp.q_lo - tol
                and self.q.max(initial=sp.q_hi) <= sp.q_hi + tol
                and self.th.min(initial=sp.th_lo) >= sp.th_lo - tol
                and self.th.max(initial=sp.th_hi) <= sp.th_hi + tol)

    def hash(self):
        hsh = hashlib.sha256()
        hsh.update(self.q.tobytes())
        hsh.update(self.th.tobytes())
        return hsh.hexdigest()

    # -- mapping into the PDE source space ----------------------------------

    def source_fields(self, k):
        """Vec2 force and cell heat source for step k."""
        sp = self.space
        g = sp.grid
        qx = g.scalar()
        qy = g.scalar()
        qx[sp.mask_q.ii, sp.mask_q.jj] = self.q[k, 0]
        qy[sp.mask_q.ii, sp.mask_q.jj] = self.q[k, 1]
        f = g.inject_cell_vector(qx, qy)
        h = g.scalar()
        h[sp.mask_h.ii, sp.mask_h.jj] = self.th[k]
        return f, h


def restrict_adjoint(space: ControlSpace, w: Vec2, psi):
    """Transpose of the control-to-source mapping at one time step."""
    g = space.grid
    rx, ry = g.restrict_face_vector(w)
    q = np.stack([rx[space.mask_q.ii, space.mask_q.jj],
                  ry[space.mask_q.ii, space.mask_q.jj]])
    th = psi[space.mask_h.ii, space.mask_h.jj]
    return q, th


@dataclass
class Perturbation:
    """The perturbation tuple driving the stability experiments.

    Fields are constant in time except where a list is supplied.  Signs are
    normalized so the perturbed gradient on the control regions is exactly
    (restricted adjoint) + Tikhonov + (sigma, Lambda).
    """

    f_hat: Vec2 | None = None
    h_hat: np.ndarray | None = None
    u0_hat: Vec2 | None = None
    th0_hat: np.ndarray | None = None
    eta_u: Vec2 | None = None
    eta_th: np.ndarray | None = None
    sigma: np.ndarray | None = None       # (2, n_q cells) or (nt, 2, n_q)
    lam: np.ndarray | None = None         # (n_h,) or (nt, n_h)
    u_d_hat: Vec2 | None = None
    th_d_hat: np.ndarray | None = None
    eps1: float = 0.0
    eps2: float = 0.0

    def sigma_at(self, k):
        if self.sigma is None:
            return None
        return self.sigma if self.sigma.ndim == 2 else self.sigma[k]

    def lam_at(self, k):
        if self.lam is None:
            return None
        return self.lam if self.lam.ndim == 1 else self.lam[k]

    def hash(self):
        hsh = hashlib.sha256()
        for a in (self.f_hat, self.u0_hat, self.eta_u, self.u_d_hat):
            if a is not None:
                hsh.update(a.u.tobytes())
                hsh.update(a.v.tobytes())
            hsh.update(b"|")
        for a in (self.h_hat, self.th0_hat, self.eta_th, self.sigma,
                  self.lam, self.th_d_hat):
            if a is not None:
                hsh.update(np.ascontiguousarray(a).tobytes())
            hsh.update(b"|")
        hsh.update(np.float64(self.eps1).tobytes())
        hsh.update(np.float64(self.eps2).tobytes())
        return hsh.hexdigest()

    def norm_P(self, grid: Grid, tg: TimeGrid, s=4, control: "Control" = None):
        """Size of the perturbation: sum of per-component norms.

        Sources, tilts and target shifts in L^s; initial data by the L2
        value-plus-gradient proxy for the trace space; control-space tilts
        in the sup norm.  Tikhonov weights enter through the equivalent
        control tilt eps * rho when the reference control is supplied, else
        as the raw weights.
        """
        from .boussinesq import _h1_semi_sq_vec, _h1_semi_sq_scalar
        total = 0.0
        if self.f_hat is not None:
            total += grid.norm_lp(self.f_hat, s)
        if self.h_hat is not None:
            total += grid.norm_lp(self.h_hat, s)
        if self.u0_hat is not None:
            total += np.sqrt(grid.norm2(self.u0_hat) ** 2
                             + _h1_semi_sq_vec(grid, self.u0_hat))
        if self.th0_hat is not None:
            total += np.sqrt(grid.norm2(self.th0_hat) ** 2
                             + _h1_semi_sq_scalar(grid, self.th0_hat))
        if self.eta_u is not None:
            total += grid.norm_lp(self.eta_u, s)
        if self.eta_th is not None:
            total += grid.norm_lp(self.eta_th, s)
        if self.sigma is not None:
            total += float(np.abs(self.sigma).max())
        if self.lam is not None:
            total += float(np.abs(self.lam).max())
        if self.u_d_hat is not None:
            total += grid.norm_lp(self.u_d_hat, s)
        if self.th_d_hat is not None:
            total += grid.norm_lp(self.th_d_hat, s)
        if self.eps1 or self.eps2:
            if control is not None:
                total += self.eps1 * (float(np.abs(control.q).max())
                                      if control.q.size else 0.0)
                total += self.eps2 * (float(np.abs(control.th).max())
                                      if control.th.size else 0.0)
            else:
                total += self.eps1 + self.eps2
        return float(total)


def _zero_pert():
    return Perturbation()


@dataclass
class Problem:
    """Bundles everything needed to evaluate the objective at a control.

    Caches forward and adjoint solves keyed by (control, perturbation) so the
    optimizer's repeated J/grad evaluations at one point cost one solve.
    """

    grid: Grid
    phys: PhysicalParams
    tg: TimeGrid
    weights: ObjectiveWeights
    targets: Targets
    space: ControlSpace
    base_sources: SourceData = field(default_factory=SourceData)
    u0: Vec2 | None = None
    theta0: np.ndarray | None = None
    coupling: bool = True
    cache_size: int = 6

    def __post_init__(self):
        if self.u0 is None:
            self.u0 = self.grid.vec2()
        if self.theta0 is None:
            self.theta0 = self.grid.scalar()
        self._state_cache = {}
        self._adj_cache = {}

    # -- state solves --------------------------------------------------------

    def _sources_for(self, ctrl: Control, pert: Perturbation):
        nt = self.tg.nt
        fs = []
        hs = []
        for k in range(nt):
            f, h = ctrl.source_fields(k)
            bf = self.base_sources.f_at(k)
            bh = self.base_sources.h_at(k)
            if bf is not None:
                f = Vec2(f.u + bf.u, f.v + bf.v)
            if bh is not None:
                h = h + bh
            if pert.f_hat is not None:
                f = Vec2(f.u + pert.f_hat.u, f.v + pert.f_hat.v)
            if pert.h_hat is not None:
                h = h + pert.h_hat
            fs.append(f)
            hs.append(h)
        return SourceData(fs, hs)

    def _initial_for(self, pert: Perturbation):
        u0 = self.u0
        th0 = self.theta0
        if pert.u0_hat is not None:
            u0 = Vec2(u0.u + pert.u0_hat.u, u0.v + pert.u0_hat.v)
            u0 = self.grid.leray_project(u0.copy().zero_normal_boundary())
        if pert.th0_hat is not None:
            th0 = th0 + pert.th0_hat
        return u0, th0

    def state(self, ctrl: Control, pert: Perturbation | None = None) -> StateTrajectory:
        pert = pert or _zero_pert()
        key = (ctrl.hash(), pert.hash())
        hit = self._state_cache.get(key)
        if hit is not None:
            return hit
        sources = self._sources_for(ctrl, pert)
        u0, th0 = self._initial_for(pert)
        traj = solve_state(self.grid, self.phys, self.tg, sources, u0, th0,
                           coupling=self.coupling, check_cfl=False)
        if len(self._state_cache) >= self.cache_size:
            self._state_cache.pop(next(iter(self._state_cache)))
        self._state_cache[key] = traj
        return traj

    # -- objective -----------------------------------------------------------

    def _misfits(self, traj, pert, k):
        """(u_k - u_d - u_d_hat, theta_k - theta_d - theta_d_hat)."""
        du = traj.u[k].copy()
        ud = self.targets.u_d_at(k)
        if ud is not None:
            du.u -= ud.u
            du.v -= ud.v
        if pert.u_d_hat is not None:
            du.u -= pert.u_d_hat.u
            du.v -= pert.u_d_hat.v
        dth = traj.theta[k].copy()
        td = self.targets.theta_d_at(k)
        if td is not None:
            dth -= td
        if pert.th_d_hat is not None:
            dth -= pert.th_d_hat
        return du, dth

    def _terminal_misfits(self, traj):
        du = traj.u[-1].copy()
        if self.targets.u_T is not None:
            du.u -= self.targets.u_T.u
            du.v -= self.targets.u_T.v
        dth = traj.theta[-1].copy()
        if self.targets.theta_T is not None:
            dth = dth - self.targets.theta_T
        return du, dth

    def eval_J(self, ctrl: Control, pert: Perturbation | None = None) -> float:
        """Objective value; perturbed variant when a perturbation is given."""
        pert = pert or _zero_pert()
        w = self.weights
        g = self.grid
        dt = self.tg.dt
        traj = self.state(ctrl, pert)
        val = 0.0
        for k in range(1, self.tg.nt + 1):
            du, dth = self._misfits(traj, pert, k)
            if w.alpha1:
                val += 0.5 * w.alpha1 * dt * g.norm2(du) ** 2
            if w.alpha2:
                val += 0.5 * w.alpha2 * dt * g.norm2(dth) ** 2
            if pert.eta_u is not None:
                val += dt * g.inner(pert.eta_u, traj.u[k])
            if pert.eta_th is not None:
                val += dt * g.inner(pert.eta_th, traj.theta[k])
        if w.beta1 or w.beta2:
            duT, dthT = self._terminal_misfits(traj)
            val += 0.5 * w.beta1 * g.norm2(duT) ** 2
            val += 0.5 * w.beta2 * g.norm2(dthT) ** 2
        eps1 = w.eps1 + pert.eps1
        eps2 = w.eps2 + pert.eps2
        wq = dt * g.vol
        if eps1:
            val += 0.5 * eps1 * wq * float(np.sum(ctrl.q ** 2))
        if eps2:
            val += 0.5 * eps2 * wq * float(np.sum(ctrl.th ** 2))
        for k in range(self.tg.nt):
            sg = pert.sigma_at(k)
            lm = pert.lam_at(k)
            if sg is not None:
                val += wq * float(np.sum(sg * ctrl.q[k]))
            if lm is not None:
                val += wq * float(np.sum(lm * ctrl.th[k]))
        return val

    # -- adjoint and gradient ------------------------------------------------

    def adjoint(self, ctrl: Control, pert: Perturbation | None = None) -> sen.AdjointTrajectory:
        """Adjoint sweep with the tracking right-hand sides and terminal data."""
        pert = pert or _zero_pert()
        key = (ctrl.hash(), pert.hash())
        hit = self._adj_cache.get(key)
        if hit is not None:
            return hit
        w = self.weights
        traj = self.state(ctrl, pert)
        nt = self.tg.nt
        rhsF = [None] * (nt + 1)
        rhsG = [None] * (nt + 1)
        for k in range(1, nt + 1):
            du, dth = self._misfits(traj, pert, k)
            fv = None
            if w.alpha1:
                fv = Vec2(w.alpha1 * du.u, w.alpha1 * du.v)
            if pert.eta_u is not None:
                if fv is None:
                    fv = pert.eta_u.copy()
                else:
                    fv.u += pert.eta_u.u
                    fv.v += pert.eta_u.v
            rhsF[k] = fv
            gv = None
            if w.alpha2:
                gv = w.alpha2 * dth
            if pert.eta_th is not None:
                gv = pert.eta_th.copy() if gv is None else gv + pert.eta_th
            rhsG[k] = gv
        duT, dthT = self._terminal_misfits(traj)
        wT = Vec2(w.beta1 * duT.u, w.beta1 * duT.v) if w.beta1 else None
        psiT = w.beta2 * dthT if w.beta2 else None
        adj = sen.solve_adjoint(self.grid, self.phys, self.tg, traj,
                                rhsF, rhsG, wT, psiT, coupling=self.coupling)
        if len(self._adj_cache) >= self.cache_size:
            self._adj_cache.pop(next(iter(self._adj_cache)))
        self._adj_cache[key] = adj
        return adj

    def grad_J(self, ctrl: Control, pert: Perturbation | None = None) -> Control:
        """Pointwise gradient density on the control regions.

        The directional derivative is the control-space L2 product of this
        object with the direction.
        """
        pert = pert or _zero_pert()
        adj = self.adjoint(ctrl, pert)
        nt = self.tg.nt
        sp = self.space
        gq = np.zeros_like(ctrl.q)
        gt = np.zeros_like(ctrl.th)
        for k in range(nt):
            q, th = restrict_adjoint(sp, adj.w[k], adj.psi[k])
            gq[k] = q
            gt[k] = th
        eps1 = self.weights.eps1 + pert.eps1
        eps2 = self.weights.eps2 + pert.eps2
        if eps1:
            gq += eps1 * ctrl.q
        if eps2:
            gt += eps2 * ctrl.th
        for k in range(nt):
            sg = pert.sigma_at(k)
            lm = pert.lam_at(k)
            if sg is not None:
                gq[k] += sg
            if lm is not None:
                gt[k] += lm
        return Control(sp, gq, gt)

    # -- tangent along a control direction ------------------------------------

    def tangent(self, ctrl: Control, delta: Control,
                pert: Perturbation | None = None) -> sen.LinTrajectory:
        pert = pert or _zero_pert()
        traj = self.state(ctrl, pert)
        nt = self.tg.nt
        dF = []
        dG = []
        for k in range(nt):
            f, h = delta.source_fields(k)
            dF.append(f)
            dG.append(h)
        return sen.solve_linearized(self.grid, self.phys, self.tg, traj,
                                    dF, dG, coupling=self.coupling)

    def second_variation(self, ctrl: Control, delta: Control,
                         pert: Perturbation | None = None,
                         lin: sen.LinTrajectory | None = None) -> float:
        """Quadratic form J''(ctrl)[delta, delta] via one tangent + one adjoint."""
        return self.second_bilinear(ctrl, delta, delta, pert, lin, lin)

    def second_bilinear(self, ctrl: Control, d1: Control, d2: Control,
                        pert: Perturbation | None = None,
                        lin1: sen.LinTrajectory | None = None,
                        lin2: sen.LinTrajectory | None = None) -> float:
        """Assembled bilinear form behind the second variation.

        Tracking curvature of the two tangents, plus the pairing of the
        bilinear advection sources with the adjoint (the discrete version of
        the -2((v.grad)v, w) and -2(v.grad theta, Psi) terms), plus Tikhonov.
        """
        pert = pert or _zero_pert()
        w = self.weights
        g = self.grid
        dt = self.tg.dt
        nt = self.tg.nt
        if lin1 is None:
            lin1 = self.tangent(ctrl, d1, pert)
        if lin2 is None:
            lin2 = self.tangent(ctrl, d2, pert) if d2 is not d1 else lin1
        val = 0.0
        for k in range(1, nt + 1):
            if w.alpha1:
                val += w.alpha1 * dt * g.inner(lin1.v[k], lin2.v[k])
            if w.alpha2:
                val += w.alpha2 * dt * g.inner(lin1.theta[k], lin2.theta[k])
        if w.beta1:
            val += w.beta1 * g.inner(lin1.v[nt], lin2.v[nt])
        if w.beta2:
            val += w.beta2 * g.inner(lin1.theta[nt], lin2.theta[nt])
        if self.coupling:
            adj = self.adjoint(ctrl, pert)
            rhsF, rhsG = sen.second_rhs(g, lin1, lin2, nt)
            for k in range(nt):
                val += dt * g.inner(adj.w[k], rhsF[k])
                val += dt * g.inner(adj.psi[k], rhsG[k])
        eps1 = w.eps1 + pert.eps1
        eps2 = w.eps2 + pert.eps2
        wq = dt * g.vol
        if eps1:
            val += eps1 * wq * float(np.dot(d1.q.ravel(), d2.q.ravel()))
        if eps2:
            val += eps2 * wq * float(np.dot(d1.th.ravel(), d2.th.ravel()))
        return val

    def polarization_check(self, ctrl: Control, d1: Control, d2: Control,
                           pert: Perturbation | None = None) -> float:
        """Relative consistency of J'' as a quadratic vs bilinear form."""
        both = self.second_variation(ctrl, d1.axpy(1.0, d2), pert)
        a = self.second_variation(ctrl, d1, pert)
        b = self.second_variation(ctrl, d2, pert)
        cross = self.second_bilinear(ctrl, d1, d2, pert)
        scale = abs(both) + abs(a) + abs(b) + abs(cross)
        if scale == 0.0:
            return 0.0
        return abs(both - a - b - 2.0 * cross) / scale
