"""Staggered-grid discretization of a rectangular domain.

Velocity components live on cell faces (MAC layout: x-component on vertical
faces, y-component on horizontal faces), scalars at cell centers.  The module
provides the differential operators used by the flow solver, the discrete
Leray projection, and the transposes of every linear operator that appears in
the one-step time map.  The transposes are what make an exact discrete adjoint
possible, so they are implemented stencil-by-stencil rather than through any
differentiation tool.

Sign/layout conventions: arrays are indexed [i, j] with i along x.  A scalar
field has shape (nx, ny); the x-velocity has shape (nx+1, ny) and the
y-velocity (nx, ny+1).  Boundary-normal faces (i = 0, nx for u; j = 0, ny
for v) are not degrees of freedom and are kept at exactly zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class NumericalFailure(RuntimeError):
    """A linear solve or time step failed to produce usable numbers."""


# ---------------------------------------------------------------------------
# small stencil primitives and their transposes
# ---------------------------------------------------------------------------

def _dx(a, h):
    return (a[1:, :] - a[:-1, :]) / h


def _dy(a, h):
    return (a[:, 1:] - a[:, :-1]) / h


def _dx_t(c, h):
    # adjoint of _dx in the plain (unweighted) dot product
    out = np.zeros((c.shape[0] + 1, c.shape[1]))
    out[1:, :] += c / h
    out[:-1, :] -= c / h
    return out


def _dy_t(c, h):
    out = np.zeros((c.shape[0], c.shape[1] + 1))
    out[:, 1:] += c / h
    out[:, :-1] -= c / h
    return out


def _ax(a):
    return 0.5 * (a[1:, :] + a[:-1, :])


def _ay(a):
    return 0.5 * (a[:, 1:] + a[:, :-1])


def _ax_t(c):
    out = np.zeros((c.shape[0] + 1, c.shape[1]))
    out[1:, :] += 0.5 * c
    out[:-1, :] += 0.5 * c
    return out


def _ay_t(c):
    out = np.zeros((c.shape[0], c.shape[1] + 1))
    out[:, 1:] += 0.5 * c
    out[:, :-1] += 0.5 * c
    return out


# ---------------------------------------------------------------------------
# field containers
# ---------------------------------------------------------------------------

@dataclass
class Vec2:
    """MAC velocity-like field: u on vertical faces, v on horizontal faces."""

    u: np.ndarray
    v: np.ndarray

    def copy(self):
        return Vec2(self.u.copy(), self.v.copy())

    def __add__(self, o):
        return Vec2(self.u + o.u, self.v + o.v)

    def __sub__(self, o):
        return Vec2(self.u - o.u, self.v - o.v)

    def __mul__(self, a):
        return Vec2(self.u * a, self.v * a)

    __rmul__ = __mul__

    def __neg__(self):
        return Vec2(-self.u, -self.v)

    def zero_normal_boundary(self):
        self.u[0, :] = 0.0
        self.u[-1, :] = 0.0
        self.v[:, 0] = 0.0
        self.v[:, -1] = 0.0
        return self

    def max_abs(self):
        m = 0.0
        if self.u.size:
            m = max(m, float(np.max(np.abs(self.u))))
        if self.v.size:
            m = max(m, float(np.max(np.abs(self.v))))
        return m

    def isfinite(self):
        return bool(np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v)))


@dataclass
class RegionMask:
    """Cell-index mask for a control subdomain.

    Built from an axis-aligned rectangle snapped outward to whole cells;
    stored both as a boolean (nx, ny) array and as flat index lists.
    """

    mask: np.ndarray  # bool, (nx, ny)
    ii: np.ndarray = field(init=False)
    jj: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.mask.any():
            raise ValueError("region mask is empty")
        self.ii, self.jj = np.nonzero(self.mask)

    @property
    def ncells(self):
        return self.ii.size


@dataclass(frozen=True)
class GridConfig:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError("nx and ny must be at least 4")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("domain extents must be positive")


class Grid:
    """Uniform MAC grid with cached sparse factorizations."""

    # above this cell count the pressure solve falls back to CG
    _DIRECT_LIMIT = 256 * 256

    def __init__(self, cfg: GridConfig):
        self.cfg = cfg
        self.nx, self.ny = cfg.nx, cfg.ny
        self.lx, self.ly = float(cfg.lx), float(cfg.ly)
        self.hx = self.lx / self.nx
        self.hy = self.ly / self.ny
        self.vol = self.hx * self.hy
        # cell-center / face coordinates
        self.xc = (np.arange(self.nx) + 0.5) * self.hx
        self.yc = (np.arange(self.ny) + 0.5) * self.hy
        self.xf = np.arange(self.nx + 1) * self.hx
        self.yf = np.arange(self.ny + 1) * self.hy
        self._poisson = None
        self._poisson_mat = None
        self._diff = {}

    # -- allocation helpers -------------------------------------------------

    def scalar(self):
        return np.zeros((self.nx, self.ny))

    def vec2(self):
        return Vec2(np.zeros((self.nx + 1, self.ny)),
                    np.zeros((self.nx, self.ny + 1)))

    def check_scalar(self, s):
        if s.shape != (self.nx, self.ny):
            raise ValueError(f"scalar field shape {s.shape} does not match grid")

    def check_vec2(self, w):
        if w.u.shape != (self.nx + 1, self.ny) or w.v.shape != (self.nx, self.ny + 1):
            raise ValueError("vector field shape does not match grid")

    # -- masks --------------------------------------------------------------

    def rect_mask(self, x0, x1, y0, y1) -> RegionMask:
        """Rectangle snapped outward to whole cells (cells that intersect it)."""
        m = np.zeros((self.nx, self.ny), dtype=bool)
        i0 = max(0, int(np.floor(x0 / self.hx + 1e-12)))
        i1 = min(self.nx, int(np.ceil(x1 / self.hx - 1e-12)))
        j0 = max(0, int(np.floor(y0 / self.hy + 1e-12)))
        j1 = min(self.ny, int(np.ceil(y1 / self.hy - 1e-12)))
        m[i0:i1, j0:j1] = True
        return RegionMask(m)

    # -- quadrature ---------------------------------------------------------

    def inner(self, a, b):
        """Cell-volume-weighted inner product; works for scalars and Vec2."""
        if isinstance(a, Vec2):
            return self.vol * (float(np.dot(a.u.ravel(), b.u.ravel()))
                               + float(np.dot(a.v.ravel(), b.v.ravel())))
        return self.vol * float(np.dot(a.ravel(), b.ravel()))

    def norm_lp(self, a, p=2):
        if p != np.inf and p < 1:
            raise ValueError("p must be >= 1 or inf")
        if isinstance(a, Vec2):
            flat = np.concatenate([a.u.ravel(), a.v.ravel()])
        else:
            flat = np.asarray(a).ravel()
        if p == np.inf:
            return float(np.max(np.abs(flat))) if flat.size else 0.0
        return float((self.vol * np.sum(np.abs(flat) ** p)) ** (1.0 / p))

    def norm2(self, a):
        return self.norm_lp(a, 2)

    # -- basic operators ----------------------------------------------------

    def divergence(self, w: Vec2):
        self.check_vec2(w)
        return _dx(w.u, self.hx) + _dy(w.v, self.hy)

    def gradient(self, p):
        """Cell scalar to faces; zero on boundary-normal faces (Neumann)."""
        g = self.vec2()
        g.u[1:-1, :] = _dx(p, self.hx)
        g.v[:, 1:-1] = _dy(p, self.hy)
        return g

    def laplacian_dirichlet(self, s):
        """5-point Laplacian, homogeneous Dirichlet via ghost = -interior."""
        self.check_scalar(s)
        hx2, hy2 = self.hx ** 2, self.hy ** 2
        out = -2.0 * s * (1.0 / hx2 + 1.0 / hy2)
        out[1:, :] += s[:-1, :] / hx2
        out[:-1, :] += s[1:, :] / hx2
        out[:, 1:] += s[:, :-1] / hy2
        out[:, :-1] += s[:, 1:] / hy2
        # ghost = -interior mirror at the four walls
        out[0, :] -= s[0, :] / hx2
        out[-1, :] -= s[-1, :] / hx2
        out[:, 0] -= s[:, 0] / hy2
        out[:, -1] -= s[:, -1] / hy2
        return out

    def laplacian_dirichlet_v(self, w: Vec2):
        """Componentwise Laplacian of a no-slip velocity field.

        In the direction normal to a wall the component has honest degrees of
        freedom on the wall (held at zero); tangentially the wall sits half a
        cell away and is enforced by the mirror ghost.
        """
        self.check_vec2(w)
        hx2, hy2 = self.hx ** 2, self.hy ** 2
        u, v = w.u, w.v
        ou = np.zeros_like(u)
        ui = u[1:-1, :]
        lap = -2.0 * ui * (1.0 / hx2 + 1.0 / hy2)
        lap += u[:-2, :] / hx2 + u[2:, :] / hx2
        tmp = np.zeros_like(ui)
        tmp[:, 1:] += ui[:, :-1] / hy2
        tmp[:, :-1] += ui[:, 1:] / hy2
        tmp[:, 0] -= ui[:, 0] / hy2
        tmp[:, -1] -= ui[:, -1] / hy2
        ou[1:-1, :] = lap + tmp
        ov = np.zeros_like(v)
        vi = v[:, 1:-1]
        lap = -2.0 * vi * (1.0 / hx2 + 1.0 / hy2)
        lap += v[:, :-2] / hy2 + v[:, 2:] / hy2
        tmp = np.zeros_like(vi)
        tmp[1:, :] += vi[:-1, :] / hx2
        tmp[:-1, :] += vi[1:, :] / hx2
        tmp[0, :] -= vi[0, :] / hx2
        tmp[-1, :] -= vi[-1, :] / hx2
        ov[:, 1:-1] = lap + tmp
        return Vec2(ou, ov)

    # -- sparse matrices for the implicit solves ----------------------------

    def _cell_helmholtz(self, coef):
        """I - coef * laplacian_dirichlet as a sparse matrix (row-major cells)."""
        nx, ny = self.nx, self.ny
        hx2, hy2 = self.hx ** 2, self.hy ** 2
        n = nx * ny
        idx = np.arange(n).reshape(nx, ny)
        diag = np.full((nx, ny), 2.0 / hx2 + 2.0 / hy2)
        diag[0, :] += 1.0 / hx2
        diag[-1, :] += 1.0 / hx2
        diag[:, 0] += 1.0 / hy2
        diag[:, -1] += 1.0 / hy2
        rows, cols, vals = [idx.ravel()], [idx.ravel()], [1.0 + coef * diag.ravel()]
        rows.append(idx[1:, :].ravel()); cols.append(idx[:-1, :].ravel())
        vals.append(np.full((nx - 1) * ny, -coef / hx2))
        rows.append(idx[:-1, :].ravel()); cols.append(idx[1:, :].ravel())
        vals.append(np.full((nx - 1) * ny, -coef / hx2))
        rows.append(idx[:, 1:].ravel()); cols.append(idx[:, :-1].ravel())
        vals.append(np.full(nx * (ny - 1), -coef / hy2))
        rows.append(idx[:, :-1].ravel()); cols.append(idx[:, 1:].ravel())
        vals.append(np.full(nx * (ny - 1), -coef / hy2))
        A = sp.csc_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
        return A

    def _face_helmholtz(self, coef, comp):
        """I - coef * lap on one velocity component, Dirichlet walls.

        comp 'u': interior DOFs i = 1..nx-1 eliminated against zero wall
        faces; comp 'v' symmetric.  Matrix covers interior faces only.
        """
        nx, ny = self.nx, self.ny
        hx2, hy2 = self.hx ** 2, self.hy ** 2
        if comp == "u":
            mi, mj = nx - 1, ny
            # normal direction x (full-cell neighbor spacing), tangential y
            dn2, dt2 = hx2, hy2
        else:
            mi, mj = nx, ny - 1
            dn2, dt2 = hy2, hx2
        n = mi * mj
        idx = np.arange(n).reshape(mi, mj)
        if comp == "u":
            diag = np.full((mi, mj), 2.0 / dn2 + 2.0 / dt2)
            diag[:, 0] += 1.0 / dt2
            diag[:, -1] += 1.0 / dt2
            off_i = -coef / dn2
            off_j = -coef / dt2
        else:
            diag = np.full((mi, mj), 2.0 / dn2 + 2.0 / dt2)
            diag[0, :] += 1.0 / dt2
            diag[-1, :] += 1.0 / dt2
            off_i = -coef / dt2
            off_j = -coef / dn2
        rows, cols, vals = [idx.ravel()], [idx.ravel()], [1.0 + coef * diag.ravel()]
        rows.append(idx[1:, :].ravel()); cols.append(idx[:-1, :].ravel())
        vals.append(np.full((mi - 1) * mj, off_i))
        rows.append(idx[:-1, :].ravel()); cols.append(idx[1:, :].ravel())
        vals.append(np.full((mi - 1) * mj, off_i))
        rows.append(idx[:, 1:].ravel()); cols.append(idx[:, :-1].ravel())
        vals.append(np.full(mi * (mj - 1), off_j))
        rows.append(idx[:, :-1].ravel()); cols.append(idx[:, 1:].ravel())
        vals.append(np.full(mi * (mj - 1), off_j))
        return sp.csc_matrix((np.concatenate(vals),
                              (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n))

    def diffusion_solver(self, coef, kind):
        """Cached factorization of (I - coef * Laplacian) for kind in c/u/v."""
        key = (kind, float(coef))
        if key not in self._diff:
            if kind == "c":
                A = self._cell_helmholtz(coef)
            else:
                A = self._face_helmholtz(coef, kind)
            self._diff[key] = spla.factorized(A)
        return self._diff[key]

    def helmholtz_solve_scalar(self, coef, rhs):
        sol = self.diffusion_solver(coef, "c")(rhs.ravel())
        if not np.all(np.isfinite(sol)):
            raise NumericalFailure("implicit scalar diffusion solve produced non-finite values")
        return sol.reshape(self.nx, self.ny)

    def helmholtz_solve_vec(self, coef, w: Vec2):
        out = self.vec2()
        su = self.diffusion_solver(coef, "u")(w.u[1:-1, :].ravel())
        sv = self.diffusion_solver(coef, "v")(w.v[:, 1:-1].ravel())
        if not (np.all(np.isfinite(su)) and np.all(np.isfinite(sv))):
            raise NumericalFailure("implicit velocity diffusion solve produced non-finite values")
        out.u[1:-1, :] = su.reshape(self.nx - 1, self.ny)
        out.v[:, 1:-1] = sv.reshape(self.nx, self.ny - 1)
        return out

    # -- pressure Poisson / Leray projection --------------------------------

    def _build_poisson(self):
        """Neumann Laplacian over cells, pinned at cell 0 for invertibility.

        Row and column 0 are replaced by the identity; the dropped equation
        is redundant (rows sum to zero) once the right-hand side is demeaned,
        so the pinned solve still yields an exact solution of the singular
        system.
        """
        nx, ny = self.nx, self.ny
        hx2, hy2 = self.hx ** 2, self.hy ** 2
        n = nx * ny
        idx = np.arange(n).reshape(nx, ny)
        diag = np.zeros((nx, ny))
        diag[1:, :] -= 1.0 / hx2
        diag[:-1, :] -= 1.0 / hx2
        diag[:, 1:] -= 1.0 / hy2
        diag[:, :-1] -= 1.0 / hy2
        rows, cols, vals = [idx.ravel()], [idx.ravel()], [diag.ravel()]
        rows.append(idx[1:, :].ravel()); cols.append(idx[:-1, :].ravel())
        vals.append(np.full((nx - 1) * ny, 1.0 / hx2))
        rows.append(idx[:-1, :].ravel()); cols.append(idx[1:, :].ravel())
        vals.append(np.full((nx - 1) * ny, 1.0 / hx2))
        rows.append(idx[:, 1:].ravel()); cols.append(idx[:, :-1].ravel())
        vals.append(np.full(nx * (ny - 1), 1.0 / hy2))
        rows.append(idx[:, :-1].ravel()); cols.append(idx[:, 1:].ravel())
        vals.append(np.full(nx * (ny - 1), 1.0 / hy2))
        A = sp.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n)).tolil()
        A.rows[0] = [0]
        A.data[0] = [1.0]
        for r in range(1, n):
            if 0 in A.rows[r]:
                k = A.rows[r].index(0)
                del A.rows[r][k]
                del A.data[r][k]
        A = A.tocsc()
        self._poisson_mat = A
        if n <= self._DIRECT_LIMIT:
            self._poisson = spla.factorized(A)
        else:
            ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=20)
            M = spla.LinearOperator((n, n), ilu.solve)

            def solve(b, A=A, M=M):
                x, info = spla.cg(A, b, rtol=1e-12, atol=0.0, maxiter=10000, M=M)
                if info != 0:
                    raise NumericalFailure(f"pressure solve did not converge (info={info})")
                return x

            self._poisson = solve

    def poisson_neumann(self, rhs):
        """Solve lap(phi) = rhs with homogeneous Neumann data, zero-mean phi."""
        if self._poisson is None:
            self._build_poisson()
        b = rhs.ravel().copy()
        b -= b.mean()
        b[0] = 0.0
        phi = self._poisson(b)
        if not np.all(np.isfinite(phi)):
            raise NumericalFailure("pressure Poisson solve produced non-finite values")
        phi = phi.reshape(self.nx, self.ny)
        return phi - phi.mean()

    def leray_project(self, w: Vec2, return_phi=False):
        """Remove the discrete gradient part: returns w - grad(phi)."""
        self.check_vec2(w)
        if not w.isfinite():
            raise NumericalFailure("leray_project received non-finite input")
        d = self.divergence(w)
        phi = self.poisson_neumann(d)
        g = self.gradient(phi)
        out = Vec2(w.u - g.u, w.v - g.v).zero_normal_boundary()
        if return_phi:
            return out, phi
        return out

    # -- advection (skew-symmetric) and transposes --------------------------

    def advect_scalar(self, U: Vec2, s, check_div=False):
        """Skew form 0.5[(u.grad)s + div(u s)] with centered interpolation."""
        self.check_vec2(U)
        self.check_scalar(s)
        if check_div and self.norm_lp(self.divergence(U), np.inf) > 1e-8:
            warnings.warn("advecting velocity is not discretely divergence-free")
        hx, hy = self.hx, self.hy
        u, v = U.u, U.v
        Fx = np.zeros_like(u)
        Fx[1:-1, :] = u[1:-1, :] * _ax(s)
        Fy = np.zeros_like(v)
        Fy[:, 1:-1] = v[:, 1:-1] * _ay(s)
        divu = _dx(u, hx) + _dy(v, hy)
        return _dx(Fx, hx) + _dy(Fy, hy) - 0.5 * s * divu

    def advect_scalar_t_field(self, U: Vec2, c):
        """Transpose of s -> advect_scalar(U, s)."""
        hx, hy = self.hx, self.hy
        u, v = U.u, U.v
        cu = _dx_t(c, hx)
        cv = _dy_t(c, hy)
        out = _ax_t(u[1:-1, :] * cu[1:-1, :])
        out += _ay_t(v[:, 1:-1] * cv[:, 1:-1])
        divu = _dx(u, hx) + _dy(v, hy)
        out -= 0.5 * divu * c
        return out

    def advect_scalar_t_vel(self, s, c):
        """Transpose of U -> advect_scalar(U, s); returns a Vec2."""
        hx, hy = self.hx, self.hy
        cu = _dx_t(c, hx)
        cv = _dy_t(c, hy)
        gu = np.zeros((self.nx + 1, self.ny))
        gv = np.zeros((self.nx, self.ny + 1))
        gu[1:-1, :] = _ax(s) * cu[1:-1, :]
        gv[:, 1:-1] = _ay(s) * cv[:, 1:-1]
        d = -0.5 * s * c
        gu += _dx_t(d, hx)
        gv += _dy_t(d, hy)
        return Vec2(gu, gv).zero_normal_boundary()

    def advect_vector(self, U: Vec2, W: Vec2, check_div=False):
        """Skew-symmetric advection of W by U, componentwise on shifted grids."""
        self.check_vec2(U)
        self.check_vec2(W)
        if check_div and self.norm_lp(self.divergence(U), np.inf) > 1e-8:
            warnings.warn("advecting velocity is not discretely divergence-free")
        hx, hy = self.hx, self.hy
        u, v = U.u, U.v
        wu, wv = W.u, W.v
        # x-component: lives on vertical faces, shifted cells centered there
        a = _ax(u)                          # (nx, ny)   transport u at centers
        b = _ax(v)                          # (nx-1, ny+1) transport v at corners
        Fx = a * _ax(wu)                    # (nx, ny)
        Fy = np.zeros((self.nx - 1, self.ny + 1))
        Fy[:, 1:-1] = b[:, 1:-1] * _ay(wu[1:-1, :])
        divs = _dx(a, hx) + _dy(b, hy)      # (nx-1, ny)
        ou = np.zeros_like(wu)
        ou[1:-1, :] = _dx(Fx, hx) + _dy(Fy, hy) - 0.5 * wu[1:-1, :] * divs
        # y-component: mirror image
        c2 = _ay(v)                         # (nx, ny)
        d2 = _ay(u)                         # (nx+1, ny-1)
        Fy2 = c2 * _ay(wv)                  # (nx, ny)
        Fx2 = np.zeros((self.nx + 1, self.ny - 1))
        Fx2[1:-1, :] = d2[1:-1, :] * _ax(wv[:, 1:-1])
        divs2 = _dy(c2, hy) + _dx(d2, hx)   # (nx, ny-1)
        ov = np.zeros_like(wv)
        ov[:, 1:-1] = _dx(Fx2, hx) + _dy(Fy2, hy) - 0.5 * wv[:, 1:-1] * divs2
        return Vec2(ou, ov)

    def advect_vector_t_field(self, U: Vec2, C: Vec2):
        """Transpose of W -> advect_vector(U, W)."""
        hx, hy = self.hx, self.hy
        u, v = U.u, U.v
        cu = C.u[1:-1, :]
        cv = C.v[:, 1:-1]
        a = _ax(u)
        b = _ax(v)
        gu = np.zeros_like(U.u)
        Fx_cot = _dx_t(cu, hx)              # (nx, ny)
        gu += _ax_t(a * Fx_cot)
        Fy_cot = _dy_t(cu, hy)              # (nx-1, ny+1)
        gu[1:-1, :] += _ay_t(b[:, 1:-1] * Fy_cot[:, 1:-1])
        divs = _dx(a, hx) + _dy(b, hy)
        gu[1:-1, :] -= 0.5 * divs * cu
        c2 = _ay(v)
        d2 = _ay(u)
        gv = np.zeros_like(U.v)
        Fy2_cot = _dy_t(cv, hy)             # (nx, ny)
        gv += _ay_t(c2 * Fy2_cot)
        Fx2_cot = _dx_t(cv, hx)             # (nx+1, ny-1)
        gv[:, 1:-1] += _ax_t(d2[1:-1, :] * Fx2_cot[1:-1, :])
        divs2 = _dy(c2, hy) + _dx(d2, hx)
        gv[:, 1:-1] -= 0.5 * divs2 * cv
        return Vec2(gu, gv).zero_normal_boundary()

    def advect_vector_t_vel(self, W: Vec2, C: Vec2):
        """Transpose of U -> advect_vector(U, W); returns a Vec2."""
        hx, hy = self.hx, self.hy
        wu, wv = W.u, W.v
        cu = C.u[1:-1, :]
        cv = C.v[:, 1:-1]
        gu = np.zeros((self.nx + 1, self.ny))
        gv = np.zeros((self.nx, self.ny + 1))
        # x-component path: cotangent flows into a = _ax(u), b = _ax(v)
        Fx_cot = _dx_t(cu, hx)              # (nx, ny)
        a_cot = _ax(wu) * Fx_cot
        Fy_cot = _dy_t(cu, hy)              # (nx-1, ny+1)
        b_cot = np.zeros((self.nx - 1, self.ny + 1))
        b_cot[:, 1:-1] = _ay(wu[1:-1, :]) * Fy_cot[:, 1:-1]
        dcot = -0.5 * wu[1:-1, :] * cu      # (nx-1, ny)
        a_cot += _dx_t(dcot, hx)
        b_cot += _dy_t(dcot, hy)
        gu += _ax_t(a_cot)
        gv += _ax_t(b_cot)
        # y-component path: cotangent flows into c2 = _ay(v), d2 = _ay(u)
        Fy2_cot = _dy_t(cv, hy)             # (nx, ny)
        c2_cot = _ay(wv) * Fy2_cot
        Fx2_cot = _dx_t(cv, hx)             # (nx+1, ny-1)
        d2_cot = np.zeros((self.nx + 1, self.ny - 1))
        d2_cot[1:-1, :] = _ax(wv[:, 1:-1]) * Fx2_cot[1:-1, :]
        dcot2 = -0.5 * wv[:, 1:-1] * cv     # (nx, ny-1)
        c2_cot += _dy_t(dcot2, hy)
        d2_cot += _dx_t(dcot2, hx)
        gv += _ay_t(c2_cot)
        gu += _ay_t(d2_cot)
        return Vec2(gu, gv).zero_normal_boundary()

    # -- buoyancy -----------------------------------------------------------

    def buoyancy(self, theta, direction):
        """Cell scalar times a constant direction, interpolated to faces."""
        bx, by = direction
        out = self.vec2()
        if bx != 0.0:
            out.u[1:-1, :] = bx * _ax(theta)
        if by != 0.0:
            out.v[:, 1:-1] = by * _ay(theta)
        return out

    def buoyancy_t(self, C: Vec2, direction):
        """Transpose of buoyancy; returns a cell scalar."""
        bx, by = direction
        out = self.scalar()
        if bx != 0.0:
            out += bx * _ax_t(C.u[1:-1, :])
        if by != 0.0:
            out += by * _ay_t(C.v[:, 1:-1])
        return out

    # -- cell-vector <-> face injection (control forcing) -------------------

    def inject_cell_vector(self, qx, qy):
        """Cell-centered vector density interpolated onto interior faces."""
        out = self.vec2()
        out.u[1:-1, :] = _ax(qx)
        out.v[:, 1:-1] = _ay(qy)
        return out

    def restrict_face_vector(self, C: Vec2):
        """Transpose of inject_cell_vector; face field to cell-centered vector."""
        return _ax_t(C.u[1:-1, :]), _ay_t(C.v[:, 1:-1])

    # -- gradient magnitude for sup-norm diagnostics ------------------------

    def grad_inf_scalar(self, s):
        """Max norm of the one-sided difference gradient of a cell scalar."""
        gx = np.abs(_dx(s, self.hx))
        gy = np.abs(_dy(s, self.hy))
        m = 0.0
        if gx.size:
            m = max(m, float(gx.max()))
        if gy.size:
            m = max(m, float(gy.max()))
        return m

    def grad_inf_vec(self, w: Vec2):
        return max(self.grad_inf_scalar_any(w.u), self.grad_inf_scalar_any(w.v))

    def grad_inf_scalar_any(self, arr):
        gx = np.abs(np.diff(arr, axis=0)) / self.hx
        gy = np.abs(np.diff(arr, axis=1)) / self.hy
        m = 0.0
        if gx.size:
            m = max(m, float(gx.max()))
        if gy.size:
            m = max(m, float(gy.max()))
        return m


# ---------------------------------------------------------------------------
# export helpers
# ---------------------------------------------------------------------------

def scalar_to_csv(grid: Grid, s, path, header_lines=()):
    """Flat CSV (i, j, x, y, value) for a cell-centered field."""
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("i,j,x,y,value\n")
        for i in range(grid.nx):
            for j in range(grid.ny):
                fh.write(f"{i},{j},{grid.xc[i]:.17g},{grid.yc[j]:.17g},{s[i, j]:.17g}\n")


def fields_to_vtk(grid: Grid, path, scalars=None, vectors=None, title="fields"):
    """Legacy VTK structured-points text file with cell-centered data.

    Vector fields are averaged from faces to centers for visualization only.
    """
    scalars = scalars or {}
    vectors = vectors or {}
    n = grid.nx * grid.ny
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\n")
        fh.write("ASCII\n")
        fh.write("DATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {grid.nx} {grid.ny} 1\n")
        fh.write(f"ORIGIN {grid.hx / 2:.17g} {grid.hy / 2:.17g} 0\n")
        fh.write(f"SPACING {grid.hx:.17g} {grid.hy:.17g} 1\n")
        fh.write(f"POINT_DATA {n}\n")
        for name, s in scalars.items():
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for j in range(grid.ny):
                for i in range(grid.nx):
                    fh.write(f"{s[i, j]:.17g}\n")
        for name, w in vectors.items():
            uc = _ax(w.u)
            vc = _ay(w.v)
            fh.write(f"VECTORS {name} double\n")
            for j in range(grid.ny):
                for i in range(grid.nx):
                    fh.write(f"{uc[i, j]:.17g} {vc[i, j]:.17g} 0\n")
