"""Grid operator tests: dense oracles, transposes, and invariants."""

import numpy as np
import pytest

from convecopt.grid import (Grid, GridConfig, Vec2, NumericalFailure,
                            _dx, _dy, _ax, _ay, _dx_t, _dy_t, _ax_t, _ay_t)

from conftest import rand_scalar, rand_vec2, rand_div_free


# ---------------------------------------------------------------------------
# dense reference implementations (independent loop-based oracles)
# ---------------------------------------------------------------------------

def divergence_dense(grid, w):
    out = np.zeros((grid.nx, grid.ny))
    for i in range(grid.nx):
        for j in range(grid.ny):
            out[i, j] = (w.u[i + 1, j] - w.u[i, j]) / grid.hx \
                + (w.v[i, j + 1] - w.v[i, j]) / grid.hy
    return out


def laplacian_dirichlet_dense(grid, s):
    out = np.zeros_like(s)
    nx, ny = grid.nx, grid.ny
    for i in range(nx):
        for j in range(ny):
            w = s[i - 1, j] if i > 0 else -s[i, j]
            e = s[i + 1, j] if i < nx - 1 else -s[i, j]
            so = s[i, j - 1] if j > 0 else -s[i, j]
            no = s[i, j + 1] if j < ny - 1 else -s[i, j]
            out[i, j] = (w - 2 * s[i, j] + e) / grid.hx ** 2 \
                + (so - 2 * s[i, j] + no) / grid.hy ** 2
    return out


def advect_scalar_dense(grid, U, s):
    """Loop version of the skew form 0.5[div(u s~) + u.grad s]-equivalent."""
    nx, ny = grid.nx, grid.ny
    hx, hy = grid.hx, grid.hy
    Fx = np.zeros((nx + 1, ny))
    for i in range(1, nx):
        for j in range(ny):
            Fx[i, j] = U.u[i, j] * 0.5 * (s[i - 1, j] + s[i, j])
    Fy = np.zeros((nx, ny + 1))
    for i in range(nx):
        for j in range(1, ny):
            Fy[i, j] = U.v[i, j] * 0.5 * (s[i, j - 1] + s[i, j])
    out = np.zeros((nx, ny))
    for i in range(nx):
        for j in range(ny):
            divu = (U.u[i + 1, j] - U.u[i, j]) / hx \
                + (U.v[i, j + 1] - U.v[i, j]) / hy
            out[i, j] = (Fx[i + 1, j] - Fx[i, j]) / hx \
                + (Fy[i, j + 1] - Fy[i, j]) / hy - 0.5 * s[i, j] * divu
    return out


def operator_matrix(apply_fn, shape_in, shape_out):
    """Dense matrix of a linear operator by probing unit vectors."""
    n_in = int(np.prod(shape_in))
    n_out = int(np.prod(shape_out))
    M = np.zeros((n_out, n_in))
    for c in range(n_in):
        e = np.zeros(n_in)
        e[c] = 1.0
        M[:, c] = apply_fn(e.reshape(shape_in)).ravel()
    return M


# ---------------------------------------------------------------------------
# stencil primitives
# ---------------------------------------------------------------------------

def test_stencil_transposes_are_exact_adjoints():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((7, 5))
    for fwd, adj, h in ((_dx, _dx_t, 0.3), (_ay, _ay_t, None),
                        (_ax, _ax_t, None), (_dy, _dy_t, 0.7)):
        if h is None:
            out = fwd(a)
            c = rng.standard_normal(out.shape)
            lhs = np.sum(out * c)
            rhs = np.sum(a * adj(c))
        else:
            out = fwd(a, h)
            c = rng.standard_normal(out.shape)
            lhs = np.sum(out * c)
            rhs = np.sum(a * adj(c, h))
        assert abs(lhs - rhs) <= 1e-13 * (1 + abs(lhs))


# ---------------------------------------------------------------------------
# construction and quadrature
# ---------------------------------------------------------------------------

def test_grid_config_rejects_tiny_grids():
    with pytest.raises(ValueError):
        GridConfig(3, 8)
    with pytest.raises(ValueError):
        GridConfig(8, 8, lx=-1.0)


def test_norms_match_extended_precision_reference(grid_rect):
    rng = np.random.default_rng(1)
    s = rand_scalar(grid_rect, rng)
    # reference accumulation in extended precision
    ref2 = float(np.sqrt(np.sum(np.abs(s.astype(np.longdouble)) ** 2)
                         * grid_rect.vol))
    assert abs(grid_rect.norm2(s) - ref2) <= 1e-13 * ref2
    ref1 = float(np.sum(np.abs(s.astype(np.longdouble))) * grid_rect.vol)
    assert abs(grid_rect.norm_lp(s, 1) - ref1) <= 1e-13 * ref1
    assert grid_rect.norm_lp(s, np.inf) == np.abs(s).max()
    with pytest.raises(ValueError):
        grid_rect.norm_lp(s, 0.5)


def test_inner_product_is_volume_weighted(grid_rect):
    rng = np.random.default_rng(2)
    a = rand_scalar(grid_rect, rng)
    b = rand_scalar(grid_rect, rng)
    assert np.isclose(grid_rect.inner(a, b),
                      grid_rect.vol * np.sum(a * b), rtol=1e-14)


def test_rect_mask_snaps_outward(grid8):
    m = grid8.rect_mask(0.13, 0.37, 0.5, 0.75)
    # cells [1,3) x [4,6) intersect the rectangle on the 8x8 unit grid
    assert set(zip(m.ii.tolist(), m.jj.tolist())) == \
        {(i, j) for i in (1, 2) for j in (4, 5)}
    with pytest.raises(ValueError):
        grid8.rect_mask(2.0, 3.0, 2.0, 3.0)


# ---------------------------------------------------------------------------
# divergence / gradient / Laplacian oracles
# ---------------------------------------------------------------------------

def test_divergence_matches_dense_oracle(grid_rect):
    rng = np.random.default_rng(3)
    w = rand_vec2(grid_rect, rng)
    assert np.allclose(grid_rect.divergence(w), divergence_dense(grid_rect, w),
                       atol=1e-14)


def test_gradient_is_negative_transpose_of_divergence(grid_rect):
    # <grad p, w> = -<p, div w> for interior-supported faces
    rng = np.random.default_rng(4)
    p = rand_scalar(grid_rect, rng)
    w = rand_vec2(grid_rect, rng)
    lhs = grid_rect.inner(grid_rect.gradient(p), w)
    rhs = -grid_rect.inner(p, grid_rect.divergence(w))
    assert abs(lhs - rhs) <= 1e-13 * (1 + abs(lhs))


def test_laplacian_matches_dense_oracle(grid_rect):
    rng = np.random.default_rng(5)
    s = rand_scalar(grid_rect, rng)
    assert np.allclose(grid_rect.laplacian_dirichlet(s),
                       laplacian_dirichlet_dense(grid_rect, s), atol=1e-12)


def test_laplacian_eigenfunction_refinement_order():
    # discrete Laplacian of sin(pi x) sin(pi y) converges at second order
    errs = []
    for n in (16, 32, 64):
        g = Grid(GridConfig(n, n))
        X, Y = np.meshgrid(g.xc, g.yc, indexing="ij")
        s = np.sin(np.pi * X) * np.sin(np.pi * Y)
        exact = -2 * np.pi ** 2 * s
        errs.append(g.norm2(g.laplacian_dirichlet(s) - exact))
    orders = [np.log2(errs[i - 1] / errs[i]) for i in (1, 2)]
    assert min(orders) > 1.9


def test_helmholtz_solver_inverts_operator(grid_rect):
    rng = np.random.default_rng(6)
    coef = 0.01
    s = rand_scalar(grid_rect, rng)
    sol = grid_rect.helmholtz_solve_scalar(coef, s)
    back = sol - coef * grid_rect.laplacian_dirichlet(sol)
    assert np.allclose(back, s, atol=1e-11)
    w = rand_vec2(grid_rect, rng)
    solv = grid_rect.helmholtz_solve_vec(coef, w)
    lap = grid_rect.laplacian_dirichlet_v(solv)
    backv = Vec2(solv.u - coef * lap.u, solv.v - coef * lap.v)
    assert np.allclose(backv.u[1:-1, :], w.u[1:-1, :], atol=1e-11)
    assert np.allclose(backv.v[:, 1:-1], w.v[:, 1:-1], atol=1e-11)


def test_helmholtz_solves_are_self_adjoint(grid_rect):
    rng = np.random.default_rng(7)
    a = rand_scalar(grid_rect, rng)
    b = rand_scalar(grid_rect, rng)
    sa = grid_rect.helmholtz_solve_scalar(0.02, a)
    sb = grid_rect.helmholtz_solve_scalar(0.02, b)
    assert np.isclose(grid_rect.inner(sa, b), grid_rect.inner(a, sb),
                      rtol=1e-12)
    wa = rand_vec2(grid_rect, rng)
    wb = rand_vec2(grid_rect, rng)
    va = grid_rect.helmholtz_solve_vec(0.02, wa)
    vb = grid_rect.helmholtz_solve_vec(0.02, wb)
    assert np.isclose(grid_rect.inner(va, wb), grid_rect.inner(wa, vb),
                      rtol=1e-12)


# ---------------------------------------------------------------------------
# Leray projection
# ---------------------------------------------------------------------------

def test_leray_removes_divergence(grid_rect):
    rng = np.random.default_rng(8)
    w = rand_vec2(grid_rect, rng)
    pw = grid_rect.leray_project(w)
    assert grid_rect.norm_lp(grid_rect.divergence(pw), np.inf) <= 1e-10


def test_leray_is_idempotent(grid_rect):
    rng = np.random.default_rng(9)
    w = rand_vec2(grid_rect, rng)
    p1 = grid_rect.leray_project(w)
    p2 = grid_rect.leray_project(p1)
    assert (p2 - p1).max_abs() <= 1e-11


def test_leray_annihilates_gradients(grid_rect):
    rng = np.random.default_rng(10)
    p = rand_scalar(grid_rect, rng)
    g = grid_rect.gradient(p)
    assert grid_rect.leray_project(g).max_abs() <= 1e-10


def test_leray_is_self_adjoint_and_orthogonal(grid_rect):
    rng = np.random.default_rng(11)
    a = rand_vec2(grid_rect, rng)
    b = rand_vec2(grid_rect, rng)
    pa = grid_rect.leray_project(a)
    pb = grid_rect.leray_project(b)
    assert np.isclose(grid_rect.inner(pa, b), grid_rect.inner(a, pb),
                      rtol=1e-11, atol=1e-13)
    # projection shrinks the norm
    assert grid_rect.norm2(pa) <= grid_rect.norm2(a) + 1e-14


def test_leray_matches_dense_pseudoinverse_solution():
    # small grid: compare against a dense least-squares Poisson solve
    g = Grid(GridConfig(8, 8))
    rng = np.random.default_rng(12)
    w = rand_vec2(g, rng)
    d = g.divergence(w)

    def lap_neumann(p):
        gr = g.gradient(p.reshape(g.nx, g.ny))
        return g.divergence(gr).ravel()

    n = g.nx * g.ny
    M = np.zeros((n, n))
    for c in range(n):
        e = np.zeros(n)
        e[c] = 1.0
        M[:, c] = lap_neumann(e)
    phi, *_ = np.linalg.lstsq(M, d.ravel(), rcond=None)
    phi = phi.reshape(g.nx, g.ny)
    ref = w - g.gradient(phi)
    got = g.leray_project(w)
    assert (got - ref).max_abs() <= 1e-9


def test_leray_rejects_nonfinite_input(grid8):
    w = grid8.vec2()
    w.u[2, 2] = np.nan
    with pytest.raises(NumericalFailure):
        grid8.leray_project(w)


def test_poisson_neumann_solution_is_zero_mean(grid_rect):
    rng = np.random.default_rng(13)
    rhs = rand_scalar(grid_rect, rng)
    phi = grid_rect.poisson_neumann(rhs)
    assert abs(phi.mean()) <= 1e-12


# ---------------------------------------------------------------------------
# advection
# ---------------------------------------------------------------------------

def test_advect_scalar_matches_dense_oracle(grid_rect):
    rng = np.random.default_rng(14)
    U = rand_vec2(grid_rect, rng)
    s = rand_scalar(grid_rect, rng)
    assert np.allclose(grid_rect.advect_scalar(U, s),
                       advect_scalar_dense(grid_rect, U, s), atol=1e-13)


def test_scalar_advection_is_energy_neutral(grid_rect):
    # <adv(U, s), s> = 0 for any U, by the skew form (not only div-free U)
    rng = np.random.default_rng(15)
    for _ in range(5):
        U = rand_vec2(grid_rect, rng)
        s = rand_scalar(grid_rect, rng)
        val = grid_rect.inner(grid_rect.advect_scalar(U, s), s)
        assert abs(val) <= 1e-12 * grid_rect.norm2(s) ** 2


def test_vector_advection_is_energy_neutral(grid_rect):
    rng = np.random.default_rng(16)
    for _ in range(5):
        U = rand_vec2(grid_rect, rng)
        W = rand_vec2(grid_rect, rng)
        val = grid_rect.inner(grid_rect.advect_vector(U, W), W)
        assert abs(val) <= 1e-12 * grid_rect.norm2(W) ** 2


def test_advection_is_linear_in_the_advected_field(grid_rect):
    rng = np.random.default_rng(17)
    U = rand_vec2(grid_rect, rng)
    s1 = rand_scalar(grid_rect, rng)
    s2 = rand_scalar(grid_rect, rng)
    lhs = grid_rect.advect_scalar(U, 2.0 * s1 - 3.0 * s2)
    rhs = 2.0 * grid_rect.advect_scalar(U, s1) - 3.0 * grid_rect.advect_scalar(U, s2)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_advect_scalar_transposes(grid_rect):
    rng = np.random.default_rng(18)
    U = rand_vec2(grid_rect, rng)
    s = rand_scalar(grid_rect, rng)
    c = rand_scalar(grid_rect, rng)
    fwd = grid_rect.inner(grid_rect.advect_scalar(U, s), c)
    assert np.isclose(fwd, grid_rect.inner(s, grid_rect.advect_scalar_t_field(U, c)),
                      rtol=1e-12, atol=1e-14)
    assert np.isclose(fwd, grid_rect.inner(U, grid_rect.advect_scalar_t_vel(s, c)),
                      rtol=1e-12, atol=1e-14)


def test_advect_vector_transposes(grid_rect):
    rng = np.random.default_rng(19)
    U = rand_vec2(grid_rect, rng)
    W = rand_vec2(grid_rect, rng)
    C = rand_vec2(grid_rect, rng)
    fwd = grid_rect.inner(grid_rect.advect_vector(U, W), C)
    assert np.isclose(fwd, grid_rect.inner(W, grid_rect.advect_vector_t_field(U, C)),
                      rtol=1e-12, atol=1e-14)
    assert np.isclose(fwd, grid_rect.inner(U, grid_rect.advect_vector_t_vel(W, C)),
                      rtol=1e-12, atol=1e-14)


def test_advection_warns_on_divergent_velocity(grid8):
    rng = np.random.default_rng(20)
    U = rand_vec2(grid8, rng)   # generically divergent
    s = rand_scalar(grid8, rng)
    with pytest.warns(UserWarning):
        grid8.advect_scalar(U, s, check_div=True)


# ---------------------------------------------------------------------------
# buoyancy and control injection
# ---------------------------------------------------------------------------

def test_buoyancy_transpose(grid_rect):
    rng = np.random.default_rng(21)
    th = rand_scalar(grid_rect, rng)
    C = rand_vec2(grid_rect, rng)
    d = (0.6, 0.8)
    lhs = grid_rect.inner(grid_rect.buoyancy(th, d), C)
    rhs = grid_rect.inner(th, grid_rect.buoyancy_t(C, d))
    assert np.isclose(lhs, rhs, rtol=1e-12, atol=1e-14)


def test_inject_restrict_transpose(grid_rect):
    rng = np.random.default_rng(22)
    qx = rand_scalar(grid_rect, rng)
    qy = rand_scalar(grid_rect, rng)
    C = rand_vec2(grid_rect, rng)
    lhs = grid_rect.inner(grid_rect.inject_cell_vector(qx, qy), C)
    rx, ry = grid_rect.restrict_face_vector(C)
    rhs = grid_rect.inner(qx, rx) + grid_rect.inner(qy, ry)
    assert np.isclose(lhs, rhs, rtol=1e-12, atol=1e-14)


def test_injection_keeps_boundary_faces_zero(grid_rect):
    rng = np.random.default_rng(23)
    f = grid_rect.inject_cell_vector(rand_scalar(grid_rect, rng),
                                     rand_scalar(grid_rect, rng))
    assert np.all(f.u[0, :] == 0) and np.all(f.u[-1, :] == 0)
    assert np.all(f.v[:, 0] == 0) and np.all(f.v[:, -1] == 0)


# ---------------------------------------------------------------------------
# export helpers
# ---------------------------------------------------------------------------

def test_scalar_csv_roundtrip(grid8, tmp_path):
    from convecopt.grid import scalar_to_csv
    rng = np.random.default_rng(24)
    s = rand_scalar(grid8, rng)
    path = tmp_path / "field.csv"
    scalar_to_csv(grid8, s, path, header_lines=["hash=abc"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# hash=abc"
    got = np.zeros_like(s)
    for line in lines[2:]:
        i, j, _, _, v = line.split(",")
        got[int(i), int(j)] = float(v)
    assert np.array_equal(got, s)


def test_vtk_export_structure(grid8, tmp_path):
    from convecopt.grid import fields_to_vtk
    rng = np.random.default_rng(25)
    path = tmp_path / "out.vtk"
    fields_to_vtk(grid8, path, scalars={"theta": rand_scalar(grid8, rng)},
                  vectors={"u": rand_vec2(grid8, rng)})
    text = path.read_text()
    assert text.startswith("# vtk DataFile Version 3.0")
    assert "SCALARS theta double 1" in text
    assert "VECTORS u double" in text
    assert f"POINT_DATA {grid8.nx * grid8.ny}" in text
