"""Manufactured-solution checks for the forward discretization."""

import numpy as np

from convecopt.grid import Grid, GridConfig
from convecopt.boussinesq import PhysicalParams
from convecopt.mms import build_case, initial_data, run_level, convergence_study


def test_manufactured_velocity_satisfies_continuity():
    # the stream-function construction gives exactly div-free initial data
    grid = Grid(GridConfig(16, 16))
    case = build_case(0.05, 0.05)
    u0, _ = initial_data(grid, case)
    assert grid.norm_lp(grid.divergence(u0), np.inf) <= 1e-12


def test_manufactured_fields_vanish_on_walls():
    case = build_case(0.05, 0.05)
    for y in (0.0, 0.37, 1.0):
        assert abs(case.u_fn(0.0, y, 0.3)) <= 1e-14
        assert abs(case.u_fn(1.0, y, 0.3)) <= 1e-14
    for x in (0.0, 0.64, 1.0):
        assert abs(case.v_fn(x, 0.0, 0.3)) <= 1e-14
        assert abs(case.v_fn(x, 1.0, 0.3)) <= 1e-14


def test_single_level_error_is_small():
    pp = PhysicalParams(0.05, 0.05)
    case = build_case(0.05, 0.05)
    err, nt = run_level(16, pp, case, T=0.1)
    assert err < 0.01
    assert nt >= 4


def test_convergence_study_second_order():
    errs, orders, _ = convergence_study((8, 16, 32))
    assert all(e2 < e1 for e1, e2 in zip(errs, errs[1:]))
    assert min(orders) >= 1.8
