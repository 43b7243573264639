"""Shared helpers for the test suite."""

import numpy as np
import pytest

from convecopt.grid import Grid, GridConfig, Vec2
from convecopt.boussinesq import PhysicalParams, TimeGrid, SourceData
from convecopt.objective import (ObjectiveWeights, Targets, ControlSpace,
                                 Problem)


def rand_scalar(grid, rng, scale=1.0):
    return scale * rng.standard_normal((grid.nx, grid.ny))


def rand_vec2(grid, rng, scale=1.0):
    w = Vec2(scale * rng.standard_normal((grid.nx + 1, grid.ny)),
             scale * rng.standard_normal((grid.nx, grid.ny + 1)))
    return w.zero_normal_boundary()


def rand_div_free(grid, rng, scale=1.0):
    return grid.leray_project(rand_vec2(grid, rng, scale))


@pytest.fixture
def grid8():
    return Grid(GridConfig(8, 8))


@pytest.fixture
def grid_rect():
    # non-square cells catch hx/hy mixups
    return Grid(GridConfig(8, 6, lx=1.0, ly=0.75))


def make_problem(nx=8, ny=8, T=0.2, nt=8, nu=0.05, kappa=0.02,
                 seed=0, coupling=True, eps1=0.0, eps2=0.0,
                 beta1=0.0, beta2=0.0, target_scale=0.5):
    """Small tracking problem with a smooth synthetic target."""
    grid = Grid(GridConfig(nx, ny))
    tg = TimeGrid(T, nt)
    pp = PhysicalParams(nu, kappa)
    w = ObjectiveWeights(1.0, 1.0, beta1, beta2, eps1, eps2)
    rng = np.random.default_rng(seed)
    from convecopt.stability_lab import fourier_scalar, fourier_vec2
    ud = fourier_vec2(grid, rng, 3, 2.0) * target_scale
    td = target_scale * fourier_scalar(grid, rng, 3, 2.0)
    targets = Targets(u_d=ud, theta_d=td)
    space = ControlSpace(grid, tg,
                         grid.rect_mask(0.1, 0.6, 0.1, 0.5),
                         grid.rect_mask(0.4, 0.9, 0.5, 0.9))
    return Problem(grid, pp, tg, w, targets, space, coupling=coupling)


def rand_control(space, rng, scale=0.5):
    from convecopt.objective import Control
    q = scale * rng.standard_normal((space.tg.nt, 2, space.mask_q.ncells))
    th = scale * rng.standard_normal((space.tg.nt, space.mask_h.ncells))
    return Control(space, q, th)
