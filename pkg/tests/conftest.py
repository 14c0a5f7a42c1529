"""Shared builders for the test suite."""

import numpy as np
import pytest

from rcto.fem import StructuredGrid
from rcto.materials import Phase, TwoPhaseMaterial
from rcto.problem import DesignState, MacroProblem
from rcto.uncertainty import HybridParameter, Interval, UncertainSet


def steel_foam() -> TwoPhaseMaterial:
    """Two-phase composite in N/mm/tonne units: stiff heavy phase 1, light phase 2."""
    return TwoPhaseMaterial(Phase(200e3, 0.3, 7.9e-9), Phase(150e3, 0.3, 0.79e-9))


def cantilever(nx, ny, elem=1.0, cell_n=4, omega=0.0, penalty=3.0, load=-1000.0):
    """Left-edge clamped cantilever with a tip load at the right-bottom corner node."""
    grid = StructuredGrid((nx, ny), (elem, elem))
    cell = StructuredGrid((cell_n, cell_n), (1.0 / cell_n, 1.0 / cell_n))
    fixed_nodes = [j * (nx + 1) for j in range(ny + 1)]
    fixed = np.array([[2 * n, 2 * n + 1] for n in fixed_nodes]).ravel()
    f = np.zeros(grid.n_dofs)
    f[2 * nx + 1] = load
    return MacroProblem(grid=grid, cell=cell, fixed_dofs=fixed, force=f, omega=omega, penalty=penalty)


def fractional_interval(mid, frac):
    return Interval(mid * (1.0 - frac), mid * (1.0 + frac))


def hybrid_params(
    material: TwoPhaseMaterial,
    mean_frac=0.05,
    cov=0.05,
    sigma_frac=0.0,
    rho_mean_frac=None,
):
    """Five-parameter hybrid set scaled off a base material.

    mean_frac: half-width of the expectation intervals (relative);
    cov: sigma midpoint as a fraction of the mean; sigma_frac: half-width of
    the sigma intervals (relative to the sigma midpoint).
    """
    if rho_mean_frac is None:
        rho_mean_frac = mean_frac

    def par(name, mid, mfrac):
        return HybridParameter(
            name,
            fractional_interval(mid, mfrac),
            fractional_interval(cov * mid, sigma_frac) if cov > 0 else Interval.exact(0.0),
        )

    p1, p2 = material.phase1, material.phase2
    return UncertainSet([
        par("e1", p1.youngs, mean_frac),
        par("e2", p2.youngs, mean_frac),
        par("nu", p1.poisson, mean_frac),
        par("rho1", p1.density, rho_mean_frac),
        par("rho2", p2.density, rho_mean_frac),
    ])


def degenerate_params(material: TwoPhaseMaterial) -> UncertainSet:
    """All five parameters declared but fully deterministic."""
    p1, p2 = material.phase1, material.phase2
    return UncertainSet([
        HybridParameter("e1", Interval.exact(p1.youngs), Interval.exact(0.0)),
        HybridParameter("e2", Interval.exact(p2.youngs), Interval.exact(0.0)),
        HybridParameter("nu", Interval.exact(p1.poisson), Interval.exact(0.0)),
        HybridParameter("rho1", Interval.exact(p1.density), Interval.exact(0.0)),
        HybridParameter("rho2", Interval.exact(p2.density), Interval.exact(0.0)),
    ])


def full_state(problem: MacroProblem, x_min=1e-6, micro=None) -> DesignState:
    x_micro = np.ones(problem.cell.n_elems) if micro is None else np.asarray(micro, dtype=float)
    return DesignState(x_macro=np.ones(problem.grid.n_elems), x_micro=x_micro, x_min=x_min)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
