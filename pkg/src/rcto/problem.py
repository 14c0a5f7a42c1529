"""Two-scale problem context: macro mesh with loads/BCs plus the unit cell.

Holds the stiffness/mass interpolation of the discrete macro design
variables (the ratio-preserving power law that keeps void elements from
developing artificial local modes) and assembles the dynamic stiffness and
its derivatives with respect to uncertain material parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import StructuredGrid
from .homogenization import EffectiveProperties

X_MIN_DEFAULT = 1e-6


@dataclass
class DesignState:
    """Discrete density fields on both scales; values live in {x_min, 1} exactly."""

    x_macro: np.ndarray
    x_micro: np.ndarray
    x_min: float = X_MIN_DEFAULT
    iteration: int = 0
    weight_fraction: float = 1.0

    def copy(self) -> "DesignState":
        return replace(self, x_macro=self.x_macro.copy(), x_micro=self.x_micro.copy())

    @property
    def macro_solid_fraction(self) -> float:
        return float(np.mean(self.x_macro == 1.0))

    @property
    def micro_phase1_fraction(self) -> float:
        return float(np.mean(self.x_micro == 1.0))


def stiffness_scale(x, penalty: float, x_min: float):
    """Macro stiffness interpolation factor: x_min at x = x_min, 1 at x = 1.

    The offset keeps the stiffness-to-mass penalization ratio bounded in
    void elements.
    """
    c = (x_min - x_min**penalty) / (1.0 - x_min**penalty)
    x = np.asarray(x, dtype=float)
    return c * (1.0 - x**penalty) + x**penalty


def stiffness_scale_derivative(x, penalty: float, x_min: float):
    c = (x_min - x_min**penalty) / (1.0 - x_min**penalty)
    x = np.asarray(x, dtype=float)
    return penalty * x ** (penalty - 1.0) * (1.0 - c)


@dataclass(frozen=True)
class MacroProblem:
    """Macro mesh, constraints, load and excitation, plus the cell discretization."""

    grid: StructuredGrid
    cell: StructuredGrid
    fixed_dofs: np.ndarray
    force: np.ndarray
    omega: float = 0.0
    penalty: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "fixed_dofs", np.unique(np.asarray(self.fixed_dofs, dtype=np.intp)))
        object.__setattr__(self, "force", np.asarray(self.force, dtype=float))
        if self.force.shape != (self.grid.n_dofs,):
            raise ValueError("force vector length must equal the number of macro DOFs")
        if self.fixed_dofs.size == 0:
            raise ValueError("fixed DOF set must be nonempty")

    @property
    def free(self) -> np.ndarray:
        return fem.free_dofs(self.grid.n_dofs, self.fixed_dofs)


def assemble_state(problem: MacroProblem, state: DesignState, d_h: np.ndarray, rho_h: float):
    """Global (K, M) for the current two-scale design with effective cell properties."""
    s = stiffness_scale(state.x_macro, problem.penalty, state.x_min)
    d_mats = s[:, None, None] * d_h
    rhos = state.x_macro * rho_h
    return fem.assemble(problem.grid, d_mats, rhos)


def factorized_dynamic(problem: MacroProblem, state: DesignState, d_h: np.ndarray, rho_h: float):
    k, m = assemble_state(problem, state, d_h, rho_h)
    k_d = fem.dynamic_stiffness(k, m, problem.omega)
    return fem.FactorizedSystem(k_d, problem.free)


def parameter_to_matrices(
    problem: MacroProblem,
    state: DesignState,
    props: EffectiveProperties,
    theta: str,
    theta2: str | None = None,
) -> sp.csc_matrix:
    """Sparse dK_d/dtheta, or the second derivative d2K_d/dtheta dtheta2.

    Chain rule through the effective properties holding the cell strain
    fields fixed; density contributions are linear so all their second
    derivatives vanish.
    """
    wrt = (theta,) if theta2 is None else (theta, theta2)
    dd = props.d_h_derivative(wrt)
    drho = props.rho_h_derivative(wrt)
    s = stiffness_scale(state.x_macro, problem.penalty, state.x_min)
    # derivative "densities" may have any sign, so bypass the physical validation
    k_elems, m_elems = fem.element_matrices_batch(
        s[:, None, None] * dd, state.x_macro * drho, problem.grid.spacing
    )
    k = fem.scatter(problem.grid, k_elems)
    if problem.omega == 0.0 or drho == 0.0:
        return k
    m = fem.scatter(problem.grid, m_elems)
    return fem.dynamic_stiffness(k, m, problem.omega)
