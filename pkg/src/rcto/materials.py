"""Isotropic two-phase material model and analytic parameter derivatives.

The elasticity matrix of an isotropic phase factors as D(E, nu) = E * C(nu)
with C(nu) = u(nu)*A0 + nu*u(nu)*A1 for constant matrices A0, A1 (plane
stress in 2D, full 3D isotropy in Voigt order xx, yy, zz, yz, xz, xy with
engineering shear strains).  That factorization gives closed-form first and
second derivatives with respect to E and nu, which the perturbation analysis
consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Canonical uncertain-parameter names.  "nu" is the Poisson ratio shared by
# both phases; "nu1"/"nu2" are the split per-phase alternatives.
PARAMETER_NAMES = ("e1", "e2", "nu", "nu1", "nu2", "rho1", "rho2")


def _plane_stress_parts():
    a0 = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.5]])
    a1 = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -0.5]])
    return a0, a1


def _solid_parts():
    a0 = np.zeros((6, 6))
    a0[:3, :3] = np.eye(3)
    a0[3:, 3:] = 0.5 * np.eye(3)
    a1 = np.zeros((6, 6))
    a1[:3, :3] = np.ones((3, 3)) - 2.0 * np.eye(3)
    a1[3:, 3:] = -np.eye(3)
    return a0, a1


_PARTS = {2: _plane_stress_parts(), 3: _solid_parts()}


def _prefactor_derivs(nu: float, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (u, u', u'') and (nu*u, (nu*u)', (nu*u)'') for the D = E*(u*A0 + nu*u*A1) split."""
    if dim == 2:
        u = 1.0 / (1.0 - nu * nu)
        du = 2.0 * nu * u * u
        d2u = 2.0 * u * u + 8.0 * nu * nu * u**3
    elif dim == 3:
        d = (1.0 + nu) * (1.0 - 2.0 * nu)
        u = 1.0 / d
        du = (1.0 + 4.0 * nu) * u * u
        d2u = 4.0 * u * u + 2.0 * (1.0 + 4.0 * nu) ** 2 * u**3
    else:
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    v = nu * u
    dv = u + nu * du
    d2v = 2.0 * du + nu * d2u
    return np.array([u, du, d2u]), np.array([v, dv, d2v])


def elasticity_matrix(e: float, nu: float, dim: int, de: int = 0, dnu: int = 0) -> np.ndarray:
    """Isotropic elasticity matrix, or its mixed partial d^(de+dnu) D / dE^de dnu^dnu.

    de in {0, 1} (D is linear in E, higher orders vanish), dnu in {0, 1, 2}.
    """
    if de not in (0, 1) or dnu not in (0, 1, 2):
        raise ValueError(f"unsupported derivative order (de={de}, dnu={dnu})")
    a0, a1 = _PARTS[dim] if dim in _PARTS else (None, None)
    if a0 is None:
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    uvals, vvals = _prefactor_derivs(nu, dim)
    shape = uvals[dnu] * a0 + vvals[dnu] * a1
    return shape if de == 1 else e * shape


def voigt_size(dim: int) -> int:
    return 3 if dim == 2 else 6


@dataclass(frozen=True)
class Phase:
    """One base material: Young's modulus (MPa), Poisson ratio, density (tonne/mm^3)."""

    youngs: float
    poisson: float
    density: float

    def elasticity(self, dim: int) -> np.ndarray:
        return elasticity_matrix(self.youngs, self.poisson, dim)


@dataclass(frozen=True)
class TwoPhaseMaterial:
    """The two base phases of the composite unit cell (phase 1 stiff/heavy, phase 2 soft/light)."""

    phase1: Phase
    phase2: Phase

    def phase(self, index: int) -> Phase:
        return self.phase1 if index == 1 else self.phase2

    def d_derivative(self, phase_index: int, dim: int, wrt: tuple[str, ...]) -> np.ndarray:
        """Partial derivative of the phase elasticity matrix w.r.t. a multiset of parameter names.

        wrt is a tuple of up to two names from PARAMETER_NAMES; an empty tuple
        returns the matrix itself.  Parameters that do not touch this phase
        yield zero.
        """
        ph = self.phase(phase_index)
        de = 0
        dnu = 0
        for name in wrt:
            if name not in PARAMETER_NAMES:
                raise ValueError(f"unknown parameter {name!r}")
            if name == f"e{phase_index}":
                de += 1
            elif name == "nu" or name == f"nu{phase_index}":
                dnu += 1
            elif name.startswith("rho") or name.startswith("e") or name.startswith("nu"):
                # parameter of the other phase, or a density: no effect here
                return np.zeros((voigt_size(dim), voigt_size(dim)))
        if de > 1:
            return np.zeros((voigt_size(dim), voigt_size(dim)))
        return elasticity_matrix(ph.youngs, ph.poisson, dim, de=de, dnu=dnu)

    def rho_derivative(self, phase_index: int, wrt: tuple[str, ...]) -> float:
        """Partial derivative of the phase density (density is linear in rho1/rho2)."""
        for name in wrt:
            if name not in PARAMETER_NAMES:
                raise ValueError(f"unknown parameter {name!r}")
        if len(wrt) == 0:
            return self.phase(phase_index).density
        if len(wrt) == 1 and wrt[0] == f"rho{phase_index}":
            return 1.0
        return 0.0

    def with_values(self, names: tuple[str, ...], values) -> "TwoPhaseMaterial":
        """New material with the named base parameters replaced by the given values."""
        fields = {
            "e1": self.phase1.youngs,
            "nu1": self.phase1.poisson,
            "rho1": self.phase1.density,
            "e2": self.phase2.youngs,
            "nu2": self.phase2.poisson,
            "rho2": self.phase2.density,
        }
        for name, value in zip(names, values):
            if name == "nu":
                fields["nu1"] = value
                fields["nu2"] = value
            elif name in fields:
                fields[name] = value
            else:
                raise ValueError(f"unknown parameter {name!r}")
        return TwoPhaseMaterial(
            Phase(fields["e1"], fields["nu1"], fields["rho1"]),
            Phase(fields["e2"], fields["nu2"], fields["rho2"]),
        )
