"""Structured-mesh finite element kernel.

Bilinear quads (2D) / trilinear hexes (3D) on a regular grid, full 2-point
Gauss integration per axis, consistent mass, sparse assembly, and LU-backed
solves of the dynamic stiffness K - omega^2 M.  Boundary conditions are
enforced by row/column elimination.  All element matrices are exact for
constant coefficients under the 2-point rule.

Unit system: N, mm, tonne, s (so moduli in MPa, densities in tonne/mm^3,
frequencies converted to rad/s by the caller).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import SingularSystemError

RESIDUAL_TOL = 1e-9


@dataclass(frozen=True)
class StructuredGrid:
    """Regular grid of square/cubic elements; node and element ids run x-fastest."""

    shape: tuple[int, ...]
    spacing: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing", tuple(float(h) for h in self.spacing))
        if self.dim not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got shape {self.shape}")
        if len(self.spacing) != self.dim:
            raise ValueError("spacing must have one entry per axis")
        if any(n < 1 for n in self.shape) or any(h <= 0 for h in self.spacing):
            raise ValueError("element counts must be >= 1 and spacings > 0")

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def n_elems(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nodes_shape(self) -> tuple[int, ...]:
        return tuple(n + 1 for n in self.shape)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.nodes_shape))

    @property
    def n_dofs(self) -> int:
        return self.dim * self.n_nodes

    @property
    def elem_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return self.elem_volume * self.n_elems

    def node_id(self, idx) -> np.ndarray:
        """Node index (i[,j[,k]]) -> flat node id, x fastest."""
        idx = np.asarray(idx)
        nshape = self.nodes_shape
        flat = idx[..., 0]
        stride = 1
        for ax in range(1, self.dim):
            stride *= nshape[ax - 1]
            flat = flat + idx[..., ax] * stride
        return flat

    @cached_property
    def elem_node_ids(self) -> np.ndarray:
        """(n_elems, 4 or 8) node ids in the standard counterclockwise ordering."""
        axes = [np.arange(n) for n in self.shape]
        grids = np.meshgrid(*axes, indexing="ij")
        base = np.stack([g.ravel(order="F") for g in grids], axis=-1)
        corner_offsets = _corner_offsets(self.dim)
        corners = base[:, None, :] + corner_offsets[None, :, :]
        return self.node_id(corners)

    @cached_property
    def elem_dofs(self) -> np.ndarray:
        nodes = self.elem_node_ids
        dofs = self.dim * nodes[:, :, None] + np.arange(self.dim)[None, None, :]
        return dofs.reshape(self.n_elems, -1)

    @cached_property
    def centroids(self) -> np.ndarray:
        axes = [(np.arange(n) + 0.5) * h for n, h in zip(self.shape, self.spacing)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel(order="F") for g in grids], axis=-1)


def _corner_offsets(dim: int) -> np.ndarray:
    if dim == 2:
        return np.array([[0, 0], [1, 0], [1, 1], [0, 1]])
    return np.array(
        [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
         [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
    )


@lru_cache(maxsize=32)
def strain_operators(spacing: tuple[float, ...]):
    """Gauss-point operators for one rectangular element.

    Returns (b, n, w): strain-displacement matrices b (nq, ncomp, ndof),
    displacement interpolation n (nq, dim, ndof) and integration weights w
    (nq,) that already include the Jacobian, so sum(w) = element volume.
    """
    dim = len(spacing)
    corners = _corner_offsets(dim) * 2.0 - 1.0
    g = 1.0 / np.sqrt(3.0)
    points = np.array(list(itertools.product(*[(-g, g)] * dim)))
    nq = len(points)
    n_nodes = corners.shape[0]
    ndof = dim * n_nodes
    ncomp = 3 if dim == 2 else 6
    detj = np.prod(spacing) / 2.0**dim

    b = np.zeros((nq, ncomp, ndof))
    n = np.zeros((nq, dim, ndof))
    for q, xi in enumerate(points):
        shape = np.prod(1.0 + corners * xi, axis=1) / 2.0**dim
        # dN/dx_a = (corner_a / 2) * prod_{b != a}(1 + corner_b xi_b) / 2^(d-1) * (2 / h_a)
        grad = np.zeros((dim, n_nodes))
        for a in range(dim):
            others = [bx for bx in range(dim) if bx != a]
            term = corners[:, a] / 2.0**dim
            for bx in others:
                term = term * (1.0 + corners[:, bx] * xi[bx])
            grad[a] = term * (2.0 / spacing[a])
        for a in range(dim):
            n[q, a, a::dim] = shape
        if dim == 2:
            b[q, 0, 0::2] = grad[0]
            b[q, 1, 1::2] = grad[1]
            b[q, 2, 0::2] = grad[1]
            b[q, 2, 1::2] = grad[0]
        else:
            b[q, 0, 0::3] = grad[0]
            b[q, 1, 1::3] = grad[1]
            b[q, 2, 2::3] = grad[2]
            b[q, 3, 1::3] = grad[2]  # yz
            b[q, 3, 2::3] = grad[1]
            b[q, 4, 0::3] = grad[2]  # xz
            b[q, 4, 2::3] = grad[0]
            b[q, 5, 0::3] = grad[1]  # xy
            b[q, 5, 1::3] = grad[0]
    w = np.full(nq, detj)
    b.setflags(write=False)
    n.setflags(write=False)
    w.setflags(write=False)
    return b, n, w


def element_stiffness(d: np.ndarray, spacing: tuple[float, ...]) -> np.ndarray:
    """Elasticity-weighted stiffness integral of B^T D B over one element."""
    d = np.asarray(d, dtype=float)
    b, _, w = strain_operators(tuple(spacing))
    if d.shape != (b.shape[1], b.shape[1]):
        raise ValueError(f"elasticity matrix shape {d.shape} does not match {len(spacing)}D element")
    if not np.allclose(d, d.T, rtol=1e-12, atol=1e-12 * max(1.0, float(np.abs(d).max()))):
        raise ValueError("elasticity matrix must be symmetric")
    k = np.einsum("q,qce,cd,qdf->ef", w, b, d, b)
    return 0.5 * (k + k.T)


def element_mass(rho: float, spacing: tuple[float, ...]) -> np.ndarray:
    """Consistent mass integral of rho N^T N over one element."""
    if rho < 0:
        raise ValueError(f"density must be nonnegative, got {rho}")
    _, n, w = strain_operators(tuple(spacing))
    m = rho * np.einsum("q,qde,qdf->ef", w, n, n)
    return 0.5 * (m + m.T)


def element_matrices_batch(d_mats: np.ndarray, rhos: np.ndarray, spacing) -> tuple[np.ndarray, np.ndarray]:
    """Per-element (k_e, m_e) stacks for per-element elasticity matrices and densities."""
    b, n, w = strain_operators(tuple(spacing))
    k = np.einsum("q,qce,ncd,qdf->nef", w, b, d_mats, b)
    k = 0.5 * (k + k.transpose(0, 2, 1))
    m_unit = np.einsum("q,qde,qdf->ef", w, n, n)
    m = rhos[:, None, None] * m_unit
    return k, m


def assemble(grid: StructuredGrid, d_mats, rhos) -> tuple[sp.csc_matrix, sp.csc_matrix]:
    """Assemble global (K, M) from one elasticity matrix and density per element.

    d_mats may be a single (ncomp, ncomp) matrix or a (n_elems, ncomp, ncomp)
    stack; rhos a scalar or (n_elems,) vector.
    """
    ncomp = 3 if grid.dim == 2 else 6
    d_mats = np.asarray(d_mats, dtype=float)
    if d_mats.ndim == 2:
        d_mats = np.broadcast_to(d_mats, (grid.n_elems, ncomp, ncomp))
    if d_mats.shape != (grid.n_elems, ncomp, ncomp):
        raise ValueError(f"expected per-element D of shape {(grid.n_elems, ncomp, ncomp)}, got {d_mats.shape}")
    rhos = np.broadcast_to(np.asarray(rhos, dtype=float), (grid.n_elems,))
    if np.any(rhos < 0):
        raise ValueError("densities must be nonnegative")
    k_all, m_all = element_matrices_batch(d_mats, rhos, grid.spacing)
    return _symmetrized(scatter(grid, k_all)), _symmetrized(scatter(grid, m_all))


def _symmetrized(mat: sp.csc_matrix) -> sp.csc_matrix:
    """Exact symmetry: duplicate-entry summation order is not associative-safe."""
    return ((mat + mat.T) * 0.5).tocsc()


def scatter(grid: StructuredGrid, elem_mats: np.ndarray) -> sp.csc_matrix:
    """Scatter a (n_elems, ndof_e, ndof_e) stack into the global sparse matrix."""
    dofs = grid.elem_dofs
    ndof_e = dofs.shape[1]
    rows = np.repeat(dofs, ndof_e, axis=1).ravel()
    cols = np.tile(dofs, (1, ndof_e)).ravel()
    mat = sp.coo_matrix((elem_mats.ravel(), (rows, cols)), shape=(grid.n_dofs, grid.n_dofs))
    return mat.tocsc()


def dynamic_stiffness(k: sp.spmatrix, m: sp.spmatrix, omega: float) -> sp.csc_matrix:
    """K - omega^2 M; reduces to K exactly for omega = 0."""
    if omega == 0.0:
        return k.tocsc()
    return (k - omega**2 * m).tocsc()


class FactorizedSystem:
    """LU factorization of a constrained dynamic stiffness, counting backsolves.

    One factorization is shared by every right-hand side; the ``calls``
    counter is the number of linear-system applications (the quantity the
    uncertainty analysis reports as FEA calls).
    """

    def __init__(self, k_d: sp.spmatrix, free: np.ndarray, n_dofs: int | None = None):
        k_d = k_d.tocsc()
        self.n_dofs = k_d.shape[0] if n_dofs is None else n_dofs
        self.free = np.asarray(free, dtype=np.intp)
        if self.free.size == 0 or self.free.size >= k_d.shape[0]:
            raise ValueError("need at least one constrained DOF and at least one free DOF")
        self._kff = k_d[self.free][:, self.free].tocsc()
        try:
            self._lu = splu(self._kff)
        except RuntimeError as exc:  # SuperLU signals exact singularity this way
            raise SingularSystemError(
                f"dynamic stiffness is singular (resonance or unconstrained rigid modes): {exc}"
            ) from exc
        self._calls = 0

    @property
    def calls(self) -> int:
        return self._calls

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve K_d u = rhs (full-length rhs); counts as one FEA call."""
        rhs = np.asarray(rhs, dtype=float)
        f = rhs[self.free]
        self._calls += 1
        norm_f = np.linalg.norm(f)
        u = np.zeros(self.n_dofs)
        if norm_f == 0.0:
            return u
        x = self._lu.solve(f)
        residual = np.linalg.norm(self._kff @ x - f)
        if not np.isfinite(residual) or residual > RESIDUAL_TOL * norm_f:
            raise SingularSystemError(
                "linear solve failed the residual contract "
                f"(|r|/|f| = {residual / norm_f:.3e} > {RESIDUAL_TOL}); "
                "the excitation frequency may sit at a resonance"
            )
        u[self.free] = x
        return u


def free_dofs(n_dofs: int, fixed: np.ndarray) -> np.ndarray:
    fixed = np.unique(np.asarray(fixed, dtype=np.intp))
    if fixed.size == 0:
        raise ValueError("fixed DOF set must be nonempty (rigid-body modes)")
    return np.setdiff1d(np.arange(n_dofs), fixed, assume_unique=True)


def solve_system(k, m, omega: float, f: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    """One-shot constrained solve of (K - omega^2 M) u = f."""
    op = FactorizedSystem(dynamic_stiffness(k, m, omega), free_dofs(k.shape[0], fixed))
    return op.solve(f)


def mean_compliance(f: np.ndarray, u: np.ndarray) -> float:
    """Mean compliance F^T U (static or harmonic amplitude form)."""
    return float(np.dot(f, u))
