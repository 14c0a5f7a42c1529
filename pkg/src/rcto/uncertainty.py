"""Hybrid interval-random material uncertainty and its propagation.

A type-I hybrid parameter is a normally distributed quantity whose
expectation and standard deviation are known only as closed intervals.  The
worst-case expectation and standard deviation of the mean compliance are
estimated two ways:

* a nested first-order perturbation analysis around the midpoint means
  (one matrix factorization, 1 + 3n backsolves for n parameters), and
* a brute-force nested Monte Carlo oracle (outer loop over interval
  realizations of (mu, sigma), inner loop over normal samples) used for
  verification.

The perturbation estimate combines, per parameter: the displacement
derivative taken along the expectation interval, the same derivative
weighted by the distribution spread, and a second-order term coupling the
two.  Hard sign factors give each term its worst-case (magnitude) sense; a
tanh smoothing of those signs makes the objective differentiable for the
sensitivity analysis.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, SingularSystemError
from .fem import mean_compliance, strain_operators
from .homogenization import EffectiveProperties, homogenize, stiffness_weights
from .materials import PARAMETER_NAMES, TwoPhaseMaterial, voigt_size
from .problem import DesignState, MacroProblem, factorized_dynamic, parameter_to_matrices, stiffness_scale

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Interval:
    """Closed real interval with midpoint/deviation views."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError("interval bounds must be finite")
        if self.lo > self.hi:
            raise ValueError(f"interval bounds out of order: [{self.lo}, {self.hi}]")

    @classmethod
    def exact(cls, value: float) -> "Interval":
        return cls(value, value)

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def deviation(self) -> float:
        return 0.5 * (self.hi - self.lo)

    @property
    def degenerate(self) -> bool:
        return self.lo == self.hi


@dataclass(frozen=True)
class HybridParameter:
    """Normally distributed parameter with interval-valued expectation and std."""

    name: str
    mean: Interval
    std: Interval

    def __post_init__(self):
        if self.name not in PARAMETER_NAMES:
            raise ValueError(f"unknown parameter name {self.name!r} (expected one of {PARAMETER_NAMES})")
        if self.std.lo < 0:
            raise ValueError(f"{self.name}: standard deviation interval must be nonnegative")


class UncertainSet:
    """Ordered, independent hybrid parameters; n drives the 1 + 3n FEA-call count."""

    def __init__(self, parameters=()):
        self.parameters = tuple(parameters)
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in uncertain set")
        if "nu" in names and ("nu1" in names or "nu2" in names):
            raise ValueError("shared 'nu' cannot be combined with split 'nu1'/'nu2'")

    def __len__(self) -> int:
        return len(self.parameters)

    def __iter__(self):
        return iter(self.parameters)

    def __getitem__(self, i):
        return self.parameters[i]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.parameters)

    def mean_midpoints(self) -> np.ndarray:
        return np.array([p.mean.midpoint for p in self.parameters])

    def mean_material(self, base: TwoPhaseMaterial) -> TwoPhaseMaterial:
        """Base material with every declared parameter at its midpoint mean."""
        return base.with_values(self.names, self.mean_midpoints())


@dataclass(frozen=True)
class RobustObjective:
    """Worst-case expectation and standard deviation of the mean compliance."""

    expectation: float
    std: float
    kappa: float

    @property
    def objective(self) -> float:
        return self.expectation + self.kappa * self.std


@dataclass
class IhpaCache:
    """Solution vectors and scalar terms reused by the robust sensitivity analysis."""

    problem: MacroProblem
    state: DesignState
    props: EffectiveProperties
    params: UncertainSet
    u_nominal: np.ndarray
    du_interval: np.ndarray  # (n, ndof) displacement derivative along the mean interval
    du_random: np.ndarray    # (n, ndof) displacement derivative against the random part
    d2u_cross: np.ndarray    # (n, ndof) second-order interval/random coupling
    c_nominal: float
    mean_terms: np.ndarray        # per parameter: F.du_interval * mean deviation
    std_level_terms: np.ndarray   # F.du_random * midpoint sigma
    std_shift_terms: np.ndarray   # F.d2u_cross * midpoint sigma * mean deviation
    std_width_terms: np.ndarray   # F.du_random * sigma deviation
    mean_dev: np.ndarray
    sigma_mid: np.ndarray
    sigma_dev: np.ndarray
    dd_list: list = field(default_factory=list)       # dD_h/dtheta per parameter
    d2d_list: list = field(default_factory=list)      # d2D_h/dtheta2 per parameter
    drho_list: list = field(default_factory=list)
    fea_calls: int = 0

    def all_terms(self) -> np.ndarray:
        return np.concatenate(
            [self.mean_terms, self.std_level_terms, self.std_shift_terms, self.std_width_terms]
        )

    def hard_signs(self) -> dict[str, np.ndarray]:
        """Worst-case sign factor of every perturbation term, per parameter."""
        return {
            "mean": np.sign(self.mean_terms),
            "std_level": np.sign(self.std_level_terms),
            "std_shift": np.sign(self.std_shift_terms),
            "std_width": np.sign(self.std_width_terms),
        }

    def hard_objective(self, kappa: float) -> RobustObjective:
        """Worst-case combination with hard signs (each term at its full magnitude)."""
        expectation = self.c_nominal + float(np.sum(np.abs(self.mean_terms)))
        std = float(
            np.sum(np.abs(self.std_level_terms))
            + np.sum(np.abs(self.std_shift_terms))
            + np.sum(np.abs(self.std_width_terms))
        )
        return RobustObjective(expectation, std, kappa)

    def smooth_objective(self, kappa: float, beta: float) -> RobustObjective:
        """Same combination with tanh(beta f) replacing sign(f); differentiable in the design."""
        smooth = lambda f: float(np.sum(f * np.tanh(beta * f)))
        expectation = self.c_nominal + smooth(self.mean_terms)
        std = smooth(self.std_level_terms) + smooth(self.std_shift_terms) + smooth(self.std_width_terms)
        return RobustObjective(expectation, std, kappa)


def ihpa_evaluate(
    problem: MacroProblem,
    state: DesignState,
    base_material: TwoPhaseMaterial,
    params: UncertainSet,
    kappa: float = 1.0,
    props: EffectiveProperties | None = None,
) -> tuple[RobustObjective, IhpaCache]:
    """Hybrid perturbation estimate of the worst-case mean-compliance statistics.

    Performs exactly 1 + 3n linear-system applications against one shared
    factorization of the dynamic stiffness at the midpoint-mean material.
    With every interval degenerate and every sigma zero this reduces to the
    deterministic compliance (and a zero standard deviation).
    """
    n = len(params)
    material = params.mean_material(base_material)
    if props is None:
        props = homogenize(problem.cell, state.x_micro, material, problem.penalty)
    elif props.material is not material:
        # caller-provided properties must already be at the midpoint means
        if not _same_material(props.material, material):
            raise ValueError("supplied effective properties were not computed at the midpoint means")

    system = factorized_dynamic(problem, state, props.d_h, props.rho_h)
    f = problem.force
    u0 = system.solve(f)
    c0 = mean_compliance(f, u0)

    ndof = problem.grid.n_dofs
    du_interval = np.zeros((n, ndof))
    du_random = np.zeros((n, ndof))
    d2u_cross = np.zeros((n, ndof))
    dd_list, d2d_list, drho_list = [], [], []

    for j, par in enumerate(params):
        g_j = parameter_to_matrices(problem, state, props, par.name)
        h_j = parameter_to_matrices(problem, state, props, par.name, par.name)
        du_interval[j] = system.solve(-(g_j @ u0))
        du_random[j] = system.solve(-(g_j @ u0))
        d2u_cross[j] = system.solve(-(2.0 * (g_j @ du_random[j]) + h_j @ u0))
        dd_list.append(props.d_h_derivative((par.name,)))
        d2d_list.append(props.d_h_derivative((par.name, par.name)))
        drho_list.append(props.rho_h_derivative((par.name,)))

    mean_dev = np.array([p.mean.deviation for p in params])
    sigma_mid = np.array([p.std.midpoint for p in params])
    sigma_dev = np.array([p.std.deviation for p in params])
    f_du_int = du_interval @ f
    f_du_rand = du_random @ f
    f_d2u = d2u_cross @ f

    cache = IhpaCache(
        problem=problem,
        state=state,
        props=props,
        params=params,
        u_nominal=u0,
        du_interval=du_interval,
        du_random=du_random,
        d2u_cross=d2u_cross,
        c_nominal=c0,
        mean_terms=f_du_int * mean_dev,
        std_level_terms=f_du_rand * sigma_mid,
        std_shift_terms=f_d2u * sigma_mid * mean_dev,
        std_width_terms=f_du_rand * sigma_dev,
        mean_dev=mean_dev,
        sigma_mid=sigma_mid,
        sigma_dev=sigma_dev,
        dd_list=dd_list,
        d2d_list=d2d_list,
        drho_list=drho_list,
        fea_calls=system.calls,
    )
    return cache.hard_objective(kappa), cache


def _same_material(a: TwoPhaseMaterial, b: TwoPhaseMaterial) -> bool:
    return all(
        getattr(pa, f) == getattr(pb, f)
        for pa, pb in ((a.phase1, b.phase1), (a.phase2, b.phase2))
        for f in ("youngs", "poisson", "density")
    )


def select_beta(cache: IhpaCache, scale: float = 10.0, lo: float = 1.0, hi: float = 1e4) -> float:
    """Sign-smoothing sharpness: steep enough that typical terms saturate.

    beta = scale / median(|term|) over the nonzero sign arguments, clamped.
    """
    terms = np.abs(cache.all_terms())
    terms = terms[terms > 0]
    if terms.size == 0:
        return lo
    return float(np.clip(scale / np.median(terms), lo, hi))


# ---------------------------------------------------------------------------
# Nested Monte Carlo oracle
# ---------------------------------------------------------------------------

_CORNER_LIMIT = 4096


@dataclass(frozen=True)
class McsResult:
    """Worst-case sample statistics over the interval grid."""

    expectation: float
    std: float
    n_outer: int
    n_random: int
    fea_calls: int
    resampled: int

    def objective(self, kappa: float) -> float:
        return self.expectation + kappa * self.std


_DENSE_DOF_LIMIT = 1600  # beyond this the dense batched path would not fit in memory


class BatchComplianceEvaluator:
    """Vectorized plain-FE compliance evaluation over batches of material samples.

    The mesh, design and load are fixed; every sample performs an honest
    homogenization (batched dense periodic cell solve) followed by an honest
    macro solve.  No perturbation shortcuts: this is the oracle path.  Above
    a size limit the dense batching is replaced by per-sample sparse solves
    (same arithmetic, much slower).
    """

    def __init__(self, problem: MacroProblem, state: DesignState, base_material: TwoPhaseMaterial):
        self.problem = problem
        self.base = base_material
        self.state = state.copy()
        self.ncomp = voigt_size(problem.grid.dim)
        n_red = problem.grid.dim * problem.cell.n_elems
        self.batched = n_red <= _DENSE_DOF_LIMIT and problem.grid.n_dofs <= _DENSE_DOF_LIMIT
        if not self.batched:
            logger.info(
                "Monte Carlo evaluator falling back to per-sample sparse solves "
                "(problem too large for the dense batched path)"
            )
            return
        self._setup_cell(problem.cell, state)
        self._setup_macro(problem, state)

    def _setup_cell(self, cell, state):
        from .homogenization import _cell_elem_dofs

        dim = cell.dim
        b, _, w = strain_operators(cell.spacing)
        dofs, n_red = _cell_elem_dofs(cell)
        free = np.arange(dim, n_red)
        self._cell_free = free
        eta = stiffness_weights(state.x_micro, self.problem.penalty)
        from .materials import _PARTS

        a0, a1 = _PARTS[dim]
        self._a_parts = (a0, a1)
        k0 = np.einsum("q,qce,cd,qdf->ef", w, b, a0, b)
        k1 = np.einsum("q,qce,cd,qdf->ef", w, b, a1, b)
        # four stiffness/load basis blocks: {phase-1, phase-2} x {A0, A1}
        kb = np.zeros((4, n_red, n_red))
        fb = np.zeros((4, n_red, self.ncomp))
        s0 = np.einsum("q,qce->ec", w, b) @ a0
        s1 = np.einsum("q,qce->ec", w, b) @ a1
        ndof_e = dofs.shape[1]
        for (gi, ke, se, wts) in (
            (0, k0, s0, eta), (1, k1, s1, eta),
            (2, k0, s0, 1.0 - eta), (3, k1, s1, 1.0 - eta),
        ):
            data = wts[:, None, None] * ke
            np.add.at(kb[gi], (np.repeat(dofs, ndof_e, axis=1).ravel(), np.tile(dofs, (1, ndof_e)).ravel()), data.ravel())
            np.add.at(fb[gi], dofs.ravel(), (wts[:, None, None] * se[None]).reshape(-1, self.ncomp))
        self._cell_kb = kb[:, free[:, None], free[None, :]].reshape(4, -1)
        self._cell_fb = fb[:, free, :].reshape(4, -1)
        self._cell_volume = cell.volume
        # phase volumes for the average-stiffness part of the energy identity
        self._vol_eta = float(np.sum(eta) * cell.elem_volume)
        self._vol_ieta = float(np.sum(1.0 - eta) * cell.elem_volume)

    def _setup_macro(self, problem, state):
        grid = problem.grid
        b, nmat, w = strain_operators(grid.spacing)
        s = stiffness_scale(state.x_macro, problem.penalty, state.x_min)
        m_unit = np.einsum("q,qde,qdf->ef", w, nmat, nmat)
        free = problem.free
        nf = free.size
        pairs = [(c, d) for c in range(self.ncomp) for d in range(c, self.ncomp)]
        self._pairs = pairs
        kbas = np.zeros((len(pairs), grid.n_dofs, grid.n_dofs))
        dofs = grid.elem_dofs
        ndof_e = dofs.shape[1]
        rows = np.repeat(dofs, ndof_e, axis=1).ravel()
        cols = np.tile(dofs, (1, ndof_e)).ravel()
        for ip, (c, d) in enumerate(pairs):
            e_cd = np.zeros((self.ncomp, self.ncomp))
            e_cd[c, d] = 1.0
            e_cd[d, c] = 1.0
            ke = np.einsum("q,qce,cd,qdf->ef", w, b, e_cd, b)
            data = s[:, None, None] * ke
            np.add.at(kbas[ip], (rows, cols), data.ravel())
        mbas = np.zeros((grid.n_dofs, grid.n_dofs))
        np.add.at(mbas, (rows, cols), (state.x_macro[:, None, None] * m_unit).ravel())
        self._macro_kbas = kbas[:, free[:, None], free[None, :]].reshape(len(pairs), -1)
        self._macro_mbas = mbas[free[:, None], free[None, :]].ravel()
        self._macro_free = free
        self._f_free = problem.force[free]
        self._nf = nf
        self._phase1_volume_fraction = float(
            np.sum(state.x_micro) * problem.cell.elem_volume / problem.cell.volume
        )

    def base_values(self) -> dict[str, float]:
        return {
            "e1": self.base.phase1.youngs, "nu1": self.base.phase1.poisson,
            "rho1": self.base.phase1.density, "e2": self.base.phase2.youngs,
            "nu2": self.base.phase2.poisson, "rho2": self.base.phase2.density,
        }

    def _expand(self, names, values):
        base = self.base_values()
        cols = {k: np.full(values.shape[0], v) for k, v in base.items()}
        for j, name in enumerate(names):
            if name == "nu":
                cols["nu1"] = values[:, j]
                cols["nu2"] = values[:, j]
            else:
                cols[name] = values[:, j]
        return cols

    def compliance(self, names: tuple[str, ...], values: np.ndarray) -> np.ndarray:
        """Mean compliance for each parameter sample row (honest FE re-solves)."""
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if not self.batched:
            return self._compliance_plain(names, values)
        cols = self._expand(names, values)
        nb = values.shape[0]
        dim = self.problem.grid.dim

        from .materials import _prefactor_derivs

        pre1 = np.array([_prefactor_derivs(nu, dim) for nu in cols["nu1"]])
        pre2 = np.array([_prefactor_derivs(nu, dim) for nu in cols["nu2"]])
        coefs = np.column_stack([
            cols["e1"] * pre1[:, 0, 0], cols["e1"] * pre1[:, 1, 0],
            cols["e2"] * pre2[:, 0, 0], cols["e2"] * pre2[:, 1, 0],
        ])

        nfree_c = self._cell_free.size
        k_cell = (coefs @ self._cell_kb).reshape(nb, nfree_c, nfree_c)
        f_cell = (coefs @ self._cell_fb).reshape(nb, nfree_c, self.ncomp)
        try:
            u_cell = np.linalg.solve(k_cell, f_cell)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"singular cell system in a Monte Carlo sample: {exc}") from exc
        resid = np.abs(np.einsum("bij,bjr->bir", k_cell, u_cell) - f_cell).max()
        fscale = np.abs(f_cell).max()
        if not np.isfinite(resid) or resid > 1e-7 * max(fscale, 1e-30):
            raise SingularSystemError("cell solve failed the residual contract in a Monte Carlo sample")

        # energy identity: D_h = <D> - u.f / |Y| (u solves the cell problem)
        a0, a1 = self._a_parts
        avg0 = coefs[:, 0] * self._vol_eta + coefs[:, 2] * self._vol_ieta
        avg1 = coefs[:, 1] * self._vol_eta + coefs[:, 3] * self._vol_ieta
        d_avg = avg0[:, None, None] * a0 + avg1[:, None, None] * a1
        uf = np.einsum("bir,bic->brc", u_cell, f_cell)
        d_h = (d_avg - uf) / self._cell_volume
        d_h = 0.5 * (d_h + d_h.transpose(0, 2, 1))
        rho_h = cols["rho2"] + (cols["rho1"] - cols["rho2"]) * self._phase1_volume_fraction

        d_cols = np.stack([d_h[:, c, d] for (c, d) in self._pairs], axis=1)
        k_macro = (d_cols @ self._macro_kbas).reshape(nb, self._nf, self._nf)
        if self.problem.omega != 0.0:
            k_macro -= (self.problem.omega**2 * rho_h)[:, None, None] * self._macro_mbas.reshape(self._nf, self._nf)
        rhs = np.repeat(self._f_free[None, :, None], nb, axis=0)
        try:
            u = np.linalg.solve(k_macro, rhs)[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"singular macro system in a Monte Carlo sample: {exc}") from exc
        resid = np.abs(np.einsum("bij,bj->bi", k_macro, u) - self._f_free).max()
        if not np.isfinite(resid) or resid > 1e-7 * max(np.abs(self._f_free).max(), 1e-30):
            raise SingularSystemError("macro solve failed the residual contract in a Monte Carlo sample")
        return u @ self._f_free

    def _compliance_plain(self, names, values) -> np.ndarray:
        from .problem import factorized_dynamic

        out = np.empty(values.shape[0])
        for b, row in enumerate(values):
            material = self.base.with_values(names, row)
            props = homogenize(self.problem.cell, self.state.x_micro, material, self.problem.penalty)
            system = factorized_dynamic(self.problem, self.state, props.d_h, props.rho_h)
            out[b] = mean_compliance(self.problem.force, system.solve(self.problem.force))
        return out


def _interval_corners(params: UncertainSet) -> np.ndarray | None:
    """Deduplicated corner grid of all (mean, std) intervals, or None above the limit."""
    levels = []
    count = 1
    for p in params:
        for iv in (p.mean, p.std):
            vals = (iv.lo,) if iv.degenerate else (iv.lo, iv.hi)
            levels.append(vals)
            count *= len(vals)
            if count > _CORNER_LIMIT:
                return None
    if not levels:
        return None
    return np.array(list(itertools.product(*levels)))


def _latin_hypercube(rng: np.random.Generator, n_points: int, lows, highs) -> np.ndarray:
    lows = np.asarray(lows, dtype=float)
    highs = np.asarray(highs, dtype=float)
    dims = lows.size
    u = np.empty((n_points, dims))
    for d in range(dims):
        u[:, d] = (rng.permutation(n_points) + rng.random(n_points)) / n_points
    return lows + u * (highs - lows)


def _valid_rows(names, values) -> np.ndarray:
    ok = np.ones(values.shape[0], dtype=bool)
    for j, name in enumerate(names):
        col = values[:, j]
        if name.startswith("e") or name.startswith("rho"):
            ok &= col > 0
        else:  # Poisson ratio
            ok &= (col > -0.99) & (col < 0.499)
    return ok


def mcs_evaluate(
    problem: MacroProblem,
    state: DesignState,
    base_material: TwoPhaseMaterial,
    params: UncertainSet,
    n_interval: int,
    n_random: int,
    seed: int,
) -> McsResult:
    """Worst-case sample mean and std of compliance over the interval grid.

    The outer loop visits every deduplicated (mu, sigma) box corner (when the
    corner count is tractable) plus n_interval Latin hypercube points; the
    inner loop draws n_random normal samples per point.  Non-physical draws
    (negative modulus or density) are redrawn and counted.  Deterministic for
    a fixed seed; reductions run in a fixed order.
    """
    if n_interval < 2 or n_random < 2:
        raise ValueError("n_interval and n_random must both be at least 2")
    if len(params) == 0:
        raise ValueError("mcs_evaluate needs at least one hybrid parameter")
    rng = np.random.default_rng(seed)
    names = params.names
    lows = [b for p in params for b in (p.mean.lo, p.std.lo)]
    highs = [b for p in params for b in (p.mean.hi, p.std.hi)]
    outer = _latin_hypercube(rng, n_interval, lows, highs)
    corners = _interval_corners(params)
    if corners is not None:
        outer = np.vstack([corners, outer])

    evaluator = BatchComplianceEvaluator(problem, state, base_material)
    n = len(params)
    best_mean = -np.inf
    best_std = -np.inf
    resampled = 0
    calls = 0
    for row in outer:
        mu = row[0::2]
        sigma = row[1::2]
        z = rng.standard_normal((n_random, n))
        thetas = mu + sigma * z
        for _ in range(100):
            bad = ~_valid_rows(names, thetas)
            nbad = int(bad.sum())
            if nbad == 0:
                break
            resampled += nbad
            thetas[bad] = mu + sigma * rng.standard_normal((nbad, n))
        else:
            raise NumericalError(
                "could not draw physical material samples after 100 redraw rounds; "
                "the sigma intervals are too wide for unbounded normal sampling"
            )
        c = evaluator.compliance(names, thetas)
        calls += n_random
        best_mean = max(best_mean, float(np.mean(c)))
        best_std = max(best_std, float(np.std(c, ddof=1)))
    if resampled:
        logger.info("Monte Carlo resampled %d non-physical draws", resampled)
    return McsResult(
        expectation=best_mean,
        std=best_std,
        n_outer=outer.shape[0],
        n_random=n_random,
        fea_calls=calls,
        resampled=resampled,
    )
