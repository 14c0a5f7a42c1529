"""Concurrent discrete evolutionary optimization of both scales.

One iteration: homogenize the cell, evaluate the (deterministic or robust)
objective, build mass-normalized filtered sensitivity numbers, rank the
merged macro/micro candidates, and flip design variables against a single
total-weight budget that walks toward the target fraction by a fixed
evolutionary ratio.  Convergence compares the objective sum over the last
window against the preceding window, once the weight target is met.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleTargetError
from .fem import mean_compliance
from .homogenization import EffectiveProperties, effective_density, homogenize, seed_cell
from .materials import TwoPhaseMaterial
from .problem import DesignState, MacroProblem, X_MIN_DEFAULT, factorized_dynamic
from .sensitivity import (
    SensitivityField,
    deterministic_sensitivity,
    history_average,
    normalize,
    robust_sensitivity,
    SensitivityFilter,
)
from .uncertainty import RobustObjective, UncertainSet, ihpa_evaluate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """Evolution parameters of the discrete update."""

    target_weight_fraction: float
    evolution_ratio: float = 0.02
    kappa: float = 1.0
    convergence_tol: float = 1e-3
    history_window: int = 5
    flip_cap: float | None = 0.05
    max_iterations: int = 500
    beta: float | None = None  # sign-smoothing sharpness; None picks it per evaluation

    def __post_init__(self):
        if not 0.0 < self.target_weight_fraction <= 1.0:
            raise ValueError("target weight fraction must be in (0, 1]")
        if self.evolution_ratio <= 0.0:
            raise ValueError("evolutionary ratio must be positive")


def update_weight_target(current: float, target: float, evolution_ratio: float) -> float:
    """Next weight fraction: move by (1 +/- ER) toward the target, clamped on overshoot."""
    if current > target:
        return max(current * (1.0 - evolution_ratio), target)
    if current < target:
        return min(current * (1.0 + evolution_ratio), target)
    return target


def reference_mass(problem: MacroProblem, material: TwoPhaseMaterial) -> float:
    """Phase-1-full design mass, the denominator of every weight fraction."""
    return problem.grid.volume * material.phase1.density


def total_mass(problem: MacroProblem, state: DesignState, material: TwoPhaseMaterial) -> float:
    rho_h = effective_density(state.x_micro, material, problem.cell)
    return float(np.sum(state.x_macro) * problem.grid.elem_volume * rho_h)


def mass_quantum(problem: MacroProblem, state: DesignState, material: TwoPhaseMaterial) -> float:
    """Largest single-flip mass change at the given state."""
    rho_h = effective_density(state.x_micro, material, problem.cell)
    macro_step = (1.0 - state.x_min) * problem.grid.elem_volume * rho_h
    drho = (material.phase1.density - material.phase2.density) / problem.cell.n_elems
    micro_step = (1.0 - state.x_min) * abs(drho) * float(np.sum(state.x_macro)) * problem.grid.elem_volume
    return max(macro_step, micro_step)


@dataclass
class UpdateInfo:
    achieved_mass: float
    cap_bound: bool
    flips_macro: int
    flips_micro: int


def concurrent_update(
    problem: MacroProblem,
    state: DesignState,
    material: TwoPhaseMaterial,
    xi: SensitivityField,
    target_mass: float,
    flip_cap: float | None = 0.05,
) -> tuple[DesignState, UpdateInfo]:
    """Rank both scales together and assign {1, x_min} to meet the weight budget.

    The merged ranking is cut at the prefix whose total weight (with the
    effective density recomputed from the candidate micro field) is closest
    to the target; ties in the ranking break deterministically by (scale,
    element index).  A per-scale flip cap limits oscillation; when it binds,
    the weight target is approached over the following iterations instead.
    """
    ne_mac = problem.grid.n_elems
    ne_mic = problem.cell.n_elems
    x_min = state.x_min
    rho1 = material.phase1.density
    rho2 = material.phase2.density
    v_a = problem.grid.elem_volume

    values = np.concatenate([xi.macro, xi.micro])
    scale = np.concatenate([np.zeros(ne_mac, dtype=int), np.ones(ne_mic, dtype=int)])
    index = np.concatenate([np.arange(ne_mac), np.arange(ne_mic)])
    order = np.lexsort((index, scale, -values))

    is_micro = scale[order] == 1
    n1 = np.concatenate([[0], np.cumsum(~is_micro)])  # macro solids in prefix
    m1 = np.concatenate([[0], np.cumsum(is_micro)])   # micro phase-1 voxels in prefix
    rho_hat = rho2 + (rho1 - rho2) * (m1 + x_min * (ne_mic - m1)) / ne_mic
    macro_sum = v_a * (n1 + x_min * (ne_mac - n1))
    prefix_mass = macro_sum * rho_hat

    if target_mass < prefix_mass[0] - 1e-12 * prefix_mass[-1]:
        raise InfeasibleTargetError(
            f"weight target {target_mass:.6e} below the empty-design minimum {prefix_mass[0]:.6e}"
        )
    if target_mass > prefix_mass[-1] * (1.0 + 1e-12):
        raise InfeasibleTargetError(
            f"weight target {target_mass:.6e} above the full-design maximum {prefix_mass[-1]:.6e}"
        )

    k = int(np.searchsorted(prefix_mass, target_mass))
    if k > 0 and (
        k == prefix_mass.size
        or abs(prefix_mass[k - 1] - target_mass) <= abs(prefix_mass[k] - target_mass)
    ):
        k -= 1

    desired = np.full(ne_mac + ne_mic, x_min)
    desired[order[:k]] = 1.0
    current = np.concatenate([state.x_macro, state.x_micro])
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)

    cap_bound = False
    new = desired.copy()
    if flip_cap is not None:
        for sc, count in ((0, ne_mac), (1, ne_mic)):
            cap = max(1, int(np.ceil(flip_cap * count)))
            mask = (scale == sc) & (desired != current)
            n_flips = int(mask.sum())
            if n_flips > cap:
                cap_bound = True
                # keep the flips the threshold demands most strongly
                strength = np.where(rank < k, k - rank, rank - k + 1)
                flip_ids = np.flatnonzero(mask)
                keep = flip_ids[np.lexsort((flip_ids, -strength[flip_ids]))[:cap]]
                revert = np.setdiff1d(flip_ids, keep, assume_unique=True)
                new[revert] = current[revert]

    x_macro = new[:ne_mac]
    x_micro = new[ne_mac:]
    new_state = DesignState(
        x_macro=x_macro,
        x_micro=x_micro,
        x_min=x_min,
        iteration=state.iteration + 1,
        weight_fraction=state.weight_fraction,
    )
    achieved = total_mass(problem, new_state, material)
    info = UpdateInfo(
        achieved_mass=achieved,
        cap_bound=cap_bound,
        flips_macro=int(np.sum(x_macro != state.x_macro)),
        flips_micro=int(np.sum(x_micro != state.x_micro)),
    )
    return new_state, info


def check_convergence(objectives, window: int = 5, tol: float = 1e-3) -> tuple[bool, float]:
    """Relative change between the last window-sum and the preceding one."""
    objectives = list(objectives)
    if len(objectives) < 2 * window:
        return False, float("inf")
    recent = sum(objectives[-window:])
    older = sum(objectives[-2 * window : -window])
    error = abs(recent - older) / abs(recent)
    return error <= tol, error


@dataclass
class HistoryRow:
    iteration: int
    objective: float
    expectation: float
    std: float
    weight_fraction: float
    macro_solid_fraction: float
    micro_phase1_fraction: float

    FIELDS = (
        "iteration", "objective", "expectation", "std",
        "weight_fraction", "macro_solid_fraction", "micro_phase1_fraction",
    )


@dataclass
class OptimizationResult:
    state: DesignState
    history: list[HistoryRow]
    converged: bool
    iterations: int
    objective: RobustObjective
    props: EffectiveProperties
    field_snapshots: list = field(default_factory=list)


def initial_state(
    problem: MacroProblem,
    x_min: float = X_MIN_DEFAULT,
    seed_fraction: float = 0.05,
    x_micro: np.ndarray | None = None,
) -> DesignState:
    """Full macro design plus the disclosed phase-2 disk seed in the cell."""
    if x_micro is None:
        x_micro = seed_cell(problem.cell, seed_fraction, x_min)
    return DesignState(x_macro=np.ones(problem.grid.n_elems), x_micro=np.asarray(x_micro, dtype=float), x_min=x_min)


def run(
    problem: MacroProblem,
    base_material: TwoPhaseMaterial,
    params: UncertainSet,
    schedule: Schedule,
    r_min_macro: float,
    r_min_micro: float,
    state: DesignState | None = None,
    seed_fraction: float = 0.05,
    x_min: float = X_MIN_DEFAULT,
    keep_snapshots: bool = False,
    debug_field_dir: str | None = None,
) -> OptimizationResult:
    """Full concurrent optimization loop (robust when params is nonempty).

    Per iteration: homogenize, evaluate, build sensitivities, normalize,
    filter, average with history, update both scales against the scheduled
    weight budget, and test convergence once the target fraction is reached.
    """
    robust = len(params) > 0
    material = params.mean_material(base_material) if robust else base_material
    if state is None:
        state = initial_state(problem, x_min=x_min, seed_fraction=seed_fraction)

    half_box = 0.49 * min(n * h for n, h in zip(problem.cell.shape, problem.cell.spacing))
    if r_min_micro > half_box:
        logger.info("micro filter radius %.3g clamped to %.3g (half cell size)", r_min_micro, half_box)
        r_min_micro = half_box
    filt_macro = SensitivityFilter(problem.grid, r_min_macro, periodic=False)
    filt_micro = SensitivityFilter(problem.cell, r_min_micro, periodic=True)

    m0 = reference_mass(problem, material)
    empty = DesignState(
        x_macro=np.full(problem.grid.n_elems, x_min),
        x_micro=np.full(problem.cell.n_elems, x_min),
        x_min=x_min,
    )
    floor = total_mass(problem, empty, material)
    if schedule.target_weight_fraction * m0 < floor:
        raise InfeasibleTargetError(
            f"target weight fraction {schedule.target_weight_fraction} is below the "
            f"empty-design floor {floor / m0:.3e} set by x_min = {x_min:g}"
        )
    history: list[HistoryRow] = []
    snapshots = []
    objectives: list[float] = []
    previous_field: SensitivityField | None = None
    converged = False
    final_props = None
    final_objective = None
    # the scheduled fraction compounds on itself; the achieved weight follows
    # within one element-mass quantum
    target_fraction = total_mass(problem, state, material) / m0

    for _ in range(schedule.max_iterations):
        props = homogenize(problem.cell, state.x_micro, material, problem.penalty)
        if robust:
            objective, cache = ihpa_evaluate(
                problem, state, base_material, params, kappa=schedule.kappa, props=props
            )
            raw = robust_sensitivity(cache, schedule.kappa, beta=schedule.beta)
        else:
            system = factorized_dynamic(problem, state, props.d_h, props.rho_h)
            u = system.solve(problem.force)
            c = mean_compliance(problem.force, u)
            objective = RobustObjective(c, 0.0, schedule.kappa)
            raw = deterministic_sensitivity(problem, state, props, u)

        xi = normalize(raw, problem, state, props)
        filtered = SensitivityField(filt_macro.apply(xi.macro), filt_micro.apply(xi.micro))
        smoothed = history_average(filtered, previous_field)
        previous_field = filtered
        if debug_field_dir is not None:
            from .sensitivity import dump_fields

            dump_fields(debug_field_dir, state.iteration, raw=raw, normalized=xi, filtered=smoothed)

        mass_now = total_mass(problem, state, material)
        state.weight_fraction = mass_now / m0
        history.append(
            HistoryRow(
                iteration=state.iteration,
                objective=objective.objective,
                expectation=objective.expectation,
                std=objective.std,
                weight_fraction=state.weight_fraction,
                macro_solid_fraction=state.macro_solid_fraction,
                micro_phase1_fraction=state.micro_phase1_fraction,
            )
        )
        if keep_snapshots:
            snapshots.append((state.iteration, state.x_macro.copy(), state.x_micro.copy()))
        objectives.append(objective.objective)
        final_props = props
        final_objective = objective

        quantum = mass_quantum(problem, state, material)
        at_target = abs(mass_now - schedule.target_weight_fraction * m0) <= quantum
        if at_target:
            converged, err = check_convergence(
                objectives, window=schedule.history_window, tol=schedule.convergence_tol
            )
            if converged:
                logger.info("converged at iteration %d (windowed change %.3e)", state.iteration, err)
                break

        target_fraction = update_weight_target(
            target_fraction, schedule.target_weight_fraction, schedule.evolution_ratio
        )
        state, info = concurrent_update(
            problem, state, material, smoothed, target_fraction * m0, flip_cap=schedule.flip_cap
        )
        if info.cap_bound:
            logger.info(
                "iteration %d: flip cap bound (%d macro / %d micro flips kept)",
                state.iteration, info.flips_macro, info.flips_micro,
            )

    if not converged:
        logger.warning("stopped after %d iterations without meeting the convergence test", len(history))
    return OptimizationResult(
        state=state,
        history=history,
        converged=converged,
        iterations=len(history),
        objective=final_objective,
        props=final_props,
        field_snapshots=snapshots,
    )
