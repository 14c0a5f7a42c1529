"""Result export and verification reporting.

Density fields go out as flat CSV (grid indices + value, x fastest) and as
VTK legacy ASCII structured-points cell data, both with shortest-roundtrip
float formatting so identical runs produce byte-identical files.  A result
bundle is a directory holding the echoed config, the iteration history, the
final fields, the effective elasticity block and a JSON summary; re-loading
a bundle and re-evaluating its objective reproduces the logged value.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .beso import HistoryRow, OptimizationResult, reference_mass, total_mass
from .config import RunConfig, _parse_document, build_problem
from .errors import OutputError
from .fem import StructuredGrid, mean_compliance
from .homogenization import format_effective_matrix, homogenize
from .problem import DesignState, MacroProblem, factorized_dynamic
from .uncertainty import McsResult, RobustObjective, UncertainSet, ihpa_evaluate, mcs_evaluate

logger = logging.getLogger(__name__)


def _fmt(value: float) -> str:
    return repr(float(value))


def export_field_csv(path: str, grid: StructuredGrid, values: np.ndarray) -> None:
    """Flat CSV of a per-element scalar field: grid indices then value, x fastest."""
    values = np.asarray(values)
    if values.size != grid.n_elems:
        raise OutputError(f"field has {values.size} entries, grid has {grid.n_elems} elements")
    cols = ["i", "j", "k"][: grid.dim]
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(cols + ["value"]) + "\n")
            idx = np.unravel_index(np.arange(grid.n_elems), grid.shape, order="F")
            for n in range(grid.n_elems):
                fh.write(",".join(str(idx[a][n]) for a in range(grid.dim)))
                fh.write("," + _fmt(values[n]) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def import_field_csv(path: str, grid: StructuredGrid) -> np.ndarray:
    values = np.zeros(grid.n_elems)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            if header[-1] != "value" or len(header) != grid.dim + 1:
                raise OutputError(f"{path}: unexpected CSV header {header}")
            for line in fh:
                parts = line.strip().split(",")
                idx = tuple(int(p) for p in parts[: grid.dim])
                flat = int(np.ravel_multi_index(idx, grid.shape, order="F"))
                values[flat] = float(parts[-1])
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc}") from exc
    return values


def export_field_vtk(path: str, grid: StructuredGrid, values: np.ndarray, name: str = "density") -> None:
    """VTK legacy ASCII structured-points file with one cell-data scalar field."""
    values = np.asarray(values)
    if values.size != grid.n_elems:
        raise OutputError(f"field has {values.size} entries, grid has {grid.n_elems} elements")
    dims = list(grid.nodes_shape) + [1] * (3 - grid.dim)
    spacing = list(grid.spacing) + [1.0] * (3 - grid.dim)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# vtk DataFile Version 2.0\n")
            fh.write("rcto density field\n")
            fh.write("ASCII\n")
            fh.write("DATASET STRUCTURED_POINTS\n")
            fh.write(f"DIMENSIONS {dims[0]} {dims[1]} {dims[2]}\n")
            fh.write("ORIGIN 0.0 0.0 0.0\n")
            fh.write(f"SPACING {_fmt(spacing[0])} {_fmt(spacing[1])} {_fmt(spacing[2])}\n")
            fh.write(f"CELL_DATA {grid.n_elems}\n")
            fh.write(f"SCALARS {name} double 1\n")
            fh.write("LOOKUP_TABLE default\n")
            for v in values:  # storage is already x fastest
                fh.write(_fmt(v) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def write_history_csv(path: str, history: list[HistoryRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(HistoryRow.FIELDS) + "\n")
        for row in history:
            fh.write(
                ",".join(
                    [str(row.iteration)]
                    + [_fmt(getattr(row, f)) for f in HistoryRow.FIELDS[1:]]
                )
                + "\n"
            )


@dataclass
class VerifyReport:
    """Side-by-side perturbation vs Monte Carlo worst-case statistics."""

    ihpa: RobustObjective
    mcs: McsResult
    kappa: float

    @property
    def mcs_objective(self) -> float:
        return self.mcs.objective(self.kappa)

    def relative_errors(self) -> dict[str, float]:
        def rel(a, b):
            return abs(a - b) / abs(b) if b != 0 else (0.0 if a == 0 else float("inf"))

        return {
            "expectation": rel(self.ihpa.expectation, self.mcs.expectation),
            "std": rel(self.ihpa.std, self.mcs.std),
            "objective": rel(self.ihpa.objective, self.mcs_objective),
        }

    def format_table(self, ihpa_calls: int) -> str:
        errs = self.relative_errors()
        rows = [
            ("expectation", self.ihpa.expectation, self.mcs.expectation, errs["expectation"]),
            ("standard variance", self.ihpa.std, self.mcs.std, errs["std"]),
            ("objective", self.ihpa.objective, self.mcs_objective, errs["objective"]),
        ]
        lines = [
            "worst-case mean-compliance statistics (perturbation vs Monte Carlo)",
            f"{'quantity':<20}{'IHPA':>16}{'MCS':>16}{'rel. error':>12}",
        ]
        for name, a, b, e in rows:
            lines.append(f"{name:<20}{a:>16.6f}{b:>16.6f}{e:>11.2%}")
        lines.append(f"{'FEA calls':<20}{ihpa_calls:>16}{self.mcs.fea_calls:>16}")
        if self.mcs.resampled:
            lines.append(f"(Monte Carlo redrew {self.mcs.resampled} non-physical samples)")
        return "\n".join(lines) + "\n"


def verify(
    problem: MacroProblem,
    state: DesignState,
    base_material,
    params: UncertainSet,
    kappa: float,
    n_interval: int,
    n_random: int,
    seed: int,
) -> tuple[VerifyReport, int]:
    """Run both uncertainty propagation routes on one design and compare."""
    objective, cache = ihpa_evaluate(problem, state, base_material, params, kappa=kappa)
    mcs = mcs_evaluate(problem, state, base_material, params, n_interval, n_random, seed)
    return VerifyReport(ihpa=objective, mcs=mcs, kappa=kappa), cache.fea_calls


# ---------------------------------------------------------------------------
# Result bundles
# ---------------------------------------------------------------------------


def write_bundle(
    outdir: str,
    cfg: RunConfig,
    problem: MacroProblem,
    result: OptimizationResult,
    dump_iterations: bool = False,
) -> None:
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "config.yaml"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cfg.raw_text)
    write_history_csv(os.path.join(outdir, "history.csv"), result.history)
    export_field_csv(os.path.join(outdir, "macro_density.csv"), problem.grid, result.state.x_macro)
    export_field_csv(os.path.join(outdir, "micro_density.csv"), problem.cell, result.state.x_micro)
    export_field_vtk(os.path.join(outdir, "macro_density.vtk"), problem.grid, result.state.x_macro)
    export_field_vtk(os.path.join(outdir, "micro_density.vtk"), problem.cell, result.state.x_micro)
    with open(os.path.join(outdir, "effective_elasticity.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_effective_matrix(result.props.d_h, result.props.rho_h))
    summary = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "converged": result.converged,
        "iterations": result.iterations,
        "objective": result.objective.objective,
        "expectation": result.objective.expectation,
        "std": result.objective.std,
        "kappa": cfg.schedule.kappa,
        "weight_fraction": result.state.weight_fraction,
        "macro_solid_fraction": result.state.macro_solid_fraction,
        "micro_phase1_fraction": result.state.micro_phase1_fraction,
        "defaults_applied": list(cfg.defaults_applied),
    }
    with open(os.path.join(outdir, "summary.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if dump_iterations and result.field_snapshots:
        folder = os.path.join(outdir, "iterations")
        os.makedirs(folder, exist_ok=True)
        for iteration, x_macro, x_micro in result.field_snapshots:
            export_field_csv(os.path.join(folder, f"iter_{iteration:04d}_macro.csv"), problem.grid, x_macro)
            export_field_csv(os.path.join(folder, f"iter_{iteration:04d}_micro.csv"), problem.cell, x_micro)
    logger.info("wrote result bundle to %s", outdir)


def load_bundle(outdir: str):
    """Reload (config, problem, state, summary) from a bundle directory."""
    import yaml as _yaml

    cfg_path = os.path.join(outdir, "config.yaml")
    try:
        with open(cfg_path, "r", encoding="utf-8") as fh:
            text = fh.read()
        doc = _yaml.safe_load(text)
        cfg = _parse_document(doc, text)
        with open(os.path.join(outdir, "summary.json"), "r", encoding="utf-8") as fh:
            summary = json.load(fh)
    except OSError as exc:
        raise OutputError(f"cannot load bundle {outdir}: {exc}") from exc
    problem = build_problem(cfg)
    x_macro = import_field_csv(os.path.join(outdir, "macro_density.csv"), problem.grid)
    x_micro = import_field_csv(os.path.join(outdir, "micro_density.csv"), problem.cell)
    state = DesignState(x_macro=x_macro, x_micro=x_micro, x_min=cfg.x_min)
    return cfg, problem, state, summary


def reevaluate_bundle(outdir: str) -> tuple[float, float]:
    """Recompute the objective of a saved design; returns (logged, recomputed)."""
    cfg, problem, state, summary = load_bundle(outdir)
    # the summary records the effective mode/seed (CLI flags may have
    # overridden the echoed config)
    cfg.mode = summary.get("mode", cfg.mode)
    cfg.seed = summary.get("seed", cfg.seed)
    if cfg.mode == "rcto":
        objective, _ = ihpa_evaluate(
            problem, state, cfg.base_material, cfg.params, kappa=cfg.schedule.kappa
        )
        value = objective.objective
    else:
        material = cfg.base_material
        props = homogenize(problem.cell, state.x_micro, material, problem.penalty)
        system = factorized_dynamic(problem, state, props.d_h, props.rho_h)
        value = mean_compliance(problem.force, system.solve(problem.force))
    state.weight_fraction = total_mass(problem, state, cfg.base_material) / reference_mass(
        problem, cfg.base_material
    )
    return float(summary["objective"]), float(value)
