"""Convergence sweeps, error evaluation and rate fitting.

The sweep couples the time step to the mesh (dt = kappa * h by default) so a
single refinement study exposes the combined first-order behaviour; errors
are measured against the closed-form truth by fine quadrature, so they
include the projection floor of the element space.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np

from .fem import (FemOperators, FieldSpec, Mesh1D, ObservationProfile,
                  assemble)
from .models import NoiseSpec, ProblemInstance, generate_observation
from .observers import BackAndForth, WaveState

CSV_HEADER = "equation,h,dt,n_used,eta_hat,noise_eps,error_x,fit_model,wall_ms"
WORKERS_ENV = "BAFOBS_WORKERS"


# -- error evaluation in the analysis norms ------------------------------------


def _field_sq_norm(mesh: Mesh1D, values_at_q: np.ndarray, weights: np.ndarray) -> float:
    return float(np.real(np.sum(weights * np.abs(values_at_q) ** 2)))


def _hat_loads(mesh: Mesh1D, values_at_q: np.ndarray, pts: np.ndarray,
               weights: np.ndarray) -> np.ndarray:
    """Entries int f phi_i dx with the fine (8-point) rule."""
    n = mesh.n
    nq = values_at_q.size // mesh.n_cells
    per = (weights * values_at_q).reshape(mesh.n_cells, nq)
    t = (pts.reshape(mesh.n_cells, nq) - mesh.h * np.arange(mesh.n_cells)[:, None]) / mesh.h
    left = np.sum(per * (1.0 - t), axis=1)
    right = np.sum(per * t, axis=1)
    out = np.zeros(n, dtype=values_at_q.dtype)
    out += right[:n]
    out += left[1:]
    return out


def _hat_grad_loads(mesh: Mesh1D, dvalues_at_q: np.ndarray,
                    weights: np.ndarray) -> np.ndarray:
    """Entries int f' phi_i' dx with the fine rule."""
    n = mesh.n
    nq = dvalues_at_q.size // mesh.n_cells
    per = np.sum((weights * dvalues_at_q).reshape(mesh.n_cells, nq), axis=1) / mesh.h
    out = np.zeros(n, dtype=dvalues_at_q.dtype)
    out += per[:n]
    out -= per[1:]
    return out


def _l2_error(mesh: Mesh1D, ops: FemOperators, truth: FieldSpec,
              coeffs: np.ndarray) -> float:
    pts, wts = mesh.quadrature_points(order8=True)
    tv = truth.value(pts)
    t2 = _field_sq_norm(mesh, tv, wts)
    loads = _hat_loads(mesh, tv, pts, wts)
    cross = 2.0 * float(np.real(np.vdot(coeffs, loads)))
    quad = float(np.real(np.vdot(coeffs, ops.mass.matvec(coeffs))))
    return math.sqrt(max(t2 - cross + quad, 0.0))


def _h1_error(mesh: Mesh1D, ops: FemOperators, truth: FieldSpec,
              coeffs: np.ndarray) -> float:
    pts, wts = mesh.quadrature_points(order8=True)
    dv = truth.derivative(pts)
    t2 = _field_sq_norm(mesh, dv, wts)
    loads = _hat_grad_loads(mesh, dv, wts)
    cross = 2.0 * float(np.real(np.vdot(coeffs, loads)))
    quad = float(np.real(np.vdot(coeffs, ops.stiffness.matvec(coeffs))))
    return math.sqrt(max(t2 - cross + quad, 0.0))


def reconstruction_error(equation: str, truth, estimate, ops: FemOperators) -> float:
    """Reconstruction error in the norms the convergence analysis uses.

    Schrodinger: L2 distance between the closed-form truth and the element
    function; wave: H^1_0 distance of the positions plus L2 distance of the
    velocities.  The truth side is integrated with the fine quadrature rule,
    not replaced by a projected surrogate, so the projection floor of the
    element space is part of the reported error.
    """
    mesh = ops.mesh
    if equation == "schrodinger":
        u = np.asarray(estimate)
        if u.shape != (ops.n,):
            raise ValueError(f"estimate has shape {u.shape}, expected ({ops.n},)")
        return _l2_error(mesh, ops, truth, u)
    if equation == "wave":
        w0, w1 = truth
        state = estimate if isinstance(estimate, WaveState) else WaveState(*estimate)
        if state.pos.shape != (ops.n,):
            raise ValueError("estimate dimension does not match the mesh")
        return (_h1_error(mesh, ops, w0, state.pos)
                + _l2_error(mesh, ops, w1, state.vel))
    raise ValueError(f"unknown equation {equation!r}")


# -- sweeps -------------------------------------------------------------------


@dataclass(frozen=True)
class SweepPlan:
    """Refinement study over n_cells levels with dt = kappa * h."""

    equation: str
    levels: tuple[int, ...]
    tau: float
    truth: FieldSpec | tuple[FieldSpec, FieldSpec]
    profile: ObservationProfile = ObservationProfile()
    kappa: float = 1.0
    length: float = 1.0
    theta: float = 1.0
    refine: int = 2
    noise_eps: tuple[float, ...] = (0.0,)
    noise_seed: int = 7
    n_policy: int | str = "auto"
    eta_tol: float = 1e-6
    eta_max_iter: int = 80
    eta_seed: int = 11
    fit_model: str = "power-log2"

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("need at least one level")
        if self.n_policy != "auto" and not isinstance(self.n_policy, int):
            raise ValueError("n_policy must be 'auto' or an integer")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")


@dataclass
class SweepRow:
    """One (level, noise) cell of a sweep."""

    equation: str
    n_cells: int
    h: float
    dt: float
    n_used: int
    eta_hat: float
    noise_eps: float
    error_x: float
    wall_ms: float
    failure: str | None = None


def _steps_for(plan: SweepPlan, h: float) -> int:
    k = max(1, round(plan.tau / (plan.kappa * h)))
    if plan.equation == "wave":
        k = max(k, 2)
    return k


def run_cell(plan: SweepPlan, n_cells: int, eps: float,
             eta_hat: float | None = None) -> SweepRow:
    """Run one reconstruction cell; failures are recorded, not raised."""
    t0 = time.perf_counter()
    h = plan.length / n_cells
    k = _steps_for(plan, h)
    dt = plan.tau / k
    try:
        mesh = Mesh1D(n_cells=n_cells, length=plan.length)
        ops = assemble(mesh, plan.profile)
        instance = ProblemInstance(equation=plan.equation, mesh=mesh,
                                   profile=plan.profile, tau=plan.tau,
                                   n_steps=k, truth=plan.truth)
        trace = generate_observation(instance, refine=plan.refine,
                                     noise=NoiseSpec(eps, plan.noise_seed))
        engine = BackAndForth(plan.equation, ops, dt, k)
        if eta_hat is None:
            eta_hat = engine.estimate_eta(plan.eta_tol, plan.eta_max_iter,
                                          plan.eta_seed).value
        if plan.n_policy == "auto":
            result = engine.neumann_reconstruct(trace, eta_hat=eta_hat,
                                                theta=plan.theta)
        else:
            result = engine.neumann_reconstruct(trace, n_terms=plan.n_policy,
                                                eta_hat=eta_hat)
        err = reconstruction_error(plan.equation, plan.truth, result.estimate, ops)
        wall = 1e3 * (time.perf_counter() - t0)
        return SweepRow(plan.equation, n_cells, h, dt, result.n_used,
                        eta_hat, eps, err, wall)
    except Exception as exc:  # cell isolation: the sweep must go on
        wall = 1e3 * (time.perf_counter() - t0)
        return SweepRow(plan.equation, n_cells, h, dt, -1,
                        float("nan"), eps, float("nan"), wall,
                        failure=f"{type(exc).__name__}: {exc}")


def _cell_args(plan: SweepPlan):
    for n_cells in plan.levels:
        for eps in plan.noise_eps:
            yield n_cells, eps


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_sweep(plan: SweepPlan) -> list[SweepRow]:
    """One row per (level, noise) cell, deterministic given the plan seeds.

    Cells are independent; with BAFOBS_WORKERS > 1 they run in a process
    pool.  Serial runs share the contraction estimate across noise levels of
    the same mesh (it does not depend on the data).
    """
    workers = worker_count()
    args = list(_cell_args(plan))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_cell, plan, n, eps) for n, eps in args]
            return [f.result() for f in futures]
    rows = []
    eta_cache: dict[int, float] = {}
    for n_cells, eps in args:
        row = run_cell(plan, n_cells, eps, eta_hat=eta_cache.get(n_cells))
        if row.failure is None:
            eta_cache.setdefault(n_cells, row.eta_hat)
        rows.append(row)
    return rows


# -- rate fitting --------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    """Least-squares slope of log error against the model regressor."""

    model: str
    slope: float
    intercept: float
    max_residual: float
    n_points: int
    dropped_coarsest: bool = False


def _regressor(model: str, x: np.ndarray) -> np.ndarray:
    if model == "pure-power":
        return np.log(x)
    if model == "power-log2":
        return np.log(x * np.log(x) ** 2)
    raise ValueError(f"unknown fit model {model!r}")


def _lstsq_line(r: np.ndarray, y: np.ndarray) -> tuple[float, float, np.ndarray]:
    A = np.column_stack([r, np.ones_like(r)])
    sol, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ sol
    return float(sol[0]), float(sol[1]), resid


def fit_rate(rows: list[SweepRow], model: str = "power-log2",
             theta: float = 1.0) -> RateFit:
    """Fit log error_x ~ slope * log(regressor) over the clean rows.

    Pre-asymptotic guard: when at least 4 rows are available, the trend is
    fitted on the finer levels alone; if the coarsest level sits more than
    3x the median residual away from that trend, it is dropped.
    """
    clean = [r for r in rows if r.noise_eps == 0.0 and r.failure is None
             and np.isfinite(r.error_x) and r.error_x > 0.0]
    if len(clean) < 3:
        raise ValueError("rate fitting needs at least 3 clean rows")
    clean.sort(key=lambda r: r.h ** theta + r.dt)
    x = np.array([r.h ** theta + r.dt for r in clean])
    if np.ptp(x) == 0.0:
        raise ValueError("degenerate sweep: all levels have the same h^theta + dt")
    y = np.log(np.array([r.error_x for r in clean]))
    r = _regressor(model, x)
    dropped = False
    if len(clean) >= 4:
        slope_f, icept_f, resid_f = _lstsq_line(r[:-1], y[:-1])
        deviation = abs(y[-1] - (slope_f * r[-1] + icept_f))
        med = max(float(np.median(np.abs(resid_f))), 1e-12)
        if deviation > 3.0 * med:
            return RateFit(model=model, slope=slope_f, intercept=icept_f,
                           max_residual=float(np.max(np.abs(resid_f))),
                           n_points=len(resid_f), dropped_coarsest=True)
    slope, intercept, resid = _lstsq_line(r, y)
    return RateFit(model=model, slope=slope, intercept=intercept,
                   max_residual=float(np.max(np.abs(resid))),
                   n_points=len(resid), dropped_coarsest=dropped)


# -- noise robustness -----------------------------------------------------------


@dataclass(frozen=True)
class NoiseRow:
    """Error inflation of one noisy cell over its clean baseline."""

    n_cells: int
    noise_eps: float
    error_x: float
    inflation: float
    ratio: float            # inflation / (N * tau * eps); nan for eps = 0


def build_noise_table(rows: list[SweepRow], tau: float) -> list[NoiseRow]:
    """Per-level inflation of noisy rows over their clean baselines."""
    by_level: dict[int, dict[float, SweepRow]] = {}
    for row in rows:
        by_level.setdefault(row.n_cells, {})[row.noise_eps] = row
    table = []
    for n_cells, cells in by_level.items():
        base = cells.get(0.0)
        if base is None or base.failure is not None:
            continue
        for eps, row in sorted(cells.items()):
            if row.failure is not None:
                continue
            inflation = row.error_x - base.error_x
            ratio = float("nan")
            if eps > 0.0 and row.n_used > 0:
                ratio = inflation / (row.n_used * tau * eps)
            table.append(NoiseRow(n_cells, eps, row.error_x, inflation, ratio))
    return table


def noise_study(plan: SweepPlan) -> tuple[list[SweepRow], list[NoiseRow]]:
    """Error inflation against the N * tau * eps data-error scale."""
    if 0.0 not in plan.noise_eps:
        raise ValueError("noise study needs the eps = 0 baseline")
    rows = run_sweep(plan)
    return rows, build_noise_table(rows, plan.tau)


# -- reports --------------------------------------------------------------------


def rows_to_csv(rows: list[SweepRow], fit_model: str,
                config: dict | None = None) -> str:
    """Plot-ready CSV; the resolved config rides along as comment lines."""
    lines = []
    if config is not None:
        lines.append("# config: " + json.dumps(config, sort_keys=True))
    lines.append(CSV_HEADER)
    for r in rows:
        lines.append(",".join([
            r.equation, f"{r.h:.17g}", f"{r.dt:.17g}", str(r.n_used),
            f"{r.eta_hat:.17g}", f"{r.noise_eps:.17g}", f"{r.error_x:.17g}",
            fit_model, f"{r.wall_ms:.3f}",
        ]))
    return "\n".join(lines) + "\n"


def evaluate_gates(rows: list[SweepRow], fit: RateFit | None,
                   slope_band: tuple[float, float] = (0.8, 1.15),
                   require_monotone: bool = True) -> dict[str, bool]:
    """Pass/fail per acceptance gate for one sweep."""
    gates: dict[str, bool] = {}
    gates["no_cell_failures"] = all(r.failure is None for r in rows)
    clean = sorted((r for r in rows if r.noise_eps == 0.0 and r.failure is None),
                   key=lambda r: -(r.h + r.dt))
    if require_monotone:
        errs = [r.error_x for r in clean]
        gates["errors_strictly_decrease"] = all(
            b < a for a, b in zip(errs, errs[1:])
        ) and len(errs) >= 2
    if fit is not None:
        gates["slope_in_band"] = slope_band[0] <= fit.slope <= slope_band[1]
    return gates


def summary_dict(plan: SweepPlan, rows: list[SweepRow], fit: RateFit | None,
                 gates: dict[str, bool], config: dict | None = None,
                 noise_table: list[NoiseRow] | None = None) -> dict:
    out = {
        "equation": plan.equation,
        "levels": list(plan.levels),
        "rows": [asdict(r) for r in rows],
        "fit": asdict(fit) if fit is not None else None,
        "gates": gates,
        "all_gates_pass": all(gates.values()) if gates else True,
    }
    if noise_table is not None:
        out["noise_table"] = [asdict(t) for t in noise_table]
    if config is not None:
        out["config"] = config
    return out
