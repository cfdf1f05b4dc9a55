"""Acceptance suite: one test per gate clause, stated tolerances only.

Run with `pytest tests/test_acceptance.py -s` to see one PASS/FAIL line per
clause.  The two convergence-slope gates are asserted exactly as stated;
their failure messages carry the measured-behaviour analysis.
"""

import math
import time

import numpy as np
import pytest

from bafobs.fem import (FieldSpec, Mesh1D, ObservationProfile, assemble,
                        norm_alpha)
from bafobs.harness import SweepPlan, build_noise_table, fit_rate, run_sweep
from bafobs.linalg import ShiftedSystem, pencil_eigs
from bafobs.observers import (BackAndForth, SchrodingerStepper, WaveState,
                              WaveStepper, choose_truncation, run_schrodinger,
                              run_wave)

from oracles import exact_damped_schrodinger

SCHROD_TRUTH = FieldSpec(kind="sine", coefficients=(1.0, 0.5))
WAVE_TRUTH = (FieldSpec(kind="sine", coefficients=(1.0,)),
              FieldSpec(kind="sine", coefficients=(0.0, 1.0)))
LEVELS = (32, 64, 128, 256)
SLOPE_BAND = (0.8, 1.15)
PROFILE = ObservationProfile(a=0.2, b=0.8, smoothness=2)


def report(criterion: str, ok: bool, detail: str):
    print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} -- {detail}")


def schrod_plan(**kw):
    base = dict(equation="schrodinger", levels=LEVELS, tau=1.0,
                truth=SCHROD_TRUTH, profile=PROFILE, kappa=1.0, refine=2,
                n_policy="auto")
    base.update(kw)
    return SweepPlan(**base)


def wave_plan(**kw):
    base = dict(equation="wave", levels=LEVELS, tau=2.0, truth=WAVE_TRUTH,
                profile=PROFILE, kappa=1.0, refine=2, n_policy="auto")
    base.update(kw)
    return SweepPlan(**base)


@pytest.fixture(scope="module")
def schrod_sweep():
    t0 = time.perf_counter()
    rows = run_sweep(schrod_plan())
    return rows, time.perf_counter() - t0


@pytest.fixture(scope="module")
def wave_sweep():
    t0 = time.perf_counter()
    rows = run_sweep(wave_plan())
    return rows, time.perf_counter() - t0


@pytest.fixture(scope="module")
def ops64():
    return assemble(Mesh1D(n_cells=64), PROFILE)


@pytest.fixture(scope="module")
def engines64(ops64):
    return (BackAndForth("schrodinger", ops64, 1.0 / 64, 64),
            BackAndForth("wave", ops64, 1.0 / 64, 128))


# -- criterion 1: Schrodinger convergence --------------------------------------


def test_criterion_1_errors_strictly_decrease(schrod_sweep):
    rows, _ = schrod_sweep
    errs = [r.error_x for r in rows]
    ok = all(r.failure is None for r in rows) and all(
        b < a for a, b in zip(errs, errs[1:]))
    report("1 (schrodinger errors strictly decrease)", ok,
           "errors " + " ".join(f"{e:.5f}" for e in errs))
    assert ok


def test_criterion_1_power_log2_slope_in_band(schrod_sweep):
    rows, _ = schrod_sweep
    fit = fit_rate(rows, model="power-log2", theta=1.0)
    ok = SLOPE_BAND[0] <= fit.slope <= SLOPE_BAND[1]
    report("1 (schrodinger power-log2 slope in [0.8, 1.15])", ok,
           f"slope {fit.slope:.4f}, max residual {fit.max_residual:.4f}, "
           f"dropped_coarsest {fit.dropped_coarsest}")
    assert ok, (
        f"measured power-log2 slope {fit.slope:.4f} outside {SLOPE_BAND}: the "
        "errors decay slower than (h+dt) ln^2(h+dt) at these levels because "
        "the second truth mode sits outside the first-order window of the "
        "implicit scheme (dt*lambda_2^2 >= 6 at every level)"
    )


def test_criterion_1_runtime_budget(schrod_sweep):
    _, seconds = schrod_sweep
    ok = seconds <= 300.0
    report("1 (schrodinger sweep within 5 min)", ok, f"{seconds:.1f} s")
    assert ok


# -- criterion 2: wave convergence ----------------------------------------------


def test_criterion_2_errors_strictly_decrease(wave_sweep):
    rows, _ = wave_sweep
    errs = [r.error_x for r in rows]
    ok = all(r.failure is None for r in rows) and all(
        b < a for a, b in zip(errs, errs[1:]))
    report("2 (wave errors strictly decrease)", ok,
           "errors " + " ".join(f"{e:.5f}" for e in errs))
    assert ok


def test_criterion_2_power_log2_slope_in_band(wave_sweep):
    rows, _ = wave_sweep
    fit = fit_rate(rows, model="power-log2", theta=1.0)
    ok = SLOPE_BAND[0] <= fit.slope <= SLOPE_BAND[1]
    report("2 (wave power-log2 slope in [0.8, 1.15])", ok,
           f"slope {fit.slope:.4f}, max residual {fit.max_residual:.4f}, "
           f"dropped_coarsest {fit.dropped_coarsest}")
    assert ok, (
        f"measured power-log2 slope {fit.slope:.4f} outside {SLOPE_BAND}: the "
        "wave errors decay faster than (h+dt) ln^2(h+dt) at these levels (the "
        "ln^2 factor of the bound is not realized by the measured error)"
    )


def test_criterion_2_runtime_budget(wave_sweep):
    _, seconds = wave_sweep
    ok = seconds <= 600.0
    report("2 (wave sweep within 10 min)", ok, f"{seconds:.1f} s")
    assert ok


# -- criterion 3: contraction suite ----------------------------------------------


def test_criterion_3_contraction_suite(ops64, engines64):
    schrod, wave = engines64
    tol = 1e-12
    worst_step = 0.0
    worst_l = 0.0
    st = SchrodingerStepper(ops64, schrod.dt, schrod.n_steps)
    for seed in range(100):
        u = schrod.random_state(seed)
        _, hist = run_schrodinger(st, u, keep_history=True)
        norms = [norm_alpha(ops64, q, 0.0) for q in hist]
        worst_step = max(worst_step,
                         max(b / a - 1.0 for a, b in zip(norms, norms[1:])))
        worst_l = max(worst_l, schrod.x_norm(schrod.apply_L(u)) / schrod.x_norm(u) - 1.0)
    wst = WaveStepper(ops64, wave.dt, wave.n_steps)
    for seed in range(100):
        u = wave.random_state(seed)
        _, hist, vels = run_wave(wst, u.pos, u.vel, keep_history=True)
        energies = [norm_alpha(ops64, vels[k - 1], 0.0) ** 2
                    + norm_alpha(ops64, hist[k], 0.5) ** 2
                    for k in range(1, wave.n_steps + 1)]
        worst_step = max(worst_step,
                         max(b / a - 1.0 for a, b in zip(energies, energies[1:])))
        worst_l = max(worst_l, wave.x_norm(wave.apply_L(u)) / wave.x_norm(u) - 1.0)
    ok = worst_step <= tol and worst_l <= tol
    report("3 (zero-forcing steps and round trip nonexpanding)", ok,
           f"worst step excess {worst_step:.2e}, worst round-trip excess {worst_l:.2e}")
    assert ok


# -- criterion 4: discrete Duhamel bound ------------------------------------------


def _m_inverse_norm(ops, load):
    msys = ShiftedSystem(ops.mass)
    if np.iscomplexobj(load):
        w = msys.solve(load.real) + 1j * msys.solve(load.imag)
    else:
        w = msys.solve(load)
    return norm_alpha(ops, w, 0.0)


def test_criterion_4_duhamel_bound(ops64, engines64):
    schrod, wave = engines64
    rng = np.random.default_rng(2024)
    ok = True
    worst = 0.0
    st = SchrodingerStepper(ops64, schrod.dt, schrod.n_steps)
    for _ in range(20):
        q0 = rng.standard_normal(ops64.n) + 1j * rng.standard_normal(ops64.n)
        loads = rng.standard_normal((schrod.n_steps, ops64.n)) \
            + 1j * rng.standard_normal((schrod.n_steps, ops64.n))
        max_load = max(_m_inverse_norm(ops64, f) for f in loads)
        _, hist = run_schrodinger(st, q0, loads, keep_history=True)
        base = norm_alpha(ops64, q0, 0.0)
        for k in range(1, schrod.n_steps + 1):
            bound = base + k * schrod.dt * max_load * (1 + 10 * schrod.dt)
            ratio = norm_alpha(ops64, hist[k], 0.0) / bound
            worst = max(worst, ratio)
            ok = ok and ratio <= 1.0
    wst = WaveStepper(ops64, wave.dt, wave.n_steps)
    for _ in range(20):
        p0, p1 = rng.standard_normal(ops64.n), rng.standard_normal(ops64.n)
        loads = rng.standard_normal((wave.n_steps, ops64.n))
        max_load = max(_m_inverse_norm(ops64, f) for f in loads)
        _, hist, vels = run_wave(wst, p0, p1, loads, keep_history=True)
        base = wave.x_norm(WaveState(p0, p1))
        for k in range(1, wave.n_steps + 1):
            bound = base + k * wave.dt * max_load * (1 + 10 * wave.dt)
            state = WaveState(hist[k], vels[k - 1])
            ratio = wave.x_norm(state) / bound
            worst = max(worst, ratio)
            ok = ok and ratio <= 1.0
    report("4 (discrete Duhamel bound at every step)", ok,
           f"worst state/bound ratio {worst:.4f}")
    assert ok


# -- criterion 5: Neumann tail bound ----------------------------------------------


def _tail_check(engine, trace):
    eta = engine.estimate_eta(tol=1e-9, max_iter=400, seed=11)
    long_run = engine.neumann_reconstruct(trace, n_terms=60)
    z0_norm = long_run.increment_norms[0]
    results = []
    for n in (2, 4, 8):
        short = engine.neumann_reconstruct(trace, n_terms=n)
        dev = engine.x_norm(long_run.estimate - short.estimate)
        bound = eta.value ** (n + 1) / (1 - eta.value) * z0_norm * 1.01
        results.append((n, dev, bound, dev <= bound))
    return eta.value, results


def test_criterion_5_neumann_tail_bound(ops64, engines64):
    from bafobs.models import ProblemInstance, generate_observation
    schrod, wave = engines64
    inst = ProblemInstance("schrodinger", ops64.mesh, PROFILE, tau=1.0,
                           n_steps=64, truth=SCHROD_TRUTH)
    trace = generate_observation(inst, refine=2)
    eta_s, res_s = _tail_check(schrod, trace)
    instw = ProblemInstance("wave", ops64.mesh, PROFILE, tau=2.0, n_steps=128,
                            truth=WAVE_TRUTH)
    tracew = generate_observation(instw, refine=2)
    eta_w, res_w = _tail_check(wave, tracew)
    ok = all(r[3] for r in res_s + res_w)
    detail = "; ".join(f"{eq} N={n} dev/bound={dev/bound:.3f}"
                       for eq, rs in (("schrod", res_s), ("wave", res_w))
                       for n, dev, bound, _ in rs)
    report("5 (Neumann tail within geometric bound)", ok,
           f"eta_s={eta_s:.4f} eta_w={eta_w:.4f}; {detail}")
    assert ok


# -- criterion 6: truncation rule -------------------------------------------------


def test_criterion_6_truncation_rule_table():
    # expected values derived by hand from the two ceil formulas
    cases = [
        ("full", 0.01, 0.01, 1.0, 0.5, 6),      # ceil(5.6439)
        ("full", 0.5, 0.5, 1.0, 0.5, 0),        # ln 1 = 0
        ("full", 0.9, 0.2, 1.0, 0.5, 0),        # positive log, floored
        ("full", 0.05, 0.001, 1.0, 0.8, 14),    # ceil(13.336)
        ("full", 0.1, 1e-6, 1.0, 0.3, 2),       # ceil(1.9124)
        ("full", 0.2, 0.05, 2.0, 0.6, 5),       # ceil(4.7138)
        ("semi", 0.1, None, 1.0, 0.1, 1),       # equal logarithms
        ("semi", 0.1, None, 2.0, 0.1, 2),
        ("semi", 0.25, None, 1.0, 0.7, 4),      # ceil(3.8869)
        ("semi", 0.5, None, 1.0, 0.5, 1),
    ]
    got = [choose_truncation(mode, h=h, dt=dt, theta=theta, eta_hat=eta)
           for mode, h, dt, theta, eta, _ in cases]
    expected = [c[-1] for c in cases]
    ok = got == expected
    report("6 (truncation rule on derived table)", ok, f"{got} vs {expected}")
    assert ok


# -- criterion 7: noise robustness -------------------------------------------------


def _noise_ratios(plan):
    rows = run_sweep(plan)
    table = build_noise_table(rows, plan.tau)
    clean = [t for t in table if t.noise_eps == 0.0][0]
    ratios = {t.noise_eps: t.ratio for t in table if t.noise_eps > 0.0}
    return clean, ratios


def test_criterion_7_noise_inflation_ratio_stable(schrod_sweep, wave_sweep):
    eps_list = (0.0, 1e-3, 1e-2)
    clean_s, ratios_s = _noise_ratios(schrod_plan(levels=(128,), noise_eps=eps_list))
    clean_w, ratios_w = _noise_ratios(wave_plan(levels=(128,), noise_eps=eps_list))
    stable = []
    for ratios in (ratios_s, ratios_w):
        lo, hi = sorted(abs(r) for r in ratios.values())
        stable.append(hi <= 3.0 * lo)
    row_s = [r for r in schrod_sweep[0] if r.n_cells == 128][0]
    row_w = [r for r in wave_sweep[0] if r.n_cells == 128][0]
    bit_exact = (clean_s.error_x == row_s.error_x
                 and clean_w.error_x == row_w.error_x)
    ok = all(stable) and bit_exact
    report("7 (noise inflation ratio stable, eps=0 bit-exact)", ok,
           f"schrod ratios {ratios_s}, wave ratios {ratios_w}, "
           f"bit_exact={bit_exact}")
    assert ok


# -- criterion 8: oracle agreement --------------------------------------------------


def test_criterion_8_exponential_oracle_first_order():
    mesh = Mesh1D(n_cells=8)
    ops = assemble(mesh, PROFILE)
    pe = pencil_eigs(ops.stiffness, ops.mass)
    q0 = (1.0 + 0.5j) * pe.vectors[:, 0]
    t_final = 0.5
    reference = exact_damped_schrodinger(ops, +1, t_final, q0)
    errs = []
    for dt in (1e-2, 5e-3, 2.5e-3):
        st = SchrodingerStepper(ops, dt, round(t_final / dt))
        errs.append(norm_alpha(ops, run_schrodinger(st, q0) - reference, 0.0))
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    ok = errs[0] > errs[1] > errs[2] and all(0.8 <= o <= 1.2 for o in orders)
    report("8 (damped evolution matches exponential oracle at first order)",
           ok, f"errors {[f'{e:.3e}' for e in errs]}, orders "
           f"{[f'{o:.3f}' for o in orders]}")
    assert ok


# -- criterion 9: round-trip adjointness ---------------------------------------------


def test_criterion_9_schrodinger_self_adjoint(engines64):
    schrod, _ = engines64
    worst = 0.0
    for seed in range(50):
        u = schrod.random_state(seed)
        v = schrod.random_state(1000 + seed)
        defect = abs(schrod.x_inner(schrod.apply_L(u), v)
                     - schrod.x_inner(u, schrod.apply_L(v)))
        worst = max(worst, defect / (schrod.x_norm(u) * schrod.x_norm(v)))
    ok = worst <= 1e-10
    report("9a (schrodinger round trip self-adjoint)", ok,
           f"worst relative defect {worst:.2e}")
    assert ok


def test_criterion_9_wave_defect_shrinks(ops64):
    pe = pencil_eigs(ops64.stiffness, ops64.mass)

    def smooth_state(seed):
        rng = np.random.default_rng(seed)
        return WaveState(pe.vectors[:, :3] @ rng.standard_normal(3),
                         pe.vectors[:, :3] @ rng.standard_normal(3))

    def worst_defect(n_steps):
        engine = BackAndForth("wave", ops64, 2.0 / n_steps, n_steps)
        worst = 0.0
        for seed in range(8):
            u, v = smooth_state(seed), smooth_state(100 + seed)
            d = abs(engine.x_inner(engine.apply_L(u), v)
                    - engine.x_inner(u, engine.apply_L(v)))
            worst = max(worst, d / (engine.x_norm(u) * engine.x_norm(v)))
        return worst

    d_coarse, d_fine = worst_defect(128), worst_defect(256)
    ok = d_fine <= d_coarse / 1.8
    report("9b (wave symmetry defect shrinks >= 1.8x under dt halving)", ok,
           f"defect {d_coarse:.3e} -> {d_fine:.3e} "
           f"(factor {d_coarse / max(d_fine, 1e-300):.2f})")
    assert ok
