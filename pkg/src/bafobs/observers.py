"""Fully discrete forward/backward observers and the Neumann reconstruction.

The forward observer is the damped implicit scheme driven by the recorded
output; the backward observer is realized as a time-reversed initial value
problem (for the wave pair this is the velocity-flip conjugation of the
damped evolution).  Their zero-forcing composition is the round-trip
operator whose contraction factor governs how many back-and-forth sweeps
the truncated Neumann sum retains.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .fem import FemOperators
from .linalg import ShiftedSystem, SymTridiag

AUTO_N_CAP = 200


def _matmat(t: SymTridiag, rows: np.ndarray) -> np.ndarray:
    """Apply a SymTridiag to every row of a 2-d array."""
    out = rows * t.diag
    if t.n > 1:
        out[:, :-1] += rows[:, 1:] * t.off
        out[:, 1:] += rows[:, :-1] * t.off
    return out


@dataclass(frozen=True)
class WaveState:
    """Position/velocity pair of Galerkin coefficients."""

    pos: np.ndarray
    vel: np.ndarray

    def __add__(self, other: "WaveState") -> "WaveState":
        return WaveState(self.pos + other.pos, self.vel + other.vel)

    def __sub__(self, other: "WaveState") -> "WaveState":
        return WaveState(self.pos - other.pos, self.vel - other.vel)

    def __mul__(self, scalar: float) -> "WaveState":
        return WaveState(scalar * self.pos, scalar * self.vel)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, n: int) -> "WaveState":
        return cls(np.zeros(n), np.zeros(n))


class SchrodingerStepper:
    """Implicit stepper for the damped Schrodinger observer.

    One step solves (M -+ i dt K + dt B) q^k = M q^{k-1} + dt f^k, where the
    sign follows the generator +-i A0 - C*C.  The system matrix is factored
    once at construction and shared across all steps (and threads).
    """

    def __init__(self, ops: FemOperators, dt: float, n_steps: int, sign: int = +1):
        if sign not in (+1, -1):
            raise ValueError("sign must be +1 or -1")
        if n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.ops = ops
        self.dt = dt
        self.n_steps = n_steps
        self.sign = sign
        self.system = ShiftedSystem(ops.mass, ops.stiffness, ops.damping_gram,
                                    alpha=1.0, beta=-sign * 1j * dt, gamma=dt)

    def step(self, q: np.ndarray, load: np.ndarray | None = None) -> np.ndarray:
        rhs = self.ops.mass.matvec(q)
        if load is not None:
            rhs = rhs + self.dt * load
        return self.system.solve(rhs)


def run_schrodinger(stepper: SchrodingerStepper, q0: np.ndarray,
                    forcing: np.ndarray | None = None,
                    keep_history: bool = False):
    """Advance the Schrodinger scheme n_steps times.

    forcing, when given, holds the load vectors f^1..f^K as rows.  Returns
    the final state, or (final, history) with history of shape (K+1, n)
    when keep_history is set.
    """
    n = stepper.ops.n
    q = np.asarray(q0, dtype=complex)
    if q.shape != (n,):
        raise ValueError(f"q0 has shape {q.shape}, expected ({n},)")
    if forcing is not None and forcing.shape != (stepper.n_steps, n):
        raise ValueError("forcing must have one load vector per step")
    history = np.empty((stepper.n_steps + 1, n), dtype=complex) if keep_history else None
    if keep_history:
        history[0] = q
    for k in range(1, stepper.n_steps + 1):
        q = stepper.step(q, None if forcing is None else forcing[k - 1])
        if keep_history:
            history[k] = q
    return (q, history) if keep_history else q


class WaveStepper:
    """Implicit two-step stepper for the damped wave observer.

    Each step solves (M + dt^2 K + dt B) p^k = (2M + dt B) p^{k-1} - M p^{k-2}
    + dt^2 f^k; the startup is p^1 = p^0 + dt * p1.
    """

    def __init__(self, ops: FemOperators, dt: float, n_steps: int):
        if n_steps < 2:
            raise ValueError("the two-step wave scheme needs n_steps >= 2")
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.ops = ops
        self.dt = dt
        self.n_steps = n_steps
        self.system = ShiftedSystem(ops.mass, ops.stiffness, ops.damping_gram,
                                    alpha=1.0, beta=dt * dt, gamma=dt)
        self._prev_weight = SymTridiag(
            2.0 * ops.mass.diag + dt * ops.damping_gram.diag,
            2.0 * ops.mass.off + dt * ops.damping_gram.off,
        )

    def step(self, p_prev: np.ndarray, p_prev2: np.ndarray,
             load: np.ndarray | None = None) -> np.ndarray:
        rhs = self._prev_weight.matvec(p_prev) - self.ops.mass.matvec(p_prev2)
        if load is not None:
            rhs = rhs + (self.dt * self.dt) * load
        return self.system.solve(rhs)


def run_wave(stepper: WaveStepper, p0: np.ndarray, p1: np.ndarray,
             forcing: np.ndarray | None = None, keep_history: bool = False):
    """Advance the wave scheme n_steps times from (p0, p1) = (position, velocity).

    Returns the final WaveState (p^K, D_t p^K), or (final, positions,
    velocities) with positions of shape (K+1, n) and the backward-difference
    velocities D_t p^k for k = 1..K when keep_history is set.
    """
    n = stepper.ops.n
    p_prev2 = np.asarray(p0, dtype=float)
    vel0 = np.asarray(p1, dtype=float)
    if p_prev2.shape != (n,) or vel0.shape != (n,):
        raise ValueError(f"states must have shape ({n},)")
    if forcing is not None and forcing.shape != (stepper.n_steps, n):
        raise ValueError("forcing must have one load vector per step")
    dt = stepper.dt
    p_prev = p_prev2 + dt * vel0
    history = None
    velocities = None
    if keep_history:
        history = np.empty((stepper.n_steps + 1, n))
        velocities = np.empty((stepper.n_steps, n))
        history[0] = p_prev2
        history[1] = p_prev
        velocities[0] = vel0
    for k in range(2, stepper.n_steps + 1):
        p = stepper.step(p_prev, p_prev2, None if forcing is None else forcing[k - 1])
        p_prev2, p_prev = p_prev, p
        if keep_history:
            history[k] = p
            velocities[k - 1] = (p - p_prev2) / dt
    final = WaveState(p_prev, (p_prev - p_prev2) / dt)
    return (final, history, velocities) if keep_history else final


@dataclass(frozen=True)
class ObservationTrace:
    """Time-indexed nodal samples of the masked output on [0, tau]."""

    equation: str
    samples: np.ndarray          # (K+1, n); complex for schrodinger
    tau: float
    dt: float
    provenance: str = "clean"

    def __post_init__(self):
        if self.equation not in ("schrodinger", "wave"):
            raise ValueError(f"unknown equation {self.equation!r}")
        samples = np.asarray(self.samples)
        if samples.ndim != 2 or samples.shape[0] < 2:
            raise ValueError("samples must be a (K+1, n) array with K >= 1")
        object.__setattr__(self, "samples", samples)
        if abs(self.n_steps * self.dt - self.tau) > 1e-9 * max(self.tau, 1.0):
            raise ValueError("tau must equal K * dt")

    @property
    def n_steps(self) -> int:
        return self.samples.shape[0] - 1

    @property
    def n(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class EtaEstimate:
    """Power-iteration estimate of the round-trip contraction factor."""

    value: float
    converged: bool
    iterations: int
    history: tuple = ()


def power_iteration(apply_op: Callable, norm: Callable, start,
                    tol: float = 1e-6, max_iter: int = 60) -> EtaEstimate:
    """Dominant-ratio estimate ||A v|| / ||v|| for a linear operator.

    For a self-adjoint positive operator in the chosen inner product (the
    Schrodinger round trip) the limit is the operator norm; otherwise it is
    the dominant-mode ratio.  Non-convergence within max_iter returns the
    last ratio with converged = False rather than raising.
    """
    if not 0.0 < tol < 1.0:
        raise ValueError("tol must lie in (0, 1)")
    if max_iter < 2:
        raise ValueError("max_iter must be at least 2")
    nrm = norm(start)
    if nrm == 0.0:
        raise ValueError("start vector must be nonzero")
    v = (1.0 / nrm) * start
    ratios = []
    prev = None
    for it in range(1, max_iter + 1):
        w = apply_op(v)
        ratio = norm(w)
        ratios.append(ratio)
        if ratio == 0.0:
            return EtaEstimate(0.0, True, it, tuple(ratios))
        if prev is not None and abs(ratio - prev) <= tol * ratio:
            return EtaEstimate(ratio, True, it, tuple(ratios))
        prev = ratio
        v = (1.0 / ratio) * w
    return EtaEstimate(prev, False, max_iter, tuple(ratios))


def choose_truncation(mode: str, *, h: float, theta: float, eta_hat: float,
                      dt: float | None = None) -> int:
    """Number of Neumann terms matching the discretization error.

    semi mode: ceil(theta * ln h / ln eta); full mode:
    ceil(ln(h^theta + dt) / ln eta); both floored at 0.
    """
    if mode not in ("semi", "full"):
        raise ValueError(f"mode must be 'semi' or 'full', got {mode!r}")
    if not h > 0:
        raise ValueError("h must be positive")
    if not 0.0 < eta_hat < 1.0:
        raise ValueError(
            f"contraction not certified: eta_hat = {eta_hat} is not in (0, 1)"
        )
    if mode == "semi":
        ratio = theta * math.log(h) / math.log(eta_hat)
    else:
        if dt is None or not dt > 0:
            raise ValueError("full mode needs dt > 0")
        ratio = math.log(h ** theta + dt) / math.log(eta_hat)
    return max(0, math.ceil(ratio))


@dataclass(frozen=True)
class ReconstructionResult:
    """Truncated Neumann sum plus iteration diagnostics."""

    estimate: np.ndarray | WaveState
    n_used: int
    eta_hat: float | None
    increment_norms: tuple
    step_count: int


class BackAndForth:
    """Observer pair and round-trip operator for one discretization.

    Holds the prefactored steppers for a (mesh, dt, n_steps) triple; all
    methods are pure given the immutable steppers, so one instance can be
    shared across workers.
    """

    def __init__(self, equation: str, ops: FemOperators, dt: float, n_steps: int):
        if equation not in ("schrodinger", "wave"):
            raise ValueError(f"unknown equation {equation!r}")
        self.equation = equation
        self.ops = ops
        self.dt = dt
        self.n_steps = n_steps
        if equation == "schrodinger":
            self._fwd = SchrodingerStepper(ops, dt, n_steps, sign=+1)
            self._bwd = SchrodingerStepper(ops, dt, n_steps, sign=-1)
        else:
            self._wave = WaveStepper(ops, dt, n_steps)

    # -- X geometry ---------------------------------------------------------

    def x_inner(self, u, v):
        if self.equation == "schrodinger":
            return np.vdot(v, self.ops.mass.matvec(u))
        return (np.vdot(v.pos, self.ops.stiffness.matvec(u.pos))
                + np.vdot(v.vel, self.ops.mass.matvec(u.vel)))

    def x_norm(self, u) -> float:
        return math.sqrt(max(np.real(self.x_inner(u, u)), 0.0))

    def zero_state(self):
        n = self.ops.n
        return np.zeros(n, dtype=complex) if self.equation == "schrodinger" \
            else WaveState.zeros(n)

    def random_state(self, seed: int):
        rng = np.random.default_rng(seed)
        n = self.ops.n
        if self.equation == "schrodinger":
            return rng.standard_normal(n) + 1j * rng.standard_normal(n)
        return WaveState(rng.standard_normal(n), rng.standard_normal(n))

    # -- observers ----------------------------------------------------------

    def _check_trace(self, trace: ObservationTrace):
        if trace.equation != self.equation:
            raise ValueError(f"trace is for {trace.equation!r}, not {self.equation!r}")
        if trace.n != self.ops.n:
            raise ValueError(
                f"trace has {trace.n} nodes, reconstruction mesh has {self.ops.n}"
            )
        if trace.n_steps != self.n_steps:
            raise ValueError(
                f"trace has {trace.n_steps} steps, stepper has {self.n_steps}"
            )

    def forward_observer(self, trace: ObservationTrace):
        """Run the damped observer from rest, driven by the trace; state at tau."""
        self._check_trace(trace)
        loads = _matmat(self.ops.output_gram, trace.samples[1:])
        if self.equation == "schrodinger":
            return run_schrodinger(self._fwd, self.zero_state(), loads)
        return run_wave(self._wave, np.zeros(self.ops.n), np.zeros(self.ops.n), loads)

    def backward_observer(self, trace: ObservationTrace, final_state):
        """Run the backward observer from the forward output; state at time 0.

        Realized as a time-reversed initial value problem: the Schrodinger
        pass uses the opposite-sign stepper on the time-reversed trace; the
        wave pass flips the velocity, runs the damped stepper with negated
        time-reversed forcing and flips the returned velocity.
        """
        self._check_trace(trace)
        reversed_samples = trace.samples[::-1][1:]   # y^{K-k}, k = 1..K
        loads = _matmat(self.ops.output_gram, reversed_samples)
        if self.equation == "schrodinger":
            return run_schrodinger(self._bwd, final_state, loads)
        out = run_wave(self._wave, final_state.pos, -final_state.vel, -loads)
        return WaveState(out.pos, -out.vel)

    def first_iterate(self, trace: ObservationTrace):
        """The state the Neumann series starts from: backward(forward(trace))."""
        return self.backward_observer(trace, self.forward_observer(trace))

    def apply_L(self, state):
        """One zero-forcing round trip (forward then backward pass)."""
        if self.equation == "schrodinger":
            up = run_schrodinger(self._fwd, state)
            return run_schrodinger(self._bwd, up)
        up = run_wave(self._wave, state.pos, state.vel)
        down = run_wave(self._wave, up.pos, -up.vel)
        return WaveState(down.pos, -down.vel)

    # -- contraction factor and reconstruction ------------------------------

    def estimate_eta(self, tol: float = 1e-6, max_iter: int = 60,
                     seed: int = 0) -> EtaEstimate:
        """Power iteration for the round-trip contraction factor in X."""
        start = self.random_state(seed)
        return power_iteration(self.apply_L, self.x_norm, start, tol, max_iter)

    def neumann_reconstruct(self, trace: ObservationTrace, *,
                            n_terms: int | None = None,
                            eta_hat: float | None = None,
                            theta: float = 1.0) -> ReconstructionResult:
        """Accumulate sum_{n=0}^{N} L^n of the first iterate.

        With n_terms = None the truncation length comes from the full-mode
        rule evaluated at (h, dt, eta_hat), floored at 1 and capped at 200.
        """
        z = self.first_iterate(trace)
        if n_terms is None:
            if eta_hat is None:
                raise ValueError("automatic truncation needs eta_hat")
            n_terms = choose_truncation("full", h=self.ops.mesh.h, dt=self.dt,
                                        theta=theta, eta_hat=eta_hat)
            n_terms = max(n_terms, 1)
            if n_terms > AUTO_N_CAP:
                warnings.warn(
                    f"truncation rule asked for N = {n_terms}; capping at "
                    f"{AUTO_N_CAP} (eta_hat = {eta_hat} is close to 1)",
                    RuntimeWarning, stacklevel=2,
                )
                n_terms = AUTO_N_CAP
        elif n_terms < 0:
            raise ValueError("n_terms must be nonnegative")
        increments = [self.x_norm(z)]
        acc = z
        term = z
        for _ in range(n_terms):
            term = self.apply_L(term)
            acc = acc + term
            increments.append(self.x_norm(term))
        steps = 2 * self.n_steps * (n_terms + 1)
        return ReconstructionResult(estimate=acc, n_used=n_terms,
                                    eta_hat=eta_hat,
                                    increment_norms=tuple(increments),
                                    step_count=steps)
