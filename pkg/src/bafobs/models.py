"""Problem instances and synthetic observation generation.

Observations are produced by propagating the conservative system exactly in
time through the pencil eigendecomposition, optionally on a refined mesh, so
the data never share the time discretization (and, with refine > 1, the
space discretization) of the reconstruction -- the usual inverse-crime
safeguards.  Bounded uniform noise models the data-error terms of the
convergence estimates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .fem import FemOperators, FieldSpec, Mesh1D, ObservationProfile, assemble
from .linalg import pencil_eigs
from .observers import ObservationTrace

TRACE_FORMAT = "bafobs-trace-1"


@dataclass(frozen=True)
class NoiseSpec:
    """Per-node, per-sample additive uniform noise on [-amplitude, amplitude]."""

    amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.amplitude < 0.0:
            raise ValueError("amplitude must be nonnegative")


@dataclass(frozen=True)
class ProblemInstance:
    """One concrete inverse problem: geometry, window, horizon and truth."""

    equation: str
    mesh: Mesh1D
    profile: ObservationProfile
    tau: float
    n_steps: int
    truth: FieldSpec | tuple[FieldSpec, FieldSpec]
    allow_unsafe_truth: bool = False

    def __post_init__(self):
        if self.equation not in ("schrodinger", "wave"):
            raise ValueError(f"unknown equation {self.equation!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        min_steps = 2 if self.equation == "wave" else 1
        if self.n_steps < min_steps:
            raise ValueError(f"n_steps must be at least {min_steps}")
        fields = self.truth if isinstance(self.truth, tuple) else (self.truth,)
        if self.equation == "wave" and len(fields) != 2:
            raise ValueError("wave truth must be a (position, velocity) pair")
        if self.equation == "schrodinger" and len(fields) != 1:
            raise ValueError("schrodinger truth must be a single field")
        for f in fields:
            if f.unsafe and not self.allow_unsafe_truth:
                raise ValueError(
                    f"truth kind {f.kind!r} is outside the admissible regularity "
                    "class; pass allow_unsafe_truth=True to use it anyway"
                )

    @property
    def dt(self) -> float:
        return self.tau / self.n_steps


@dataclass(frozen=True)
class ExactTrajectory:
    """Unmasked pencil-propagated fields, sampled on the (fine) mesh."""

    mesh: Mesh1D
    operators: FemOperators
    times: np.ndarray
    states: np.ndarray                    # schrodinger field / wave position
    velocities: np.ndarray | None = None  # wave only


def propagate_exact(instance: ProblemInstance, refine: int = 1) -> ExactTrajectory:
    """Exact-in-time evolution of the conservative system on a refined mesh."""
    if refine < 1:
        raise ValueError("refine must be at least 1")
    fine = Mesh1D(n_cells=instance.mesh.n_cells * refine, length=instance.mesh.length)
    ops = assemble(fine, instance.profile)
    pencil = pencil_eigs(ops.stiffness, ops.mass)
    lam = pencil.values
    V = pencil.vectors
    x = fine.interior_nodes
    times = instance.dt * np.arange(instance.n_steps + 1)

    def coords(nodal: np.ndarray) -> np.ndarray:
        return V.T @ ops.mass.matvec(nodal)

    if instance.equation == "schrodinger":
        z0 = instance.truth.value(x).astype(complex)
        c = coords(z0)
        phases = np.exp(1j * times[:, None] * lam[None, :])
        states = (phases * c[None, :]) @ V.T
        return ExactTrajectory(fine, ops, times, states)

    w0, w1 = instance.truth
    a = coords(w0.value(x))
    b = coords(w1.value(x))
    om = np.sqrt(lam)
    wt = times[:, None] * om[None, :]
    positions = (np.cos(wt) * a[None, :] + np.sin(wt) / om[None, :] * b[None, :]) @ V.T
    velocities = (-om[None, :] * np.sin(wt) * a[None, :] + np.cos(wt) * b[None, :]) @ V.T
    return ExactTrajectory(fine, ops, times, positions, velocities)


def generate_observation(instance: ProblemInstance, refine: int = 1,
                         noise: NoiseSpec | None = None) -> ObservationTrace:
    """Masked, restricted, optionally noisy output samples y^0..y^K.

    The observed field (the state for Schrodinger, the velocity for the
    wave) is multiplied nodally by the observation weight on the fine mesh,
    then restricted to the reconstruction mesh by nodal injection.
    """
    traj = propagate_exact(instance, refine)
    observed = traj.states if instance.equation == "schrodinger" else traj.velocities
    weights = instance.profile.weight(traj.mesh.interior_nodes)
    masked = observed * weights[None, :]
    samples = masked[:, refine - 1::refine]
    provenance = "mesh-refined" if refine > 1 else "clean"
    trace = ObservationTrace(equation=instance.equation, samples=samples,
                             tau=instance.tau, dt=instance.dt,
                             provenance=provenance)
    if noise is not None:
        trace = add_noise(trace, noise)
    return trace


def add_noise(trace: ObservationTrace, noise: NoiseSpec) -> ObservationTrace:
    """Return a perturbed copy of the trace; amplitude 0 returns it unchanged.

    Complex samples get independent uniform perturbations on the real and
    imaginary parts.  Deterministic for a given seed.
    """
    if noise.amplitude == 0.0:
        return trace
    rng = np.random.default_rng(noise.seed)
    eps = noise.amplitude
    shape = trace.samples.shape
    if np.iscomplexobj(trace.samples):
        delta = rng.uniform(-eps, eps, shape) + 1j * rng.uniform(-eps, eps, shape)
    else:
        delta = rng.uniform(-eps, eps, shape)
    return replace(trace, samples=trace.samples + delta, provenance="noisy")


# -- trace files -------------------------------------------------------------
#
# One self-describing text file per trace: a JSON header line, then K+1 rows
# of node-ordered samples, 17 significant digits, comma-separated.  Complex
# traces interleave (re, im) per node.


def _format_row(row: np.ndarray) -> str:
    if np.iscomplexobj(row):
        flat = np.empty(2 * row.size)
        flat[0::2] = row.real
        flat[1::2] = row.imag
    else:
        flat = row
    return ",".join(f"{v:.17g}" for v in flat)


def write_trace(path, trace: ObservationTrace, instance: ProblemInstance,
                refine: int, noise: NoiseSpec | None = None,
                config: dict | None = None) -> dict:
    """Write the trace with full provenance header; returns the header dict."""
    profile = instance.profile
    header = {
        "format": TRACE_FORMAT,
        "equation": trace.equation,
        "length": instance.mesh.length,
        "n_cells": instance.mesh.n_cells,
        "tau": trace.tau,
        "dt": trace.dt,
        "n_steps": trace.n_steps,
        "complex": bool(np.iscomplexobj(trace.samples)),
        "profile": {
            "a": profile.a, "b": profile.b,
            "smoothness": profile.smoothness, "constant": profile.const,
        },
        "refine": refine,
        "noise": {"amplitude": noise.amplitude if noise else 0.0,
                  "seed": noise.seed if noise else 0},
        "provenance": trace.provenance,
    }
    if config is not None:
        header["config"] = config
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for row in trace.samples:
            fh.write(_format_row(row) + "\n")
    return header


def read_trace(path) -> tuple[ObservationTrace, dict]:
    """Read a trace file; returns (trace, header)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != TRACE_FORMAT:
            raise ValueError(f"unrecognized trace format {header.get('format')!r}")
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            vals = np.array([float(v) for v in line.split(",")])
            if header["complex"]:
                vals = vals[0::2] + 1j * vals[1::2]
            rows.append(vals)
    samples = np.array(rows)
    expected = header["n_steps"] + 1
    if samples.shape[0] != expected:
        raise ValueError(f"trace has {samples.shape[0]} rows, header says {expected}")
    trace = ObservationTrace(equation=header["equation"], samples=samples,
                             tau=header["tau"], dt=header["dt"],
                             provenance=header.get("provenance", "clean"))
    return trace, header
