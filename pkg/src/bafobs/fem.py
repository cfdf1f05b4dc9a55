"""P1 finite elements on an interval with homogeneous Dirichlet conditions.

Provides the uniform mesh, assembly of the mass/stiffness/observation
matrices, load vectors, the H^1_0-orthogonal projection onto the element
space, and the discrete fractional-power norms used by the error analysis.
All quadrature is 4-point Gauss-Legendre per element so that the assembled
operators and the load vectors commit the same variational crime (none, for
the polynomial integrands).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .linalg import ShiftedSystem, SymTridiag

# 4-point Gauss-Legendre on [0, 1]: exact for polynomials of degree <= 7.
_GL4_X = 0.5 + 0.5 * np.array([
    -0.8611363115940526, -0.3399810435848563,
    0.3399810435848563, 0.8611363115940526,
])
_GL4_W = 0.5 * np.array([
    0.3478548451374538, 0.6521451548625461,
    0.6521451548625461, 0.3478548451374538,
])

# 8-point rule for reference integrals of closed-form fields (degree <= 15).
_GL8_X = 0.5 + 0.5 * np.array([
    -0.9602898564975363, -0.7966664774136267, -0.5255324099163290,
    -0.1834346424956498, 0.1834346424956498, 0.5255324099163290,
    0.7966664774136267, 0.9602898564975363,
])
_GL8_W = 0.5 * np.array([
    0.1012285362903763, 0.2223810344533745, 0.3137066458778873,
    0.3626837833783620, 0.3626837833783620, 0.3137066458778873,
    0.2223810344533745, 0.1012285362903763,
])


@dataclass(frozen=True)
class Mesh1D:
    """Uniform partition of (0, length) with n_cells elements."""

    n_cells: int
    length: float = 1.0

    def __post_init__(self):
        if self.n_cells < 2:
            raise ValueError("n_cells must be at least 2")
        if not self.length > 0:
            raise ValueError("length must be positive")

    @property
    def h(self) -> float:
        return self.length / self.n_cells

    @property
    def n(self) -> int:
        """Number of interior nodes (the dimension of the element space)."""
        return self.n_cells - 1

    @property
    def interior_nodes(self) -> np.ndarray:
        return self.h * np.arange(1, self.n_cells)

    def quadrature_points(self, order8: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """All Gauss points and weights on the mesh, element by element."""
        xs, ws = (_GL8_X, _GL8_W) if order8 else (_GL4_X, _GL4_W)
        lefts = self.h * np.arange(self.n_cells)
        pts = (lefts[:, None] + self.h * xs[None, :]).ravel()
        wts = np.tile(self.h * ws, self.n_cells)
        return pts, wts


def _smoothstep(t: np.ndarray, m: int) -> np.ndarray:
    """Polynomial step on [0,1] with m vanishing derivatives at both ends."""
    t = np.clip(t, 0.0, 1.0)
    if m == 1:
        return t * t * (3.0 - 2.0 * t)
    if m == 2:
        return t ** 3 * (10.0 + t * (-15.0 + 6.0 * t))
    if m == 3:
        return t ** 4 * (35.0 + t * (-84.0 + t * (70.0 - 20.0 * t)))
    raise ValueError(f"unsupported smoothness order {m}")


@dataclass(frozen=True)
class ObservationProfile:
    """Multiplicative observation weight c(x).

    The default shape is a plateau at 1 on the middle half of [a, b] with
    smoothstep ramps of order m on the outer quarters, so c is C^m on the
    whole interval, vanishes (with m derivatives) outside [a, b] and sits in
    [0, 1] everywhere.  ``constant`` builds the degenerate c == value weights
    used by tests and whole-domain-observation experiments.
    """

    a: float = 0.2
    b: float = 0.8
    smoothness: int = 2
    const: float | None = None

    def __post_init__(self):
        if self.const is None:
            if not self.a < self.b:
                raise ValueError("need a < b")
            if self.smoothness not in (1, 2, 3):
                raise ValueError("smoothness must be 1, 2 or 3")
        elif not 0.0 <= self.const <= 1.0:
            raise ValueError("constant weight must lie in [0, 1]")

    @classmethod
    def constant(cls, value: float) -> "ObservationProfile":
        return cls(const=value)

    @property
    def ramp(self) -> float:
        return 0.25 * (self.b - self.a)

    def weight(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.const is not None:
            return np.full_like(x, self.const)
        r = self.ramp
        up = _smoothstep((x - self.a) / r, self.smoothness)
        down = _smoothstep((self.b - x) / r, self.smoothness)
        return np.where(x < self.a + 2 * r, up, down) * (
            (x > self.a) & (x < self.b)
        )


@dataclass(frozen=True)
class FemOperators:
    """Assembled interior-node matrices for one mesh/profile pair.

    mass and stiffness realize the L2 and H^1_0 inner products; damping_gram
    is the C*C Gram (weight c^2) that supplies the observer damping;
    output_gram (weight c) maps nodal output samples to C*-loads.
    """

    mesh: Mesh1D
    profile: ObservationProfile
    mass: SymTridiag
    stiffness: SymTridiag
    damping_gram: SymTridiag
    output_gram: SymTridiag

    @property
    def n(self) -> int:
        return self.mesh.n


def _weighted_mass(mesh: Mesh1D, w_at_q: np.ndarray) -> SymTridiag:
    """Assemble the matrix with entries int w(x) phi_i phi_j dx by quadrature."""
    h = mesh.h
    n = mesh.n
    # local basis values at the 4 Gauss points of the reference element
    tl = 1.0 - _GL4_X
    tr = _GL4_X
    wq = _GL4_W * h
    per = w_at_q.reshape(mesh.n_cells, _GL4_X.size)
    ll = per @ (wq * tl * tl)       # left-vertex self term, per element
    rr = per @ (wq * tr * tr)       # right-vertex self term
    lr = per @ (wq * tl * tr)       # coupling term
    # interior node i (1..n) is the right vertex of element i-1 and the left
    # vertex of element i; element i couples nodes i and i+1
    diag = rr[:n] + ll[1:]
    off = lr[1:n] if n > 1 else np.zeros(0)
    return SymTridiag(diag, off)


def assemble(mesh: Mesh1D, profile: ObservationProfile) -> FemOperators:
    """Assemble mass, stiffness and the two observation Grams."""
    if profile.const is None:
        if not (0.0 < profile.a and profile.b < mesh.length):
            raise ValueError(
                f"observation window [{profile.a}, {profile.b}] must lie strictly "
                f"inside (0, {mesh.length})"
            )
    h = mesh.h
    n = mesh.n
    mass = SymTridiag(np.full(n, 2.0 * h / 3.0), np.full(max(n - 1, 0), h / 6.0))
    stiffness = SymTridiag(np.full(n, 2.0 / h), np.full(max(n - 1, 0), -1.0 / h))
    pts, _ = mesh.quadrature_points()
    c = profile.weight(pts)
    damping = _weighted_mass(mesh, c * c)
    output = _weighted_mass(mesh, c)
    return FemOperators(mesh=mesh, profile=profile, mass=mass,
                        stiffness=stiffness, damping_gram=damping,
                        output_gram=output)


def load_vector(mesh: Mesh1D, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Entries int f phi_i dx, same Gauss rule as assembly."""
    h = mesh.h
    n = mesh.n
    pts, _ = mesh.quadrature_points()
    vals = np.asarray(f(pts))
    per = vals.reshape(mesh.n_cells, _GL4_X.size)
    wq = _GL4_W * h
    contrib_left = per @ (wq * (1.0 - _GL4_X))
    contrib_right = per @ (wq * _GL4_X)
    out = np.zeros(n, dtype=vals.dtype)
    out += contrib_right[:n]
    out += contrib_left[1:]
    return out


def interpolate(mesh: Mesh1D, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Nodal values of f at the interior nodes."""
    return np.asarray(f(mesh.interior_nodes))


@dataclass(frozen=True)
class FieldSpec:
    """Closed-form field on [0, length] with Dirichlet boundary values.

    kinds:
      sine -- finite sum sum_k coeff[k-1] sin(k pi x / L); lies in D(A0^s)
              for every s, so it is admissible as a reconstruction target.
      bump -- amp * (x/L)^3 (1 - x/L)^3, C^infinity, vanishing at the
              boundary together with its second derivative.
      kink -- |x - c|^beta minus the linear interpolant of its boundary
              values; barely H^1 for beta slightly above 1/2.  Exploration
              only ("unsafe"): outside the regularity class the error
              analysis assumes for reconstruction targets.
    """

    kind: str = "sine"
    coefficients: tuple = (1.0,)
    amplitude: float = 1.0
    center: float = 0.5 ** 0.5
    exponent: float = 0.55
    length: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sine", "bump", "kink"):
            raise ValueError(f"unknown field kind {self.kind!r}")

    @property
    def unsafe(self) -> bool:
        return self.kind == "kink"

    @property
    def is_complex(self) -> bool:
        return self.kind == "sine" and any(
            isinstance(c, complex) and c.imag != 0.0 for c in self.coefficients
        )

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        L = self.length
        if self.kind == "sine":
            dtype = complex if self.is_complex else float
            out = np.zeros_like(x, dtype=dtype)
            for k, ck in enumerate(self.coefficients, start=1):
                out += ck * np.sin(k * math.pi * x / L)
            return out
        if self.kind == "bump":
            s = x / L
            return self.amplitude * (s * (1.0 - s)) ** 3
        c, beta = self.center, self.exponent
        lin = (1.0 - x / L) * c ** beta + (x / L) * (L - c) ** beta
        return np.abs(x - c) ** beta - lin

    def derivative(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        L = self.length
        if self.kind == "sine":
            dtype = complex if self.is_complex else float
            out = np.zeros_like(x, dtype=dtype)
            for k, ck in enumerate(self.coefficients, start=1):
                out += ck * (k * math.pi / L) * np.cos(k * math.pi * x / L)
            return out
        if self.kind == "bump":
            s = x / L
            return self.amplitude * 3.0 * (s * (1.0 - s)) ** 2 * (1.0 - 2.0 * s) / L
        c, beta = self.center, self.exponent
        lin_slope = ((L - c) ** beta - c ** beta) / L
        return beta * np.sign(x - c) * np.abs(x - c) ** (beta - 1.0) - lin_slope


def project_pi_h(mesh: Mesh1D, ops: FemOperators, phi: FieldSpec) -> np.ndarray:
    """H^1_0-orthogonal projection of phi onto the P1 space.

    Solves (u, v)_K = int phi' v' for all hat functions v, with the right
    side evaluated by the assembly quadrature applied to phi'.
    """
    h = mesh.h
    pts, _ = mesh.quadrature_points()
    dvals = np.asarray(phi.derivative(pts))
    per = dvals.reshape(mesh.n_cells, _GL4_X.size)
    wq = _GL4_W  # gradient of hats is +-1/h, the h from dx cancels
    elem = per @ wq
    n = mesh.n
    rhs = np.zeros(n, dtype=dvals.dtype)
    rhs += elem[:n]       # phi_i' = +1/h on element i-1 (left neighbour)
    rhs -= elem[1:]       # phi_i' = -1/h on element i
    sys = ShiftedSystem(ops.stiffness)
    if np.iscomplexobj(rhs):
        return sys.solve(rhs.real) + 1j * sys.solve(rhs.imag)
    return sys.solve(rhs)


SUPPORTED_ALPHAS = (0.0, 0.5, 1.0, 1.5, 2.0)


def norm_alpha(ops: FemOperators, u: np.ndarray, alpha: float) -> float:
    """Discrete D(A0^alpha) norm of a coefficient vector.

    alpha = 0 is the M-norm, alpha = 1/2 the K-norm; higher orders apply the
    discrete operator w = M^-1 K u and recurse, so no eigendecomposition is
    needed at production scale.
    """
    u = np.asarray(u)
    if u.shape != (ops.n,):
        raise ValueError(f"vector has shape {u.shape}, expected ({ops.n},)")
    if alpha not in SUPPORTED_ALPHAS:
        raise ValueError(f"unsupported alpha {alpha}; use one of {SUPPORTED_ALPHAS}")
    if alpha == 0.0:
        return math.sqrt(max(np.real(np.vdot(u, ops.mass.matvec(u))), 0.0))
    if alpha == 0.5:
        return math.sqrt(max(np.real(np.vdot(u, ops.stiffness.matvec(u))), 0.0))
    msys = ShiftedSystem(ops.mass)
    ku = ops.stiffness.matvec(u)
    if np.iscomplexobj(ku):
        w = msys.solve(ku.real) + 1j * msys.solve(ku.imag)
    else:
        w = msys.solve(ku)
    return norm_alpha(ops, w, alpha - 1.0)
