"""Radial operators N, L0, L0*, N0, H and numerical probes of their properties.

Every operator is stored in the "y-form": a sparse matrix ``M`` together with a
metric power ``p`` such that the physical operator acts as ``r^{-p} (M f)``,
with ``r`` taken at the output nodes.  With this convention the quadratic form
of a symmetric operator in ``L²(r dr)`` is ``dy · fᵀ M g``, so discrete
self-adjointness is plain matrix symmetry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg as sla
from scipy import sparse
from scipy.sparse import linalg as spla

from .errors import ConfigurationError, NumericalError
from .grid_geometry import LogRadialGrid, harmonic_components
from .modulation import OrthogonalityKind


class OperatorKind(str, Enum):
    N = "N"
    L0 = "L0"
    L0_ADJOINT = "L0_adjoint"
    N0 = "N0"
    H = "H"
    FREE = "free"


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    grid: LogRadialGrid
    matrix: sparse.csr_matrix
    kind: OperatorKind
    m: int
    metric_power: int
    out_r: np.ndarray = field(repr=False)
    in_r: np.ndarray = field(repr=False)
    angular_index: float | None = None

    def apply(self, f: np.ndarray) -> np.ndarray:
        return (self.matrix @ f) / self.out_r**self.metric_power

    def compose(self, other: "OperatorMatrix") -> "OperatorMatrix":
        """The product ``self ∘ other`` in y-form."""
        inner = sparse.diags(1.0 / other.out_r**other.metric_power)
        mat = sparse.csr_matrix(self.matrix @ inner @ other.matrix)
        return OperatorMatrix(self.grid, mat, self.kind, self.m, self.metric_power,
                              self.out_r, other.in_r)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def midpoints(grid: LogRadialGrid) -> np.ndarray:
    y = grid.y_values
    return np.exp(0.5 * (y[:-1] + y[1:]))


def _l0_yform(m: int, grid: LogRadialGrid) -> sparse.csr_matrix:
    """``ρ L0 = h1 ∂_y (·/h1)`` as a two-point difference onto cell midpoints."""
    n, h = grid.n_points, grid.dy
    h1, _ = harmonic_components(m, grid.r_values)
    h1_mid, _ = harmonic_components(m, midpoints(grid))
    rows = np.repeat(np.arange(n - 1), 2)
    cols = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1).ravel()
    vals = np.stack([-h1_mid / (h * h1[:-1]), h1_mid / (h * h1[1:])], axis=1).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n - 1, n))


def _n_yform(m: int, grid: LogRadialGrid) -> sparse.csr_matrix:
    """``ρ² N = -h1^{-1} ∂_y (h1² ∂_y (·/h1))`` in flux form, zero flux past the ends."""
    n, h = grid.n_points, grid.dy
    h1, _ = harmonic_components(m, grid.r_values)
    h1_mid, _ = harmonic_components(m, midpoints(grid))
    flux = h1_mid**2 / h**2
    upper = -flux / (h1[:-1] * h1[1:])
    diag = np.zeros(n)
    diag[:-1] += flux / h1[:-1] ** 2
    diag[1:] += flux / h1[1:] ** 2
    return sparse.diags([upper, diag, upper], [-1, 0, 1], format="csr")


def second_difference(grid: LogRadialGrid, order: int = 2) -> sparse.csr_matrix:
    """Symmetric ``∂_y²`` with homogeneous Dirichlet data beyond the ends."""
    n, h = grid.n_points, grid.dy
    if order == 2:
        return sparse.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1],
                            format="csr") / h**2
    if order == 4:
        bands = [-np.ones(n - 2), 16.0 * np.ones(n - 1), -30.0 * np.ones(n),
                 16.0 * np.ones(n - 1), -np.ones(n - 2)]
        return sparse.diags(bands, [-2, -1, 0, 1, 2], format="csr") / (12.0 * h**2)
    raise ConfigurationError(f"unsupported difference order {order}")


def h_potential(m: int, r: np.ndarray) -> np.ndarray:
    """``r² (1/r² + V) = 1 + m² − 2m h3``, the inverse-square strength of H."""
    _, h3 = harmonic_components(m, r)
    return 1.0 + m * m - 2.0 * m * h3


def build_operator(kind, m: int, grid: LogRadialGrid, angular_index: float | None = None,
                   order: int = 2) -> OperatorMatrix:
    try:
        kind = OperatorKind(kind)
    except ValueError:
        raise ConfigurationError(f"unknown operator kind {kind!r}") from None
    if int(m) != m or m < 1:
        raise ConfigurationError("m must be a positive integer")
    r = grid.r_values
    if kind is OperatorKind.N:
        return OperatorMatrix(grid, _n_yform(m, grid), kind, m, 2, r, r)
    if kind is OperatorKind.L0:
        return OperatorMatrix(grid, _l0_yform(m, grid), kind, m, 1, midpoints(grid), r)
    if kind is OperatorKind.L0_ADJOINT:
        mid = midpoints(grid)
        mat = sparse.csr_matrix(_l0_yform(m, grid).T @ sparse.diags(mid))
        return OperatorMatrix(grid, mat, kind, m, 2, r, mid)
    lap = second_difference(grid, order)
    if kind is OperatorKind.N0:
        potential = np.full(grid.n_points, float(m * m))
    elif kind is OperatorKind.H:
        potential = h_potential(m, r)
    else:
        if angular_index is None:
            raise ConfigurationError("free radial operator needs an angular index")
        potential = np.full(grid.n_points, float(angular_index) ** 2)
    mat = sparse.csr_matrix(-lap + sparse.diags(potential))
    return OperatorMatrix(grid, mat, kind, m, 2, r, r, angular_index)


@dataclass(frozen=True)
class RepulsivityReport:
    m: int
    min_one_plus_r2V: float
    max_one_plus_r2V: float
    min_repulsivity: float
    nu_constant: float
    lower_bound: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def repulsivity_profile(m: int, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nodewise ``1 + r²V`` and ``1 − r²(rV)_r`` for ``V = (m/r²)(m − 2h3)``."""
    h1, h3 = harmonic_components(m, r)
    return 1.0 + m * (m - 2.0 * h3), 1.0 + m * (m - 2.0 * h3 + 2.0 * m * h1**2)


def repulsivity_check(m: int, grid: LogRadialGrid) -> RepulsivityReport:
    sandwich, rep = repulsivity_profile(m, grid.r_values)
    lo = float(np.min(rep))
    return RepulsivityReport(m, float(np.min(sandwich)), float(np.max(sandwich)), lo, lo,
                             1.0 + m * (m - 2.0))


def potential_asymptotics(m: int, grid: LogRadialGrid) -> tuple[float, float]:
    """Fit ``r²(1/r² + V)`` by ``a + b r^{±2m}`` on the innermost and outermost decades."""
    r = grid.r_values
    strength = h_potential(m, r)
    out = []
    for mask, sign in ((r <= grid.r_min * 10.0, 1.0), (r >= grid.r_max / 10.0, -1.0)):
        basis = np.stack([np.ones(mask.sum()), r[mask] ** (sign * 2.0 * m)], axis=1)
        coef, *_ = np.linalg.lstsq(basis, strength[mask], rcond=None)
        out.append(float(coef[0]))
    return out[0], out[1]


def constraint_vector(kind, m: int, grid: LogRadialGrid) -> np.ndarray:
    """Row ``c`` with ``c·z`` equal to the selected orthogonality functional of ``z``."""
    kind = OrthogonalityKind(kind)
    h1, _ = harmonic_components(m, grid.r_values)
    if kind is OrthogonalityKind.L2:
        return grid.quad_weights * h1
    return grid.dy_weights * 2.0 * m * m * h1**3


def _complement_basis(c: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``{x : c·x = 0}`` from a Householder reflector."""
    u = c / np.linalg.norm(c)
    e = np.zeros_like(u)
    e[0] = 1.0
    w = u - e if u[0] <= 0 else u + e
    w /= np.linalg.norm(w)
    basis = np.eye(len(u)) - 2.0 * np.outer(w, w)
    return basis[:, 1:]


def coercivity_forms(m: int, grid: LogRadialGrid, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Dense forms ``‖ρ^{-b} L0 z‖²`` and the weighted X form ``∫(|z_ρ|² + |z|²/ρ²) ρ^{-2b} ρdρ``."""
    h = grid.dy
    mid = midpoints(grid)
    a = _l0_yform(m, grid)
    wmid = sparse.diags(h * mid ** (-2.0 * b))
    num = (a.T @ wmid @ a).toarray()
    n = grid.n_points
    diff = sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) / h
    den = (diff.T @ wmid @ diff).toarray() + np.diag(grid.dy_weights * grid.r_values ** (-2.0 * b))
    return num, den


def coercivity_spectrum(m: int, b: float, kind, grid: LogRadialGrid) -> float:
    """Smallest generalized eigenvalue of ``‖ρ^{-b}L0 z‖²`` against the weighted X form,
    over ``z`` satisfying the orthogonality ``kind`` (``None``: unconstrained).
    """
    if not -1.0 <= b <= 1.0:
        raise ConfigurationError("b must lie in [-1, 1]")
    num, den = coercivity_forms(m, grid, b)
    if kind is not None:
        kind = OrthogonalityKind(kind)
        if m < 3:
            raise ConfigurationError("the constrained coercivity probe needs m >= 3")
        if b >= 1.0 and m <= 3:
            raise ConfigurationError("the b = 1 coercivity probe needs m > 3")
        q = _complement_basis(constraint_vector(kind, m, grid))
        if q.shape[1] == 0:
            raise ConfigurationError("empty constraint subspace")
        num, den = q.T @ num @ q, q.T @ den @ q
    vals = sla.eigh(num, den, eigvals_only=True, subset_by_index=[0, 0])
    return float(vals[0])


def _shifted(op: OperatorMatrix, mu: complex) -> sparse.csc_matrix:
    return sparse.csc_matrix(op.matrix.astype(complex) - mu * sparse.diags(op.grid.r_values**2))


def _largest_singular(n: int, apply, apply_adjoint) -> float:
    """Largest singular value of a linear map given its action and adjoint (Lanczos)."""
    gram = spla.LinearOperator((n, n), matvec=lambda x: apply_adjoint(apply(x.astype(complex))),
                               dtype=complex)
    v0 = np.cos(np.arange(n) * 0.37) + 0.0j
    lam = spla.eigsh(gram, k=1, which="LM", v0=v0, tol=1e-10, return_eigenvectors=False)
    return math.sqrt(max(float(lam[0].real), 0.0))


def _factor(op: OperatorMatrix, mu: complex):
    try:
        return spla.splu(_shifted(op, mu))
    except RuntimeError as exc:
        raise NumericalError(f"factorization failed at mu={mu}: {exc}") from exc


def weighted_resolvent_norm(op: OperatorMatrix, mu: complex) -> float:
    """``‖(1/r)(H − μ)^{-1}(1/r)‖`` on ``L²(r dr)``, which equals ``1/σ_min(M − μ r²)``."""
    lu = _factor(op, mu)
    est = _largest_singular(op.grid.n_points, lu.solve, lambda x: lu.solve(x, trans="H"))
    if not np.isfinite(est):
        raise NumericalError(f"non-finite resolvent norm at mu={mu}")
    return est


def spectrum(op: OperatorMatrix) -> np.ndarray:
    """Eigenvalues of a symmetric operator, from the banded form ``r^{-1} M r^{-1}``."""
    if op.out_r is not op.in_r and not np.array_equal(op.out_r, op.in_r):
        raise ConfigurationError("spectrum needs a square operator")
    inv_r = 1.0 / op.grid.r_values
    sym = sparse.diags(inv_r) @ op.matrix @ sparse.diags(inv_r)
    width = max(abs(int(k)) for k in sparse.dia_matrix(sym).offsets)
    bands = np.zeros((width + 1, op.grid.n_points))
    for k in range(width + 1):
        bands[width - k, k:] = sym.diagonal(k)
    return sla.eig_banded(bands, eigvals_only=True)


def unweighted_resolvent_norm(op: OperatorMatrix, mu: complex) -> float:
    """``‖(H − μ)^{-1}‖`` on ``L²(r dr)``: the inverse distance from ``μ`` to the spectrum."""
    return 1.0 / float(np.min(np.abs(spectrum(op) - mu)))


def resolvent_probe(m: int, grid: LogRadialGrid, mu_samples, operator: OperatorMatrix | None = None
                    ) -> float:
    op = operator if operator is not None else build_operator(OperatorKind.H, m, grid)
    worst = 0.0
    for mu in mu_samples:
        if complex(mu).imag == 0.0:
            raise ConfigurationError(f"resolvent sample {mu} lies on the real axis")
        worst = max(worst, weighted_resolvent_norm(op, complex(mu)))
    return worst


@dataclass(frozen=True)
class SmoothingReport:
    ratio: float
    max_norm_drift: float
    times: np.ndarray
    weighted_sq: np.ndarray


def cayley_propagator(op: OperatorMatrix, dt: float):
    """One step of ``(1 + i dt H/2)^{-1}(1 − i dt H/2)``; unitary in ``L²(r dr)``."""
    r2 = sparse.diags(op.grid.r_values**2)
    lhs = spla.splu(sparse.csc_matrix(r2 + 0.5j * dt * op.matrix))
    rhs = sparse.csr_matrix(r2 - 0.5j * dt * op.matrix)
    return lambda phi: lhs.solve(rhs @ phi)


def evolution_norm(grid: LogRadialGrid, phi: np.ndarray) -> float:
    """The norm conserved by the Cayley step: ``(Σ dy r²|φ|²)^{1/2}``."""
    return math.sqrt(grid.dy * float(np.sum(grid.r_values**2 * np.abs(phi) ** 2)))


def kato_smoothing_probe(m: int, grid: LogRadialGrid, phi, T: float, dt: float,
                         operator: OperatorMatrix | None = None) -> SmoothingReport:
    """``(∫_0^T ‖φ(t)/r‖² dt)^{1/2} / ‖φ‖`` for ``φ(t) = e^{-itH} φ``."""
    values = np.asarray(getattr(phi, "values", phi), dtype=complex)
    norm0 = evolution_norm(grid, values)
    steps = int(round(T / dt))
    times = np.arange(steps + 1) * dt
    if norm0 == 0.0:
        return SmoothingReport(0.0, 0.0, times, np.zeros(steps + 1))
    op = operator if operator is not None else build_operator(OperatorKind.H, m, grid)
    step = cayley_propagator(op, dt)
    dens = np.empty(steps + 1)
    dens[0] = grid.dy * np.sum(np.abs(values) ** 2)
    drift, prev = 0.0, norm0
    for k in range(1, steps + 1):
        values = step(values)
        nk = evolution_norm(grid, values)
        if abs(nk - prev) > 1e-8 * norm0:
            raise NumericalError(f"norm changed by {abs(nk - prev):.3e} in one step")
        prev = nk
        drift = max(drift, abs(nk - norm0) / norm0)
        dens[k] = grid.dy * np.sum(np.abs(values) ** 2)
    total = dt * (np.sum(dens) - 0.5 * (dens[0] + dens[-1]))
    return SmoothingReport(math.sqrt(total) / norm0, drift, times, dens)
