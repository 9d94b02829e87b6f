"""Spectral and momentum-space diagnostics for the dissipative XYZ lattice.

Three independent probes of ordering live here: the spectral gap of the
cluster Liouvillian (with finite-size extrapolation in 1/L), the linear
stability of the uniform polarized state resolved by momentum, and the
spin-structure factor built from steady-state correlations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .lattice import COORDINATION, ClusterGeometry, lattice_structure_sum
from .operators import (
    AXES,
    SIGMA,
    Couplings,
    LiouvilleOperator,
    build_hamiltonian,
    build_liouvillian,
    local_dissipator_matrix,
    up_counts,
    vec,
)

DENSE_GAP_MAX_SITES = 6
ZERO_MODE_TOL = 1e-9


@dataclass(frozen=True)
class GapResult:
    """Asymptotic decay rate of one cluster, in units of the loss rate."""

    cluster_size: int
    lambda_g: float
    method: str
    residual: float
    n_zero_modes: int
    max_real_part: float

    def __post_init__(self):
        if self.lambda_g < 0:
            raise ValueError("decay rate must be non-negative")


@dataclass(frozen=True)
class GapExtrapolation:
    intercept: float
    slope: float
    max_fit_error: float
    clamped: bool


@dataclass(frozen=True)
class DispersionResult:
    k: np.ndarray
    growth_rate: float
    unstable: bool


@dataclass(frozen=True)
class StructureFactorMap:
    kgrid: np.ndarray
    values: np.ndarray
    correlations: np.ndarray = field(repr=False)


def liouvillian_gap(
    geometry: ClusterGeometry,
    c: Couplings,
    method: str = "auto",
    n_eigs: int = 8,
    tol: float = 0.0,
    maxiter: int | None = None,
    ncv: int | None = None,
) -> GapResult:
    """Slowest nonzero relaxation rate of the isolated (field-free) cluster.

    Dense diagonalization up to 6 sites; above that a matrix-free Arnoldi
    run targets the eigenvalues of largest real part. The steady-state
    eigenvalue(s) within ``ZERO_MODE_TOL`` of zero are counted and excluded,
    never collapsed silently. On large clusters the default
    machine-precision ``tol`` can take hours; a loosened ``tol`` (1e-5
    resolves a gap to far better than plotting accuracy, see the returned
    ``residual``) with a wider ``ncv`` basis is the practical setting.
    """
    n = geometry.size
    h = build_hamiltonian(geometry, c)
    liouville = build_liouvillian(h, n, c.gamma)
    if method == "auto":
        method = "dense" if n <= DENSE_GAP_MAX_SITES else "iterative"

    if method == "dense":
        eigenvalues = np.linalg.eigvals(liouville.matrix().toarray())
        residual = 0.0
    elif method == "iterative":
        dim = 4**n
        op = spla.LinearOperator(
            (dim, dim), matvec=liouville.apply_vec, dtype=complex
        )
        eigenvalues, vectors = spla.eigs(
            op, k=n_eigs, which="LR", tol=tol, maxiter=maxiter, ncv=ncv,
            v0=_arnoldi_start(n),
        )
        applied = np.column_stack([liouville.apply_vec(v) for v in vectors.T])
        residual = float(
            np.max(np.linalg.norm(applied - vectors * eigenvalues, axis=0))
        )
    else:
        raise ValueError(f"unknown method {method!r}")

    real = eigenvalues.real
    max_real = float(real.max())
    zero = real > -ZERO_MODE_TOL
    n_zero = int(zero.sum())
    if n_zero == 0:
        raise RuntimeError("no steady-state eigenvalue found")
    decaying = real[~zero]
    if decaying.size == 0:
        raise RuntimeError(
            "no decaying eigenvalue resolved; increase n_eigs"
        )
    return GapResult(
        cluster_size=n,
        lambda_g=float(-decaying.max()),
        method=method,
        residual=residual,
        n_zero_modes=n_zero,
        max_real_part=max_real,
    )


def _arnoldi_start(n_sites: int) -> np.ndarray:
    """Deterministic full-rank start vector for the Arnoldi run.

    Half the all-down projector (close to the steady state of a
    loss-dominated cluster) plus half a seeded random density matrix, so
    every eigendirection is represented. Left unset, scipy draws the
    start from global numpy state and repeated calls stop being
    reproducible at roundoff level.
    """
    dim = 2**n_sites
    rng = np.random.default_rng(n_sites)
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = a @ a.conj().T
    rho /= np.trace(rho).real
    down = np.flatnonzero(up_counts(n_sites) == 0)[0]
    mix = 0.5 * rho
    mix[down, down] += 0.5
    return vec(mix)


def extrapolate_gap(results: list[GapResult]) -> GapExtrapolation:
    """Linear fit of the gap against 1/L, evaluated at 1/L = 0.

    A negative intercept is unphysical (decay rates are non-negative), so it
    is clamped to zero and flagged.
    """
    if len(results) < 2:
        raise ValueError("need at least two cluster sizes")
    sizes = np.array([r.cluster_size for r in results], dtype=float)
    if len(set(sizes)) < 2:
        raise ValueError("cluster sizes must be distinct")
    gaps = np.array([r.lambda_g for r in results])
    slope, intercept = np.polyfit(1.0 / sizes, gaps, 1)
    fitted = intercept + slope / sizes
    err = float(np.max(np.abs(fitted - gaps)))
    clamped = intercept < 0
    return GapExtrapolation(
        intercept=float(max(intercept, 0.0)),
        slope=float(slope),
        max_fit_error=err,
        clamped=bool(clamped),
    )


def _quad(c: Couplings, f: float) -> float:
    z = COORDINATION
    return (c.jx * f - z * c.jz) * (c.jy * f - z * c.jz)


def pm_dispersion(k: np.ndarray, c: Couplings) -> DispersionResult:
    """Growth rate of fluctuations about the polarized state at momentum k.

    Closed form: the linearized generator's leading real part is
    -gamma/2 + Re sqrt(-4 P) with P the product of the two transverse
    channel factors evaluated at the lattice structure sum f(k).
    """
    f = lattice_structure_sum(np.asarray(k, dtype=float))
    p = _quad(c, f)
    rate = -0.5 * c.gamma + np.sqrt(complex(-4.0 * p)).real
    return DispersionResult(
        k=np.asarray(k, dtype=float),
        growth_rate=float(rate),
        unstable=bool(p < -c.gamma**2 / 16.0),
    )


def most_unstable_f(c: Couplings) -> float:
    """Structure-sum value minimizing the channel product, clipped to the
    attainable band [-z/2, z]."""
    if c.jx * c.jy > 0:
        f_star = COORDINATION * c.jz * (c.jx + c.jy) / (2.0 * c.jx * c.jy)
        return float(np.clip(f_star, -COORDINATION / 2, COORDINATION))
    # product opens downward (or one coupling vanishes): minimum at an edge
    edges = (-COORDINATION / 2, float(COORDINATION))
    return min(edges, key=lambda f: _quad(c, f))


def kx_for_structure_sum(target: float) -> float:
    """Positive kx on the kx-axis where the structure sum equals target.

    The axis profile 2 cos(kx) + 4 cos(kx/2) decreases monotonically from 6
    at the zone center to -2 at kx = pi, so bisection is exact there.
    """
    if not -2.0 < target < 6.0:
        raise ValueError("target must lie in (-2, 6) for the on-axis branch")
    lo, hi = 0.0, np.pi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if lattice_structure_sum(np.array([mid, 0.0])) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _as_density_matrix(steady) -> np.ndarray:
    rho = np.asarray(
        steady.density_matrix() if hasattr(steady, "density_matrix") else steady,
        dtype=complex,
    )
    if rho.shape != (2, 2):
        raise ValueError("steady state must be a single-site density matrix")
    if abs(np.trace(rho) - 1.0) > 1e-9 or not np.allclose(rho, rho.conj().T):
        raise ValueError("steady state must be Hermitian with unit trace")
    if np.linalg.eigvalsh(rho).min() < -1e-9:
        raise ValueError("steady state must be positive semidefinite")
    return rho


def stability_superoperator(
    k: np.ndarray, steady, c: Couplings
) -> np.ndarray:
    """Single-site generator governing plane-wave perturbations at momentum k.

    Acts on the column-stacked 2x2 perturbation. Three pieces: the loss
    dissipator, the commutator with the frozen mean-field Hamiltonian of the
    uniform background, and the feedback of the perturbation's own
    magnetization onto the background state, weighted by the structure sum.
    """
    rho = _as_density_matrix(steady)
    f = lattice_structure_sum(np.asarray(k, dtype=float))
    js = c.as_array()
    eye = np.eye(2)

    m_ss = np.array(
        [np.trace(SIGMA[a] @ rho).real for a in AXES]
    )
    h_mf = sum(
        COORDINATION * j * m * SIGMA[a]
        for j, m, a in zip(js, m_ss, AXES)
    )
    h_mf = np.asarray(h_mf, dtype=complex)
    out = -1j * (np.kron(eye, h_mf) - np.kron(h_mf.T, eye))
    out = out + local_dissipator_matrix(c.gamma)
    for j, a in zip(js, AXES):
        comm = SIGMA[a] @ rho - rho @ SIGMA[a]
        out += -1j * j * f * np.outer(vec(comm), vec(SIGMA[a].T))
    return out


_TRACELESS_BASIS = np.column_stack(
    [vec(SIGMA[a]) / np.sqrt(2.0) for a in AXES]
)


def superoperator_growth_rate(m: np.ndarray) -> float:
    """Largest real part over the traceless (physical perturbation) sector.

    The trace direction is flow-invariant only in the block-triangular
    sense; perturbations of a density matrix are traceless, so stability is
    read off the restricted spectrum.
    """
    g = _TRACELESS_BASIS.conj().T @ m @ _TRACELESS_BASIS
    return float(np.linalg.eigvals(g).real.max())


def structure_factor(
    correlations: np.ndarray,
    geometry: ClusterGeometry,
    kgrid: np.ndarray,
) -> StructureFactorMap:
    """Momentum-resolved steady-state spin-spin correlation map.

    S(k) = (1/L^2) sum_{j,l} exp(-i k.(r_j - r_l)) C_{jl} for a real
    symmetric correlation matrix C with unit diagonal.
    """
    corr = np.asarray(correlations, dtype=float)
    n = geometry.size
    if corr.shape != (n, n):
        raise ValueError(f"correlation matrix must be {n}x{n}")
    if not np.allclose(corr, corr.T, atol=1e-9):
        raise ValueError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-6):
        raise ValueError("diagonal correlations must equal 1")
    corr = 0.5 * (corr + corr.T)

    kgrid = np.atleast_2d(np.asarray(kgrid, dtype=float))
    positions = geometry.positions
    phases = np.exp(-1j * kgrid @ positions.T)  # (n_k, L)
    values = np.einsum("kj,jl,kl->k", phases, corr, phases.conj()).real
    return StructureFactorMap(
        kgrid=kgrid, values=values / n**2, correlations=corr
    )
