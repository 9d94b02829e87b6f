"""Spin-1/2 operators, Hamiltonians, and Lindblad superoperators.

Hilbert-space conventions: site 0 is the leftmost kron factor; the basis
index of a product state reads as a bit string, bit 0 meaning spin up
(+1 eigenvalue of sigma^z) and bit 1 spin down. Density matrices are
vectorized by column stacking, vec(A rho B) = (B^T kron A) vec(rho), so
the coherent part of the Lindblad generator is -i(I kron H - H^T kron I).

The Lindblad dissipator is local spontaneous decay on every site,
rate ``gamma``: D_j[rho] = gamma/2 (2 s-_j rho s+_j - {s+_j s-_j, rho}).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

SIGMA = {
    "x": np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex),
    "y": np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex),
    "z": np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex),
    "-": np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex),
    "+": np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex),
}

AXES = ("x", "y", "z")

#: largest cluster for which the superoperator is assembled explicitly
MAX_DENSE_SUPEROP_SITES = 6


@dataclass(frozen=True)
class Couplings:
    """Exchange couplings and decay rate, all in units of the decay rate."""

    jx: float
    jy: float
    jz: float
    gamma: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0.0:
            raise ValueError("decay rate must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.jx, self.jy, self.jz])

    def replace(self, **kwargs) -> "Couplings":
        data = {"jx": self.jx, "jy": self.jy, "jz": self.jz, "gamma": self.gamma}
        data.update(kwargs)
        return Couplings(**data)


def pauli_at(axis: str, site: int, n_sites: int) -> sp.csr_matrix:
    """Single-site operator ``axis`` in {'x','y','z','+','-'} on ``site``."""
    if site < 0 or site >= n_sites:
        raise ValueError(f"site {site} outside 0..{n_sites - 1}")
    op = sp.csr_matrix(SIGMA[axis])
    left = sp.identity(2**site, format="csr", dtype=complex)
    right = sp.identity(2 ** (n_sites - site - 1), format="csr", dtype=complex)
    return sp.kron(sp.kron(left, op, format="csr"), right, format="csr")


@lru_cache(maxsize=None)
def flip_indices(n_sites: int, site: int) -> np.ndarray:
    """Basis permutation induced by flipping one site's bit."""
    idx = np.arange(2**n_sites, dtype=np.int64)
    out = idx ^ (1 << (n_sites - 1 - site))
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def down_mask(n_sites: int, site: int) -> np.ndarray:
    """Boolean mask of basis states with ``site`` pointing down."""
    idx = np.arange(2**n_sites, dtype=np.int64)
    out = ((idx >> (n_sites - 1 - site)) & 1).astype(bool)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def up_counts(n_sites: int) -> np.ndarray:
    """Number of up spins in each basis state."""
    counts = np.zeros(2**n_sites)
    for j in range(n_sites):
        counts += ~down_mask(n_sites, j)
    counts.setflags(write=False)
    return counts


def build_hamiltonian(geometry, c: Couplings) -> sp.csr_matrix:
    """XYZ Hamiltonian over the cluster's internal bonds.

    sum over bonds (j,k) of [jx x_j x_k + jy y_j y_k + jz z_j z_k].
    """
    n = geometry.size
    dim = 2**n
    h = sp.csr_matrix((dim, dim), dtype=complex)
    coeffs = dict(zip(AXES, c.as_array()))
    for j, k in geometry.intra_bonds:
        for axis, coeff in coeffs.items():
            if coeff != 0.0:
                h = h + coeff * (pauli_at(axis, j, n) @ pauli_at(axis, k, n))
    return h.tocsr()


def vec(rho: np.ndarray) -> np.ndarray:
    """Column-stack a matrix (Fortran order)."""
    return np.asarray(rho).reshape(-1, order="F")


def unvec(v: np.ndarray) -> np.ndarray:
    dim = int(round(np.sqrt(v.size)))
    return np.asarray(v).reshape((dim, dim), order="F")


def local_dissipator_matrix(gamma: float) -> np.ndarray:
    """Single-site decay dissipator as a 4x4 superoperator (column stacking)."""
    sm, spl = SIGMA["-"], SIGMA["+"]
    pup = spl @ sm
    eye = np.eye(2)
    return (gamma / 2.0) * (
        2.0 * np.kron(sm, sm)  # first factor is (s+)^T = s-
        - np.kron(eye, pup)
        - np.kron(pup.T, eye)
    )


class LiouvilleOperator:
    """Lindblad generator for a cluster: coherent XYZ part plus local decay.

    Provides a matrix-free action on density matrices (any size, fast
    index-permutation kernels for the dissipator) and explicit sparse
    assembly of the 4^L x 4^L superoperator for small clusters.
    """

    def __init__(self, hamiltonian: sp.spmatrix, n_sites: int, gamma: float):
        if hamiltonian.shape != (2**n_sites, 2**n_sites):
            raise ValueError("Hamiltonian dimension does not match site count")
        self.n_sites = n_sites
        self.gamma = gamma
        self.hamiltonian = sp.csr_matrix(hamiltonian)
        self.dim = 2**n_sites
        self._nup = up_counts(n_sites)
        self._flips = [flip_indices(n_sites, j) for j in range(n_sites)]
        self._downs = [down_mask(n_sites, j) for j in range(n_sites)]

    def apply_rho(self, rho: np.ndarray) -> np.ndarray:
        """Action on a density matrix, returned as a new array."""
        h = self.hamiltonian
        out = -1j * (h @ rho - rho @ h.conj().T.tocsr())
        out = np.asarray(out)
        g = self.gamma
        # anticommutator with sum_j s+_j s-_j is diagonal in the up counts
        out -= (g / 2.0) * (self._nup[:, None] + self._nup[None, :]) * rho
        for flip, down in zip(self._flips, self._downs):
            jump = rho[flip][:, flip]
            jump[~down, :] = 0.0
            jump[:, ~down] = 0.0
            out += g * jump
        return out

    def apply_vec(self, v: np.ndarray) -> np.ndarray:
        return vec(self.apply_rho(unvec(v)))

    def matrix(self) -> sp.csr_matrix:
        """Explicit superoperator; refuses clusters above 6 sites."""
        if self.n_sites > MAX_DENSE_SUPEROP_SITES:
            raise ValueError(
                f"explicit superoperator for {self.n_sites} sites would be "
                f"{4**self.n_sites}-dimensional; use apply_rho/apply_vec"
            )
        n, dim = self.n_sites, self.dim
        eye = sp.identity(dim, format="csr", dtype=complex)
        h = self.hamiltonian
        gen = -1j * (sp.kron(eye, h) - sp.kron(h.T, eye))
        for j in range(n):
            sm = pauli_at("-", j, n)
            pup = pauli_at("+", j, n) @ sm
            gen = gen + (self.gamma / 2.0) * (
                2.0 * sp.kron(sm.conj(), sm)
                - sp.kron(eye, pup)
                - sp.kron(pup.T, eye)
            )
        return gen.tocsr()


def build_liouvillian(hamiltonian: sp.spmatrix, n_sites: int, gamma: float) -> LiouvilleOperator:
    return LiouvilleOperator(hamiltonian, n_sites, gamma)


def z2_parity(n_sites: int) -> sp.csr_matrix:
    """Product of sigma^z over all sites (pi rotation about z, up to phase)."""
    out = sp.identity(1, format="csr", dtype=complex)
    for _ in range(n_sites):
        out = sp.kron(out, sp.csr_matrix(SIGMA["z"]), format="csr")
    return out


def expectation(op, state) -> float:
    """Real expectation value of a Hermitian operator.

    ``state`` may be a pure-state vector, a density matrix, or a
    QuantumState. The imaginary part (roundoff for Hermitian input) is
    dropped.
    """
    if isinstance(state, QuantumState):
        state = state.array
    state = np.asarray(state)
    if state.ndim == 1:
        return float(np.real(np.vdot(state, op @ state)))
    return float(np.real(np.trace(op @ state)))


class QuantumState:
    """A validated pure state (vector) or density matrix for a spin cluster."""

    def __init__(self, array: np.ndarray, kind: str, validate: bool = True):
        array = np.asarray(array, dtype=complex)
        if kind not in ("pure", "density"):
            raise ValueError("kind must be 'pure' or 'density'")
        if kind == "pure" and array.ndim != 1:
            raise ValueError("pure states are one-dimensional arrays")
        if kind == "density" and (array.ndim != 2 or array.shape[0] != array.shape[1]):
            raise ValueError("density matrices are square arrays")
        dim = array.shape[0]
        n = int(round(np.log2(dim)))
        if 2**n != dim:
            raise ValueError(f"dimension {dim} is not a power of two")
        self.array = array
        self.kind = kind
        self.n_sites = n
        if validate:
            self._validate()

    def _validate(self, tol: float = 1e-8):
        a = self.array
        if self.kind == "pure":
            norm = np.linalg.norm(a)
            if abs(norm - 1.0) > tol:
                raise ValueError(f"pure state norm {norm} is not 1")
        else:
            if np.max(np.abs(a - a.conj().T)) > tol:
                raise ValueError("density matrix is not Hermitian")
            tr = np.trace(a).real
            if abs(tr - 1.0) > tol:
                raise ValueError(f"density matrix trace {tr} is not 1")
            if a.shape[0] <= 1024:
                wmin = float(np.linalg.eigvalsh(a).min())
                if wmin < -tol:
                    raise ValueError(f"density matrix has negative eigenvalue {wmin}")

    @classmethod
    def pure(cls, vector) -> "QuantumState":
        return cls(np.asarray(vector), "pure")

    @classmethod
    def density(cls, matrix) -> "QuantumState":
        return cls(np.asarray(matrix), "density")

    def density_matrix(self) -> np.ndarray:
        if self.kind == "density":
            return self.array
        return np.outer(self.array, self.array.conj())

    def expect(self, op) -> float:
        return expectation(op, self)


def single_qubit_state(bloch_xy_angle: float | None = None) -> np.ndarray:
    """Equatorial qubit state (|up> + e^{i phi}|down>)/sqrt(2), or |down>."""
    if bloch_xy_angle is None:
        return np.array([0.0, 1.0], dtype=complex)
    return np.array([1.0, np.exp(1j * bloch_xy_angle)], dtype=complex) / np.sqrt(2.0)


def product_state(site_states: list[np.ndarray]) -> np.ndarray:
    """Kron product of single-site state vectors (site 0 leftmost)."""
    out = np.array([1.0 + 0.0j])
    for s in site_states:
        out = np.kron(out, np.asarray(s, dtype=complex))
    return out
