"""Steady states of the dissipative XYZ model on the triangular lattice.

Subpackages cover the single-site mean-field analysis (three-sublattice
Bloch equations, phase classification, critical couplings), cluster
mean-field dynamics with dense and quantum-trajectory backends,
Liouvillian spectra with finite-size extrapolation, momentum-space
linear stability of the uniform phase, and spin structure factors.
"""

from .lattice import (
    ClusterGeometry,
    BoundaryBond,
    build_cluster,
    brillouin_grid,
    in_first_zone,
    lattice_structure_sum,
    SUPPORTED_SIZES,
)
from .operators import (
    Couplings,
    LiouvilleOperator,
    QuantumState,
    build_hamiltonian,
    build_liouvillian,
    expectation,
    pauli_at,
)

__version__ = "0.1.0"

__all__ = [
    "ClusterGeometry",
    "BoundaryBond",
    "build_cluster",
    "brillouin_grid",
    "in_first_zone",
    "lattice_structure_sum",
    "SUPPORTED_SIZES",
    "Couplings",
    "LiouvilleOperator",
    "QuantumState",
    "build_hamiltonian",
    "build_liouvillian",
    "expectation",
    "pauli_at",
    "__version__",
]
