"""Triangular-lattice geometry for dissipative spin clusters.

Builds the triangular clusters used by the mean-field embeddings (sizes
1, 3, 6, 10, 15 arranged in 1..5 rows), assigns the three-sublattice
coloring, enumerates intra-cluster bonds and boundary bonds, and provides
momentum-space helpers: the nearest-neighbor phase sum f(k) and uniform
grids over the first Brillouin zone of the infinite lattice.

Conventions
-----------
Lattice coordinates (m, n) map to cartesian positions m*a1 + n*a2 with
primitive vectors a1 = (1, 0) and a2 = (1/2, sqrt(3)/2); the nearest-
neighbor separations are the six unit vectors at angles n*pi/3.
Sublattices are labeled 0, 1, 2 (letters A, B, C); the coloring is the
periodic three-coloring (m - n) mod 3, anchored so the apex site of each
cluster is on sublattice A.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json

import numpy as np

BASIS = np.array([[1.0, 0.0], [0.5, np.sqrt(3.0) / 2.0]])

# Steps to the six nearest neighbors, in lattice coordinates. Their
# cartesian images are the unit vectors (cos(n*pi/3), sin(n*pi/3)).
NEIGHBOR_STEPS = ((1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1))

NEIGHBOR_VECTORS = np.array([step @ BASIS for step in NEIGHBOR_STEPS])

SUBLATTICE_LETTERS = "ABC"

COORDINATION = 6

#: cluster sizes with a triangular row arrangement (r rows hold r(r+1)/2 sites)
SUPPORTED_SIZES = (1, 3, 6, 10, 15)

_ROWS = {1: 1, 3: 2, 6: 3, 10: 4, 15: 5}


@dataclass(frozen=True)
class BoundaryBond:
    """A bond from a cluster site to a site outside the cluster.

    ``step`` is the lattice-coordinate offset from the internal site to the
    external one; ``displacement`` (cartesian, unit length) is what
    momentum-space sums need. The external site's sublattice follows from
    the periodic coloring, so the embedding can source its mean field from
    the matching sublattice inside the cluster.
    """

    site: int
    ext_sublattice: int
    step: tuple[int, int]

    @property
    def displacement(self) -> np.ndarray:
        return np.asarray(self.step, dtype=float) @ BASIS


@dataclass(frozen=True)
class ClusterGeometry:
    """Sites, coloring, and bond lists for one triangular cluster."""

    size: int
    rows: int
    sites_mn: tuple[tuple[int, int], ...]
    sublattices: tuple[int, ...]
    intra_bonds: tuple[tuple[int, int], ...]
    boundary_bonds: tuple[BoundaryBond, ...] = field(repr=False)

    @property
    def positions(self) -> np.ndarray:
        return np.asarray(self.sites_mn, dtype=float) @ BASIS

    def sublattice_sites(self, sub: int) -> np.ndarray:
        """Indices of the sites on sublattice ``sub`` (0, 1, or 2)."""
        return np.flatnonzero(np.asarray(self.sublattices) == sub)

    def sublattice_census(self) -> tuple[int, int, int]:
        subs = np.asarray(self.sublattices)
        return tuple(int(np.sum(subs == s)) for s in range(3))

    def degree(self, site: int) -> int:
        intra = sum(site in bond for bond in self.intra_bonds)
        ext = sum(b.site == site for b in self.boundary_bonds)
        return intra + ext

    def to_json_dict(self) -> dict:
        """Plain-data description (positions, coloring, bonds) for export."""
        return {
            "size": self.size,
            "rows": self.rows,
            "sites": [
                {
                    "index": i,
                    "mn": list(self.sites_mn[i]),
                    "position": [float(x) for x in self.positions[i]],
                    "sublattice": SUBLATTICE_LETTERS[self.sublattices[i]],
                }
                for i in range(self.size)
            ],
            "intra_bonds": [list(b) for b in self.intra_bonds],
            "boundary_bonds": [
                {
                    "site": b.site,
                    "step": list(b.step),
                    "ext_sublattice": SUBLATTICE_LETTERS[b.ext_sublattice],
                }
                for b in self.boundary_bonds
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_json_dict(), **kwargs)


def _color(m: int, n: int, rows: int) -> int:
    # periodic three-coloring, shifted so the apex (0, rows-1) is sublattice A
    return (m - n + rows - 1) % 3


def build_cluster(num_sites: int) -> ClusterGeometry:
    """Build the triangular cluster with ``num_sites`` in {1, 3, 6, 10, 15}.

    Sites fill rows n = 0..r-1 with m >= 0 and m + n <= r - 1 (an upward
    triangle, apex at the top). Bonds with both ends inside the cluster go
    to ``intra_bonds``; the remaining neighbor slots (each site has six on
    the infinite lattice) become ``boundary_bonds``.
    """
    if num_sites not in _ROWS:
        raise ValueError(
            f"unsupported cluster size {num_sites}; choose from {SUPPORTED_SIZES}"
        )
    rows = _ROWS[num_sites]
    sites = [
        (m, n) for n in range(rows) for m in range(rows - n)
    ]
    index = {mn: i for i, mn in enumerate(sites)}

    intra: list[tuple[int, int]] = []
    boundary: list[BoundaryBond] = []
    for mn, i in index.items():
        m, n = mn
        for dm, dn in NEIGHBOR_STEPS:
            other = (m + dm, n + dn)
            if other in index:
                j = index[other]
                if i < j:
                    intra.append((i, j))
            else:
                boundary.append(
                    BoundaryBond(
                        site=i,
                        ext_sublattice=_color(*other, rows),
                        step=(dm, dn),
                    )
                )

    return ClusterGeometry(
        size=num_sites,
        rows=rows,
        sites_mn=tuple(sites),
        sublattices=tuple(_color(m, n, rows) for m, n in sites),
        intra_bonds=tuple(intra),
        boundary_bonds=tuple(boundary),
    )


def lattice_structure_sum(k) -> float:
    """Sum of plane-wave phases over the six nearest-neighbor vectors.

    Real by inversion symmetry, ranging from -3 (zone corners) to 6 (zone
    center). Controls the momentum dependence of the linear stability of
    uniform product states.
    """
    k = np.asarray(k, dtype=float)
    phases = np.exp(1j * (NEIGHBOR_VECTORS @ k))
    total = phases.sum()
    # the six neighbors come in +/- pairs, so the sum is real
    assert abs(total.imag) < 1e-12 * max(1.0, abs(total.real))
    return float(total.real)


# shortest reciprocal-lattice vectors, for the first-zone membership test
_RECIP = 2.0 * np.pi * np.linalg.inv(BASIS).T
_NEAREST_G = np.array(
    [s1 * _RECIP[0] + s2 * _RECIP[1] for s1, s2 in
     ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1))]
)


def in_first_zone(k, tol: float = 1e-9) -> bool:
    """True if k lies in the first Brillouin zone (closer to 0 than to any G)."""
    k = np.asarray(k, dtype=float)
    return bool(np.all(2.0 * _NEAREST_G @ k <= (_NEAREST_G ** 2).sum(axis=1) + tol))


def brillouin_grid(n: int) -> np.ndarray:
    """Uniform k-grid over the first Brillouin zone (hexagon, corner 4*pi/3).

    Starts from an n-by-n grid on the zone's bounding box and keeps the
    points inside the zone; the zone center is always included.
    """
    if n < 1:
        raise ValueError("grid size must be positive")
    xmax = 4.0 * np.pi / 3.0
    ymax = 2.0 * np.pi / np.sqrt(3.0)
    xs = np.linspace(-xmax, xmax, n)
    ys = np.linspace(-ymax, ymax, n)
    kx, ky = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([kx.ravel(), ky.ravel()])
    keep = np.array([in_first_zone(p) for p in pts])
    pts = pts[keep]
    if not np.any(np.all(pts == 0.0, axis=1)):
        pts = np.vstack([[0.0, 0.0], pts])
    return pts
