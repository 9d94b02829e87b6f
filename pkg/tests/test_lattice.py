import json
import math

import numpy as np
import pytest

from trixyz import lattice


# Independent bond-count bookkeeping for a triangular patch with r rows:
# sites L = r(r+1)/2, internal pairs 3*r*(r-1)/2, and every site has
# coordination 6, so dangling bonds number 6L - 2*intra.
EXPECTED_COUNTS = {
    1: (0, 6),
    3: (3, 12),
    6: (9, 18),
    10: (18, 24),
    15: (30, 30),
}

EXPECTED_CENSUS = {
    1: (1, 0, 0),
    3: (1, 1, 1),
    6: (2, 2, 2),
    10: (4, 3, 3),
    15: (5, 5, 5),
}

# Root of 2*[cos(kx) + 2*cos(kx/2)] = 2.7 on the kx axis, found by
# bisection on the monotone branch kx in (0, 2*pi/3) at 1e-15 precision.
KX_OVER_PI_AT_2P7 = 0.5119289968533872


@pytest.mark.parametrize("size", lattice.SUPPORTED_SIZES)
def test_bond_counts(size):
    geom = lattice.build_cluster(size)
    intra, boundary = EXPECTED_COUNTS[size]
    assert len(geom.intra_bonds) == intra
    assert len(geom.boundary_bonds) == boundary


@pytest.mark.parametrize("size", lattice.SUPPORTED_SIZES)
def test_every_site_has_six_neighbors(size):
    geom = lattice.build_cluster(size)
    for site in range(size):
        assert geom.degree(site) == 6


@pytest.mark.parametrize("size", lattice.SUPPORTED_SIZES)
def test_sublattice_census(size):
    geom = lattice.build_cluster(size)
    assert geom.sublattice_census() == EXPECTED_CENSUS[size]


def test_unsupported_size_rejected():
    with pytest.raises(ValueError):
        lattice.build_cluster(7)


@pytest.mark.parametrize("size", lattice.SUPPORTED_SIZES)
def test_three_coloring_is_proper(size):
    """Neighbors never share a sublattice, and each site sees each foreign
    sublattice exactly three times (internal and dangling bonds combined)."""
    geom = lattice.build_cluster(size)
    seen = {s: [0, 0, 0] for s in range(size)}
    for i, j in geom.intra_bonds:
        assert geom.sublattices[i] != geom.sublattices[j]
        seen[i][geom.sublattices[j]] += 1
        seen[j][geom.sublattices[i]] += 1
    for bond in geom.boundary_bonds:
        assert geom.sublattices[bond.site] != bond.ext_sublattice
        seen[bond.site][bond.ext_sublattice] += 1
    for site in range(size):
        own = geom.sublattices[site]
        assert seen[site][own] == 0
        foreign = [v for k, v in enumerate(seen[site]) if k != own]
        assert foreign == [3, 3]


@pytest.mark.parametrize("size", lattice.SUPPORTED_SIZES)
def test_bond_geometry_unit_length(size):
    geom = lattice.build_cluster(size)
    pos = geom.positions
    for i, j in geom.intra_bonds:
        assert np.linalg.norm(pos[i] - pos[j]) == pytest.approx(1.0)
    for bond in geom.boundary_bonds:
        ext = pos[bond.site] + bond.displacement
        assert np.linalg.norm(ext - pos[bond.site]) == pytest.approx(1.0)


def test_apex_site_is_sublattice_a():
    for size in lattice.SUPPORTED_SIZES:
        geom = lattice.build_cluster(size)
        apex = geom.sites_mn.index((0, geom.rows - 1))
        assert lattice.SUBLATTICE_LETTERS[geom.sublattices[apex]] == "A"


def test_json_round_trip():
    geom = lattice.build_cluster(10)
    data = json.loads(geom.to_json())
    assert data["size"] == 10
    assert len(data["intra_bonds"]) == 18
    rebuilt = lattice.build_cluster(data["size"])
    assert rebuilt.sublattices == geom.sublattices


class TestStructureSum:
    def test_zone_center(self):
        assert lattice.lattice_structure_sum(np.zeros(2)) == pytest.approx(6.0)

    def test_zone_corner(self):
        k = np.array([4 * math.pi / 3, 0.0])
        assert lattice.lattice_structure_sum(k) == pytest.approx(-3.0)

    def test_edge_midpoint(self):
        k = np.array([math.pi, -math.pi / math.sqrt(3)])
        assert lattice.lattice_structure_sum(k) == pytest.approx(-2.0)

    def test_range_bounds(self):
        rng = np.random.default_rng(11)
        vals = [
            lattice.lattice_structure_sum(rng.uniform(-8, 8, 2))
            for _ in range(200)
        ]
        assert min(vals) >= -3.0 - 1e-12
        assert max(vals) <= 6.0 + 1e-12

    def test_sixfold_symmetry(self):
        rot = np.array(
            [
                [math.cos(math.pi / 3), -math.sin(math.pi / 3)],
                [math.sin(math.pi / 3), math.cos(math.pi / 3)],
            ]
        )
        rng = np.random.default_rng(3)
        for _ in range(20):
            k = rng.uniform(-4, 4, 2)
            v = lattice.lattice_structure_sum(k)
            assert lattice.lattice_structure_sum(rot @ k) == pytest.approx(v)

    def test_frozen_root_on_axis(self):
        k = np.array([KX_OVER_PI_AT_2P7 * math.pi, 0.0])
        assert lattice.lattice_structure_sum(k) == pytest.approx(2.7, abs=1e-12)


class TestBrillouinZone:
    def test_gamma_inside(self):
        assert lattice.in_first_zone(np.zeros(2))

    def test_far_point_outside(self):
        assert not lattice.in_first_zone(np.array([2 * math.pi, 0.0]))

    def test_grid_contained_and_has_gamma(self):
        grid = lattice.brillouin_grid(17)
        assert all(lattice.in_first_zone(k) for k in grid)
        assert np.min(np.linalg.norm(grid, axis=1)) == pytest.approx(0.0)

    def test_grid_values_in_band(self):
        grid = lattice.brillouin_grid(13)
        vals = np.array([lattice.lattice_structure_sum(k) for k in grid])
        assert vals.min() >= -3.0 - 1e-9
        assert vals.max() <= 6.0 + 1e-9
