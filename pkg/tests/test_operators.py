import numpy as np
import pytest
import scipy.sparse as sp

from trixyz import lattice, operators as ops


def dense(op):
    return op.toarray() if sp.issparse(op) else np.asarray(op)


def random_density_matrix(dim, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = a @ a.conj().T
    return rho / np.trace(rho)


class TestCouplings:
    def test_as_array(self):
        c = ops.Couplings(0.9, 1.1, 1.0)
        assert np.allclose(c.as_array(), [0.9, 1.1, 1.0])
        assert c.gamma == 1.0

    def test_replace(self):
        c = ops.Couplings(0.9, 1.1, 1.0).replace(jx=-2.0)
        assert c.jx == -2.0 and c.jy == 1.1

    def test_nonpositive_gamma_rejected(self):
        with pytest.raises(ValueError):
            ops.Couplings(1.0, 1.0, 1.0, gamma=0.0)


class TestPauliEmbedding:
    def test_square_is_identity(self):
        for axis in "xyz":
            p = dense(ops.pauli_at(axis, 1, 3))
            assert np.allclose(p @ p, np.eye(8))

    def test_commutator_cycles(self):
        # [sx, sy] = 2i sz site by site, and different sites commute
        for site in range(3):
            sx = dense(ops.pauli_at("x", site, 3))
            sy = dense(ops.pauli_at("y", site, 3))
            sz = dense(ops.pauli_at("z", site, 3))
            assert np.allclose(sx @ sy - sy @ sx, 2j * sz)
        a = dense(ops.pauli_at("x", 0, 3))
        b = dense(ops.pauli_at("y", 2, 3))
        assert np.allclose(a @ b, b @ a)

    def test_flip_indices_is_involution(self):
        for n in (2, 4):
            for site in range(n):
                idx = ops.flip_indices(n, site)
                assert np.array_equal(idx[idx], np.arange(2**n))

    def test_up_counts(self):
        counts = ops.up_counts(3)
        # basis index 0 is all-up with the leftmost factor as site 0
        assert counts[0] == 3
        assert counts[-1] == 0
        assert counts.sum() == 3 * 2**3 // 2


class TestVectorization:
    def test_round_trip(self):
        rho = random_density_matrix(8, 0)
        assert np.allclose(ops.unvec(ops.vec(rho)), rho)

    def test_sandwich_identity(self):
        # the column-stacking convention: vec(A rho B) = (B^T kron A) vec(rho)
        rng = np.random.default_rng(1)
        a, b, rho = (rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4)) for _ in range(3))
        lhs = ops.vec(a @ rho @ b)
        rhs = np.kron(b.T, a) @ ops.vec(rho)
        assert np.allclose(lhs, rhs)


class TestHamiltonian:
    def test_isotropic_triangle_spectrum(self):
        # Sum over the three bonds of sigma_i . sigma_j equals
        # 2*S_tot^2 - 9/2 in spin operators: eigenvalues +3 (quartet)
        # and -3 (two doublets).
        geom = lattice.build_cluster(3)
        h = dense(ops.build_hamiltonian(geom, ops.Couplings(1.0, 1.0, 1.0)))
        ev = np.sort(np.linalg.eigvalsh(h))
        assert np.allclose(ev, [-3, -3, -3, -3, 3, 3, 3, 3])

    def test_against_direct_kron_build(self):
        geom = lattice.build_cluster(3)
        rng = np.random.default_rng(7)
        jx, jy, jz = rng.uniform(-2, 2, 3)
        h = dense(ops.build_hamiltonian(geom, ops.Couplings(jx, jy, jz)))
        eye = np.eye(2)
        ref = np.zeros((8, 8), complex)
        for i, j in geom.intra_bonds:
            for axis, coupling in zip("xyz", (jx, jy, jz)):
                mats = [eye, eye, eye]
                mats[i] = np.asarray(ops.SIGMA[axis], complex)
                mats[j] = np.asarray(ops.SIGMA[axis], complex)
                ref += coupling * np.kron(np.kron(mats[0], mats[1]), mats[2])
        assert np.allclose(h, ref)

    def test_hermitian(self):
        geom = lattice.build_cluster(6)
        h = ops.build_hamiltonian(geom, ops.Couplings(0.9, 1.05, 1.0))
        assert (abs(h - h.getH()) > 1e-12).nnz == 0


class TestLiouvillian:
    def test_single_site_spectrum(self):
        # no bonds on one site: pure decay gives rates {0, g/2, g/2, g}
        geom = lattice.build_cluster(1)
        h = ops.build_hamiltonian(geom, ops.Couplings(0.7, -0.3, 1.1))
        L = ops.build_liouvillian(h, 1, 1.0).matrix()
        ev = np.sort_complex(np.linalg.eigvals(dense(L)))
        assert np.allclose(ev, [-1.0, -0.5, -0.5, 0.0], atol=1e-12)

    def test_matrix_free_matches_assembled(self):
        geom = lattice.build_cluster(3)
        c = ops.Couplings(0.9, -1.4, 1.0, gamma=1.3)
        h = ops.build_hamiltonian(geom, c)
        L = ops.build_liouvillian(h, 3, c.gamma)
        rho = random_density_matrix(8, 5)
        direct = ops.vec(L.apply_rho(rho))
        assembled = L.matrix() @ ops.vec(rho)
        assert np.max(np.abs(direct - assembled)) < 1e-13

    def test_trace_and_hermiticity_preserved(self):
        geom = lattice.build_cluster(3)
        c = ops.Couplings(2.0, 2.5, 1.0)
        h = ops.build_hamiltonian(geom, c)
        L = ops.build_liouvillian(h, 3, c.gamma)
        rho = random_density_matrix(8, 9)
        drho = L.apply_rho(rho)
        assert abs(np.trace(drho)) < 1e-13
        assert np.allclose(drho, drho.conj().T)

    def test_steady_state_properties(self):
        geom = lattice.build_cluster(3)
        c = ops.Couplings(0.9, 0.5, 1.0)
        h = ops.build_hamiltonian(geom, c)
        L = ops.build_liouvillian(h, 3, c.gamma)
        m = dense(L.matrix())
        w, v = np.linalg.eig(m)
        rho = ops.unvec(v[:, np.argmax(w.real)])
        rho = rho / np.trace(rho)
        assert np.max(np.abs(L.apply_rho(rho))) < 1e-10
        assert np.allclose(rho, rho.conj().T, atol=1e-10)
        assert np.linalg.eigvalsh((rho + rho.conj().T) / 2).min() > -1e-12

    def test_dense_superoperator_size_guard(self):
        geom = lattice.build_cluster(10)
        c = ops.Couplings(1.0, 1.0, 1.0)
        h = ops.build_hamiltonian(geom, c)
        L = ops.build_liouvillian(h, 10, c.gamma)
        with pytest.raises(ValueError):
            L.matrix()

    def test_apply_vec_consistent(self):
        geom = lattice.build_cluster(3)
        c = ops.Couplings(-2.0, 1.2, 1.0)
        h = ops.build_hamiltonian(geom, c)
        L = ops.build_liouvillian(h, 3, c.gamma)
        rho = random_density_matrix(8, 2)
        assert np.allclose(L.apply_vec(ops.vec(rho)), ops.vec(L.apply_rho(rho)))


def test_z2_parity_is_a_symmetry():
    """Rotating every spin by pi about z leaves both the Hamiltonian and the
    dissipator invariant, so parity conjugation maps steady states to
    steady states."""
    geom = lattice.build_cluster(3)
    c = ops.Couplings(0.9, -1.4, 1.0)
    h = ops.build_hamiltonian(geom, c)
    P = dense(ops.z2_parity(3))
    assert np.allclose(P @ dense(h) @ np.conj(P.T), dense(h))
    L = ops.build_liouvillian(h, 3, c.gamma)
    rho = random_density_matrix(8, 4)
    lhs = L.apply_rho(P @ rho @ np.conj(P.T))
    rhs = P @ L.apply_rho(rho) @ np.conj(P.T)
    assert np.allclose(lhs, rhs)


def test_local_dissipator_matrix_single_site():
    gamma = 1.7
    D = ops.local_dissipator_matrix(gamma)
    rho = random_density_matrix(2, 8)
    sm = np.array([[0, 0], [1, 0]], complex)  # lowers z: |up> -> |down>
    sp_ = sm.T.conj()
    ref = gamma * (sm @ rho @ sp_ - 0.5 * (sp_ @ sm @ rho + rho @ sp_ @ sm))
    out = ops.unvec(D @ ops.vec(rho))
    assert np.allclose(out, ref)


class TestStates:
    def test_all_down_product_state(self):
        psi = ops.product_state([ops.single_qubit_state(None)] * 3)
        state = ops.QuantumState.pure(psi)
        for site in range(3):
            assert state.expect(ops.pauli_at("z", site, 3)) == pytest.approx(-1.0)

    def test_tilted_qubit_expectations(self):
        angle = 0.8
        psi = ops.single_qubit_state(angle)
        state = ops.QuantumState.pure(psi)
        assert state.expect(ops.pauli_at("x", 0, 1)) == pytest.approx(np.cos(angle))
        assert state.expect(ops.pauli_at("y", 0, 1)) == pytest.approx(np.sin(angle))
        assert state.expect(ops.pauli_at("z", 0, 1)) == pytest.approx(0.0, abs=1e-12)

    def test_density_validation_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            ops.QuantumState.density(np.array([[1.0, 0.5], [0.4, 0.0]]))
        with pytest.raises(ValueError):
            ops.QuantumState.density(np.diag([1.5, -0.5]))

    def test_pure_validation_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            ops.QuantumState.pure(np.array([1.0, 1.0]))

    def test_expectation_returns_real(self):
        rho = random_density_matrix(8, 12)
        val = ops.expectation(ops.pauli_at("y", 1, 3), rho)
        assert isinstance(val, float)
