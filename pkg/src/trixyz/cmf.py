"""Cluster dynamics with self-consistent boundary fields.

Two backends integrate the same master equation: a dense fixed-step RK4 on
the cluster density matrix (practical through 10 sites), and a stochastic
wave-function unraveling for larger clusters, batched over trajectories.
Boundary bonds couple each edge site to the running sublattice-mean
magnetization of the cluster itself; a cluster with no site on some
sublattice (the single-site cluster) falls back to the whole-cluster mean,
which reduces exactly to the uniform sector of the Bloch equations.

All times and rates are quoted in units of 1/gamma and gamma respectively;
control values are rescaled internally by the actual loss rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import meanfield
from .lattice import SUBLATTICE_LETTERS, ClusterGeometry, build_cluster
from .operators import (
    AXES,
    Couplings,
    LiouvilleOperator,
    QuantumState,
    build_hamiltonian,
    build_liouvillian,
    down_mask,
    flip_indices,
    pauli_at,
    product_state,
    single_qubit_state,
    up_counts,
)

SUBLATTICE_ANGLES = (0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0)

#: largest cluster the dense density-matrix integrator will attempt
DENSE_EVOLVE_MAX_SITES = 11


# ---------------------------------------------------------------------------
# initial states


def product_state_120(geometry: ClusterGeometry) -> np.ndarray:
    """Pure product state with sublattice spins at in-plane angles 120 deg
    apart."""
    return product_state(
        [
            single_qubit_state(SUBLATTICE_ANGLES[geometry.sublattices[j]])
            for j in range(geometry.size)
        ]
    )


def all_down_state(geometry: ClusterGeometry) -> np.ndarray:
    return product_state([single_qubit_state(None)] * geometry.size)


def product_density(
    geometry: ClusterGeometry, bloch_by_sublattice: np.ndarray
) -> np.ndarray:
    """Product density matrix from one Bloch vector per sublattice.

    Accepts mixed single-site states (|m| < 1), which pure product states
    cannot represent.
    """
    bloch = np.asarray(bloch_by_sublattice, dtype=float)
    if bloch.shape != (3, 3):
        raise ValueError("expected one Bloch 3-vector per sublattice")
    if np.linalg.norm(bloch, axis=1).max() > 1.0 + 1e-9:
        raise ValueError("Bloch vectors must have length <= 1")
    sigma = (
        np.array([[0, 1], [1, 0]], complex),
        np.array([[0, -1j], [1j, 0]], complex),
        np.array([[1, 0], [0, -1]], complex),
    )
    rho = np.array([[1.0]], dtype=complex)
    for site in range(geometry.size):
        m = bloch[geometry.sublattices[site]]
        local = 0.5 * (np.eye(2) + sum(mi * s for mi, s in zip(m, sigma)))
        rho = np.kron(rho, local)
    return rho


# ---------------------------------------------------------------------------
# shared cluster workspace


class _ClusterOperators:
    """Precomputed bit-permutation tables and boundary-bond operators."""

    def __init__(self, geometry: ClusterGeometry, c: Couplings):
        self.geometry = geometry
        self.c = c
        n = geometry.size
        self.dim = 2**n
        self.flips = [flip_indices(n, j) for j in range(n)]
        self.downs = [down_mask(n, j) for j in range(n)]
        # sign s(idx) = +1 where the site points down; sigma_y gathers carry
        # i * s(idx)
        self.ysigns = [np.where(d, 1.0, -1.0) for d in self.downs]
        self.hamiltonian = build_hamiltonian(geometry, c)
        self.liouville = build_liouvillian(self.hamiltonian, n, c.gamma)
        # boundary-bond accumulators: one operator per (ext sublattice, axis),
        # already summed over the bonds that see that sublattice
        self.boundary_ops: dict[tuple[int, str], sp.csr_matrix] = {}
        for bond in geometry.boundary_bonds:
            for axis in AXES:
                key = (bond.ext_sublattice, axis)
                op = pauli_at(axis, bond.site, n)
                if key in self.boundary_ops:
                    self.boundary_ops[key] = self.boundary_ops[key] + op
                else:
                    self.boundary_ops[key] = op
        # dense copies for the density-matrix backend, where the coefficient
        # update runs inside every integrator stage
        self.boundary_dense = (
            {k: np.asarray(v.todense()) for k, v in self.boundary_ops.items()}
            if self.dim <= 2048
            else None
        )
        self.sublattice_sites = [
            geometry.sublattice_sites(s) for s in range(3)
        ]

    def site_bloch_dense(self, rho: np.ndarray) -> np.ndarray:
        """Per-site (x, y, z) expectations of a cluster density matrix."""
        n = self.geometry.size
        out = np.empty((n, 3))
        idx = np.arange(self.dim)
        diag = np.real(np.diagonal(rho))
        for j in range(n):
            cross = rho[self.flips[j], idx]
            out[j, 0] = float(np.sum(cross).real)
            out[j, 1] = float(np.sum(1j * self.ysigns[j] * cross).real)
            out[j, 2] = float(np.sum(diag * (1.0 - 2.0 * self.downs[j])))
        return out

    def site_bloch_pure(self, psi: np.ndarray) -> np.ndarray:
        """Per-site expectations for a batch of normalized pure states.

        ``psi`` has shape (dim, B); returns (B, n, 3).
        """
        n = self.geometry.size
        b = psi.shape[1]
        out = np.empty((b, n, 3))
        conj = psi.conj()
        absq = (conj * psi).real
        for j in range(n):
            gathered = psi[self.flips[j]]
            z = np.einsum("ib,ib->b", conj, gathered)
            out[:, j, 0] = z.real
            zy = np.einsum("ib,ib->b", conj * self.ysigns[j][:, None], gathered)
            out[:, j, 1] = -zy.imag
            down_pop = np.einsum("ib->b", absq[self.downs[j]])
            out[:, j, 2] = 1.0 - 2.0 * down_pop
        return out

    def sublattice_config(self, site_bloch: np.ndarray) -> np.ndarray:
        """Sublattice-mean Bloch vectors; whole-cluster mean where a
        sublattice is absent."""
        whole = site_bloch.mean(axis=0)
        out = np.empty((3, 3))
        for s in range(3):
            sites = np.asarray(self.sublattice_sites[s], dtype=int)
            out[s] = site_bloch[sites].mean(axis=0) if sites.size else whole
        return out

    def boundary_hamiltonian(self, fields: np.ndarray) -> sp.csr_matrix:
        """Mean-field coupling of edge sites to frozen external moments."""
        js = self.c.as_array()
        h = sp.csr_matrix((self.dim, self.dim), dtype=complex)
        for (sub, axis), op in self.boundary_ops.items():
            coeff = js[AXES.index(axis)] * fields[sub, AXES.index(axis)]
            if coeff != 0.0:
                h = h + coeff * op
        return h

    def boundary_hamiltonian_dense(self, fields: np.ndarray) -> np.ndarray:
        js = self.c.as_array()
        h = np.zeros((self.dim, self.dim), dtype=complex)
        for (sub, axis), op in self.boundary_dense.items():
            coeff = js[AXES.index(axis)] * fields[sub, AXES.index(axis)]
            if coeff != 0.0:
                h += coeff * op
        return h


# ---------------------------------------------------------------------------
# dense RK4 backend


@dataclass(frozen=True)
class EvolveControls:
    """Dense-backend knobs, in units of 1/gamma.

    ``field_every`` sets the refresh cadence of the self-consistent
    boundary fields; ``None`` re-evaluates them inside every integrator
    stage. A finite cadence is not merely cheaper: holding the fields
    between refreshes feeds the cluster a slightly stale mean field, which
    can destabilize strongly ordered attractors that the continuously
    updated flow keeps stable.
    """

    dt: float = 0.01
    t_max: float = 500.0
    sample_every: float = 0.1
    steady_window: float = 10.0
    steady_tol: float = 1e-6
    fields: str = "self"  # "self" or "off"
    field_every: float | None = None
    rehermitize_every: int = 50

    def __post_init__(self):
        if self.dt <= 0 or self.t_max <= 0 or self.steady_tol <= 0:
            raise ValueError("dt, t_max and steady_tol must be positive")
        if self.fields not in ("self", "off"):
            raise ValueError("fields must be 'self' or 'off'")
        if self.field_every is not None and self.field_every <= 0:
            raise ValueError("field_every must be positive when set")


@dataclass
class CmfState:
    cluster: ClusterGeometry
    state: QuantumState
    boundary_fields: dict[str, np.ndarray]
    time: float


@dataclass
class CmfResult:
    final: CmfState
    converged: bool
    times: np.ndarray
    site_bloch_history: np.ndarray  # (n_samples, L, 3)
    residual_history: np.ndarray  # sliding-window variation per sample

    @property
    def site_bloch(self) -> np.ndarray:
        return self.site_bloch_history[-1]


def _as_density(initial, dim: int) -> np.ndarray:
    if isinstance(initial, QuantumState):
        rho = initial.density_matrix()
    else:
        arr = np.asarray(initial, dtype=complex)
        rho = np.outer(arr, arr.conj()) if arr.ndim == 1 else arr
    if rho.shape != (dim, dim):
        raise ValueError(f"initial state has dimension {rho.shape}, need {dim}")
    return rho.copy()


def evolve_cmf(
    geometry: ClusterGeometry,
    c: Couplings,
    initial,
    controls: EvolveControls | None = None,
) -> CmfResult:
    """Integrate the cluster master equation with self-consistent edge
    fields until the steady-state criterion or the time budget is met.

    By default the boundary fields are re-evaluated from the integrated
    state inside every RK4 stage, so the single-site cluster reproduces
    the uniform Bloch flow to integrator accuracy; a finite
    ``controls.field_every`` instead holds them fixed between refreshes.
    Non-convergence is reported, not raised: oscillatory attractors are
    legitimate output and the sampled history stays available for
    inspection.
    """
    controls = controls or EvolveControls()
    if geometry.size > DENSE_EVOLVE_MAX_SITES:
        # guard before any 4^L allocation is attempted
        raise ValueError(
            f"dense backend supports at most {DENSE_EVOLVE_MAX_SITES} sites; "
            "use run_trajectories"
        )
    ops = _ClusterOperators(geometry, c)
    rho = _as_density(initial, ops.dim)

    gamma = c.gamma
    dt = controls.dt / gamma
    n_steps = int(round(controls.t_max / gamma / dt))
    steps_per_sample = max(1, int(round(controls.sample_every / gamma / dt)))
    window = max(2, int(round(controls.steady_window / controls.sample_every)))
    self_fields = controls.fields == "self"
    steps_per_field = (
        max(1, int(round(controls.field_every / gamma / dt)))
        if controls.field_every is not None
        else None
    )
    held_hb = None  # frozen boundary Hamiltonian on a finite field cadence

    def rhs(state: np.ndarray) -> np.ndarray:
        out = ops.liouville.apply_rho(state)
        if self_fields:
            if held_hb is None:
                fields = ops.sublattice_config(ops.site_bloch_dense(state))
                hb = ops.boundary_hamiltonian_dense(fields)
            else:
                hb = held_hb
            out = out - 1j * (hb @ state - state @ hb)
        return out

    times = [0.0]
    history = [ops.site_bloch_dense(rho)]
    residuals = [np.inf]
    converged = False

    for step in range(1, n_steps + 1):
        if (
            self_fields
            and steps_per_field is not None
            and (step - 1) % steps_per_field == 0
        ):
            fields = ops.sublattice_config(ops.site_bloch_dense(rho))
            held_hb = ops.boundary_hamiltonian_dense(fields)
        k1 = rhs(rho)
        k2 = rhs(rho + 0.5 * dt * k1)
        k3 = rhs(rho + 0.5 * dt * k2)
        k4 = rhs(rho + dt * k3)
        rho = rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if step % controls.rehermitize_every == 0:
            rho = 0.5 * (rho + rho.conj().T)
            rho = rho / np.trace(rho).real
        if step % steps_per_sample == 0:
            times.append(step * dt)
            history.append(ops.site_bloch_dense(rho))
            if len(history) > window:
                block = np.asarray(history[-window:])
                variation = float(np.max(block.max(axis=0) - block.min(axis=0)))
            else:
                variation = np.inf
            residuals.append(variation)
            if variation < controls.steady_tol:
                converged = True
                break

    rho = 0.5 * (rho + rho.conj().T)
    rho = rho / np.trace(rho).real
    final_bloch = ops.site_bloch_dense(rho)
    fields = ops.sublattice_config(final_bloch)
    applied = fields if self_fields else np.zeros((3, 3))
    state = QuantumState.density(rho)
    return CmfResult(
        final=CmfState(
            cluster=geometry,
            state=state,
            boundary_fields={
                SUBLATTICE_LETTERS[s]: applied[s].copy() for s in range(3)
            },
            time=float(times[-1]),
        ),
        converged=converged,
        times=np.asarray(times),
        site_bloch_history=np.asarray(history),
        residual_history=np.asarray(residuals),
    )


# ---------------------------------------------------------------------------
# order parameters


@dataclass(frozen=True)
class OrderParams:
    o_af: float
    o_ntaf: float
    site_sx: tuple[float, ...]
    o_af_y: float
    o_ntaf_y: float

    def __post_init__(self):
        if self.o_ntaf > self.o_af + 1e-12:
            raise ValueError("net magnetization cannot exceed the mean of moduli")


def order_parameters(source) -> OrderParams:
    """Staggered-insensitive and net in-plane order parameters.

    ``source`` may be a CmfResult, a CmfState, a TrajectoryEnsemble, or a
    plain (L, 3) array of per-site Bloch vectors.
    """
    if isinstance(source, CmfResult):
        bloch = source.site_bloch
    elif isinstance(source, CmfState):
        ops = _ClusterOperators(source.cluster, Couplings(0, 0, 0))
        bloch = ops.site_bloch_dense(source.state.density_matrix())
    elif isinstance(source, TrajectoryEnsemble):
        bloch = source.site_bloch_mean
    else:
        bloch = np.asarray(source, dtype=float)
        if bloch.ndim != 2 or bloch.shape[1] != 3:
            raise ValueError("expected per-site Bloch vectors of shape (L, 3)")
    sx = bloch[:, 0]
    sy = bloch[:, 1]
    return OrderParams(
        o_af=float(np.mean(np.abs(sx))),
        o_ntaf=float(abs(np.mean(sx))),
        site_sx=tuple(float(v) for v in sx),
        o_af_y=float(np.mean(np.abs(sy))),
        o_ntaf_y=float(abs(np.mean(sy))),
    )


# ---------------------------------------------------------------------------
# phase labels from cluster dynamics


def classify_cmf_result(result: CmfResult, eps_eq: float = 1e-4) -> str:
    """Label the attractor reached by a cluster evolution."""
    if result.converged:
        ops_cfg = _sublattice_config_static(result)
        return meanfield.classify_config(ops_cfg, eps_eq=eps_eq)
    history = result.site_bloch_history
    tail = history[len(history) // 2 :]
    swing = float(np.max(tail.max(axis=0) - tail.min(axis=0)))
    return meanfield.OSC if swing > 1e-3 else meanfield.UNDETERMINED


def _sublattice_config_static(result: CmfResult) -> np.ndarray:
    geometry = result.final.cluster
    bloch = result.site_bloch
    whole = bloch.mean(axis=0)
    out = np.empty((3, 3))
    for s in range(3):
        sites = np.asarray(geometry.sublattice_sites(s), dtype=int)
        out[s] = bloch[sites].mean(axis=0) if sites.size else whole
    return out


def bistability_scan(
    geometry: ClusterGeometry,
    c: Couplings,
    initial_set,
    controls: EvolveControls | None = None,
) -> set[str]:
    """Distinct attractor labels reached from a collection of initial states.

    The single-site cluster delegates to the three-sublattice Bloch flow
    (initial entries are then (3, 3) sublattice configurations); larger
    clusters evolve each initial density matrix with the dense backend.
    """
    initial_set = list(initial_set)
    if len(initial_set) < 2:
        raise ValueError("need at least two initial states")
    labels = set()
    if geometry.size == 1:
        for m0 in initial_set:
            labels.add(meanfield.classify_phase(c, initial_states=[np.asarray(m0, float)]))
        return labels
    for initial in initial_set:
        labels.add(classify_cmf_result(evolve_cmf(geometry, c, initial, controls)))
    return labels


# ---------------------------------------------------------------------------
# quantum-trajectory backend


@dataclass(frozen=True)
class TrajectoryControls:
    """Unraveling knobs, in units of 1/gamma."""

    dt: float = 0.005
    t_total: float = 80.0
    burn_in: float = 30.0
    sample_every: float = 0.1
    field_every: float = 0.1
    n_traj: int = 500
    master_seed: int = 2024
    batch_size: int = 64
    fields: str = "self"  # "self" or "off"
    collect_correlations: bool = False
    task_id: int = 0

    def __post_init__(self):
        if self.dt <= 0 or self.t_total <= 0:
            raise ValueError("dt and t_total must be positive")
        if not 0 <= self.burn_in < self.t_total:
            raise ValueError("burn_in must lie inside the run")
        if self.field_every <= 0:
            raise ValueError("field_every must be positive")
        if self.n_traj < 1:
            raise ValueError("need at least one trajectory")
        if self.fields not in ("self", "off"):
            raise ValueError("fields must be 'self' or 'off'")


@dataclass
class TrajectoryEnsemble:
    n_traj: int
    master_seed: int
    site_bloch_records: np.ndarray  # (n_traj, L, 3) per-trajectory time averages
    site_bloch_mean: np.ndarray  # (L, 3)
    site_bloch_stderr: np.ndarray  # (L, 3)
    times: np.ndarray  # sample times
    history_mean: np.ndarray  # (T, L, 3) ensemble mean at each sample
    history_stderr: np.ndarray  # (T, L, 3)
    correlations_mean: np.ndarray | None = None  # (L, L) sigma^x pair products
    correlations_stderr: np.ndarray | None = None
    n_jumps: np.ndarray | None = None  # per-trajectory jump counts

    @property
    def magnetization(self) -> np.ndarray:
        return self.site_bloch_mean


def blocked_steady_stats(
    ens: "TrajectoryEnsemble", t_from: float, n_blocks: int = 10
) -> tuple[np.ndarray, np.ndarray]:
    """Steady magnetizations and their standard errors from block averaging.

    With self-consistent fields the trajectories share the fluctuating
    ensemble-mean field, so the independent-trajectory standard error
    understates the uncertainty of the steady result. Blocking the
    ensemble-mean time series after ``t_from`` captures that common-mode
    wander; choose blocks several correlation times long.
    """
    keep = ens.times >= t_from
    series = ens.history_mean[keep]
    if len(series) < 2 * n_blocks:
        raise ValueError("too few samples after t_from for the block count")
    usable = (len(series) // n_blocks) * n_blocks
    blocks = series[len(series) - usable :].reshape(
        n_blocks, usable // n_blocks, *series.shape[1:]
    )
    block_means = blocks.mean(axis=1)
    mean = block_means.mean(axis=0)
    stderr = block_means.std(axis=0, ddof=1) / np.sqrt(n_blocks)
    return mean, stderr


def _trajectory_rng(master_seed: int, task_id: int, index: int) -> np.random.Generator:
    seq = np.random.SeedSequence(master_seed, spawn_key=(task_id, index))
    return np.random.Generator(np.random.Philox(seq))


def _hermite_state(psi0, psi1, d0, d1, dt, theta):
    """Cubic dense output of one RK4 step at fraction ``theta``."""
    h00 = (1 + 2 * theta) * (1 - theta) ** 2
    h10 = theta * (1 - theta) ** 2
    h01 = theta**2 * (3 - 2 * theta)
    h11 = theta**2 * (theta - 1)
    return h00 * psi0 + (h10 * dt) * d0 + h01 * psi1 + (h11 * dt) * d1


class _TrajectoryWorker:
    """Batched unraveling of the cluster master equation.

    Between jumps the unnormalized state follows the non-Hermitian drift;
    a jump fires when the squared norm falls below the trajectory's
    uniform threshold, with the crossing time located by bisection on the
    cubic dense output of the step that crossed.
    """

    def __init__(self, ops: _ClusterOperators, controls: TrajectoryControls):
        self.ops = ops
        self.controls = controls
        n = ops.geometry.size
        gamma = ops.c.gamma
        self.n_up_diag = up_counts(n)
        self.h_eff_base = (
            ops.hamiltonian
            - 0.5j * gamma * sp.diags(self.n_up_diag)
        ).tocsr()
        self.h_eff = self.h_eff_base
        self.gamma = gamma

    def set_fields(self, fields: np.ndarray | None):
        if fields is None:
            self.h_eff = self.h_eff_base
        else:
            hb = self.ops.boundary_hamiltonian(fields)
            self.h_eff = (self.h_eff_base + hb).tocsr()

    def _derivative(self, psi: np.ndarray) -> np.ndarray:
        return -1j * (self.h_eff @ psi)

    def _jump_rates(self, psi: np.ndarray) -> np.ndarray:
        """Per-site loss rates gamma * <P_up>, columns are trajectories."""
        absq = (psi.conj() * psi).real
        rates = np.empty((self.ops.geometry.size, psi.shape[1]))
        for j, down in enumerate(self.ops.downs):
            rates[j] = absq[~down].sum(axis=0)
        return self.gamma * rates

    def _apply_jump(self, psi_col: np.ndarray, site: int) -> np.ndarray:
        out = np.zeros_like(psi_col)
        down = self.ops.downs[site]
        out[down] = psi_col[self.ops.flips[site]][down]
        norm = np.linalg.norm(out)
        if norm < 1e-14:
            raise RuntimeError("jump applied to a site with no up amplitude")
        return out / norm

    def advance_interval(
        self,
        psi: np.ndarray,
        thresholds: np.ndarray,
        rngs: list,
        n_steps: int,
        dt: float,
        jump_counts: np.ndarray,
    ) -> np.ndarray:
        """March a batch through n_steps fixed RK4 steps, firing jumps."""
        for _ in range(n_steps):
            psi = self._step_with_jumps(psi, thresholds, rngs, dt, jump_counts)
        return psi

    def _rk4(self, psi: np.ndarray, dt: float, k1: np.ndarray | None = None):
        if k1 is None:
            k1 = self._derivative(psi)
        k2 = self._derivative(psi + 0.5 * dt * k1)
        k3 = self._derivative(psi + 0.5 * dt * k2)
        k4 = self._derivative(psi + dt * k3)
        return psi + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), k1

    def _step_with_jumps(self, psi, thresholds, rngs, dt, jump_counts):
        psi1, k1 = self._rk4(psi, dt)
        norms = np.einsum("ib,ib->b", psi1.conj(), psi1).real
        if np.any(norms < 1e-28):
            raise RuntimeError("state norm underflow; decrease dt or sample more often")
        crossed = np.flatnonzero(norms < thresholds)
        for b in crossed:
            psi1[:, b] = self._resolve_jump(
                psi[:, b], psi1[:, b], k1[:, b], thresholds, rngs, b, dt,
                jump_counts,
            )
        return psi1

    def _resolve_jump(
        self, psi0, psi1, d0, thresholds, rngs, b, dt, jump_counts
    ):
        """Locate the crossing inside the step, fire the jump, and finish
        the remainder of the step (repeating if the survival threshold is
        crossed again)."""
        d1 = self._derivative(psi1[:, None])[:, 0]
        target = thresholds[b]

        lo, hi = 0.0, 1.0
        # the squared norm decreases monotonically along the true solution;
        # bisect the dense output for the crossing fraction
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            trial = _hermite_state(psi0, psi1, d0, d1, dt, mid)
            if np.vdot(trial, trial).real > target:
                lo = mid
            else:
                hi = mid
        theta = 0.5 * (lo + hi)
        state = _hermite_state(psi0, psi1, d0, d1, dt, theta)
        state = state / np.linalg.norm(state)

        rng = rngs[b]
        rates = self._jump_rates(state[:, None])[:, 0]
        total = rates.sum()
        if total <= 0.0:
            raise RuntimeError("no decay channel available at jump time")
        site = int(np.searchsorted(np.cumsum(rates), rng.uniform() * total))
        site = min(site, rates.size - 1)
        state = self._apply_jump(state, site)
        jump_counts[b] += 1
        thresholds[b] = rng.uniform()

        remainder = (1.0 - theta) * dt
        if remainder <= 1e-15:
            return state
        stepped, _ = self._rk4(state[:, None], remainder)
        out = stepped[:, 0]
        if np.vdot(out, out).real < thresholds[b]:
            return self._resolve_jump(
                state, out, self._derivative(state[:, None])[:, 0],
                thresholds, rngs, b, remainder, jump_counts,
            )
        return out


def run_trajectories(
    geometry: ClusterGeometry,
    c: Couplings,
    initial,
    controls: TrajectoryControls | None = None,
) -> TrajectoryEnsemble:
    """Ensemble of stochastic wave-function trajectories for one cluster.

    Trajectory ``i`` draws every random number from its own counter-based
    stream keyed by (master_seed, task_id, i), so results are reproducible
    and independent of how trajectories are grouped into batches. With
    self-consistent fields on, all batches advance in lockstep through each
    field interval and the fields for the next interval come from the
    ensemble mean over every trajectory, reduced in trajectory order.

    The default field cadence (0.1/gamma) can deterministically destabilize
    the collective in-plane angle of a strongly ordered state even when the
    continuously-updated flow is stable; lower ``field_every`` (0.02/gamma
    suffices in the cases checked) when comparing ordered-phase
    magnetizations against the dense backend.
    """
    controls = controls or TrajectoryControls()
    ops = _ClusterOperators(geometry, c)
    worker = _TrajectoryWorker(ops, controls)
    n = geometry.size
    dim = ops.dim

    if isinstance(initial, QuantumState):
        if initial.kind != "pure":
            raise ValueError("trajectory backend needs a pure initial state")
        psi0 = np.asarray(initial.array, dtype=complex)
    else:
        psi0 = np.asarray(initial, dtype=complex)
    if psi0.shape != (dim,):
        raise ValueError(f"initial state must have dimension {dim}")
    psi0 = psi0 / np.linalg.norm(psi0)

    gamma = c.gamma
    dt = controls.dt / gamma
    sample_dt = controls.sample_every / gamma
    n_intervals = int(round(controls.t_total / gamma / sample_dt))
    burn_intervals = int(round(controls.burn_in / gamma / sample_dt))
    # field updates happen on an integer subdivision of the sampling grid so
    # every sample lands on a field boundary
    n_sub = max(1, int(round(controls.sample_every / controls.field_every)))
    steps_per_sub = max(1, int(round(sample_dt / n_sub / dt)))

    n_traj = controls.n_traj
    batch = max(1, min(controls.batch_size, n_traj))
    rngs = [
        _trajectory_rng(controls.master_seed, controls.task_id, i)
        for i in range(n_traj)
    ]
    thresholds = np.array([rng.uniform() for rng in rngs])
    states = np.repeat(psi0[:, None], n_traj, axis=1)
    jump_counts = np.zeros(n_traj, dtype=np.int64)

    pair_perms = None
    if controls.collect_correlations:
        pair_perms = {}
        for j in range(n):
            for l in range(j + 1, n):
                pair_perms[(j, l)] = ops.flips[j][ops.flips[l]]

    times = np.arange(1, n_intervals + 1) * sample_dt
    hist_sum = np.zeros((n_intervals, n, 3))
    hist_sq = np.zeros((n_intervals, n, 3))
    record_sum = np.zeros((n_traj, n, 3))
    corr_sum = np.zeros((n_traj, n, n)) if controls.collect_correlations else None
    n_avg = 0

    use_fields = controls.fields == "self"
    if use_fields:
        init_bloch = ops.site_bloch_pure(states[:, :1])[0]
        worker.set_fields(ops.sublattice_config(init_bloch))
    else:
        worker.set_fields(None)

    slices = [
        slice(start, min(start + batch, n_traj))
        for start in range(0, n_traj, batch)
    ]

    for interval in range(n_intervals):
        for sub in range(n_sub):
            for sl in slices:
                states[:, sl] = worker.advance_interval(
                    states[:, sl],
                    thresholds[sl],
                    rngs[sl.start : sl.stop],
                    steps_per_sub,
                    dt,
                    jump_counts[sl],
                )
            if use_fields and sub < n_sub - 1:
                norms = np.sqrt(
                    np.einsum("ib,ib->b", states.conj(), states).real
                )
                sub_bloch = ops.site_bloch_pure(states / norms)
                worker.set_fields(ops.sublattice_config(sub_bloch.mean(axis=0)))
        norms = np.sqrt(np.einsum("ib,ib->b", states.conj(), states).real)
        normalized = states / norms
        bloch = ops.site_bloch_pure(normalized)  # (n_traj, n, 3)
        hist_sum[interval] = bloch.sum(axis=0)
        hist_sq[interval] = (bloch**2).sum(axis=0)
        if interval >= burn_intervals:
            record_sum += bloch
            if controls.collect_correlations:
                conj = normalized.conj()
                for (j, l), perm in pair_perms.items():
                    val = np.einsum(
                        "ib,ib->b", conj, normalized[perm]
                    ).real
                    corr_sum[:, j, l] += val
                    corr_sum[:, l, j] += val
            n_avg += 1
        if use_fields:
            worker.set_fields(ops.sublattice_config(bloch.mean(axis=0)))

    if n_avg == 0:
        raise RuntimeError("no samples collected after burn-in")

    records = record_sum / n_avg
    mean = records.mean(axis=0)
    if n_traj > 1:
        stderr = records.std(axis=0, ddof=1) / np.sqrt(n_traj)
    else:
        stderr = np.zeros_like(mean)
    hist_mean = hist_sum / n_traj
    if n_traj > 1:
        hist_var = (hist_sq - n_traj * hist_mean**2) / (n_traj - 1)
        hist_stderr = np.sqrt(np.clip(hist_var, 0.0, None) / n_traj)
    else:
        hist_stderr = np.zeros_like(hist_mean)

    corr_mean = corr_stderr = None
    if controls.collect_correlations:
        per_traj = corr_sum / n_avg
        idx = np.arange(n)
        per_traj[:, idx, idx] = 1.0
        corr_mean = per_traj.mean(axis=0)
        if n_traj > 1:
            corr_stderr = per_traj.std(axis=0, ddof=1) / np.sqrt(n_traj)
        else:
            corr_stderr = np.zeros_like(corr_mean)

    return TrajectoryEnsemble(
        n_traj=n_traj,
        master_seed=controls.master_seed,
        site_bloch_records=records,
        site_bloch_mean=mean,
        site_bloch_stderr=stderr,
        times=times,
        history_mean=hist_mean,
        history_stderr=hist_stderr,
        correlations_mean=corr_mean,
        correlations_stderr=corr_stderr,
        n_jumps=jump_counts,
    )
