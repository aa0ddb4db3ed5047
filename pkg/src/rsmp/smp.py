"""Hamiltonian evaluation, pointwise minimization, and the descent loop.

The pathwise Hamiltonian pairs the adjoint triple with the coefficients at
each control atom.  Aggregating it onto feedback cells gives the conditional
(per-cell) Hamiltonian whose per-cell minimizer is the linear-minimization
oracle of a conditional-gradient loop over the convex set of relaxed
controls: candidates are one-hot (extreme-point) controls, iterates move by
convex mixing under a halving line search on common random numbers, and the
nonnegative Hamiltonian excess of the current control certifies optimality
when it vanishes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox

from .adjoint import AdjointEnsemble, BasisSpec, solve_bsde
from .control import (
    OBSERVATION_FEEDBACK,
    OPEN_LOOP,
    CellPartition,
    ControlGrid,
    RegularControl,
    RelaxedControl,
    mix,
)
from .errors import DomainError, ShapeMismatch
from .forward import PathEnsemble, pathwise_cost, sample_noise, simulate
from .problem import (
    Problem,
    averaged_diffusion,
    averaged_drift,
    averaged_jump,
    averaged_running_cost,
)

INFO_FULL = "full"
INFO_PARTIAL = "partial"


def hamiltonian(p: Problem, grid: ControlGrid, t, x, psi, Q, phi_row, w) -> np.ndarray:
    """Relaxed-averaged Hamiltonian: drift pairing + diffusion trace pairing
    + jump pairing + running cost, averaged against the weight vector w.

    phi_row has shape (..., J, n) and is ignored for problems without jumps.
    Linear in w; batched over a leading path axis.
    """
    x = np.atleast_2d(x)
    psi = np.atleast_2d(psi)
    val = np.einsum("qi,qi->q", averaged_drift(p, grid, t, x, w), psi)
    Qb = np.asarray(Q, dtype=float)
    if Qb.ndim == 2:
        Qb = np.broadcast_to(Qb, (x.shape[0],) + Qb.shape)
    val += np.einsum("qab,qab->q", Qb, averaged_diffusion(p, grid, t, x, w))
    val += averaged_running_cost(p, grid, t, x, w)
    if p.jump is not None:
        if phi_row is None:
            raise ShapeMismatch("jump problems need the jump intensity row of the adjoint")
        phi_row = np.asarray(phi_row, dtype=float)
        if phi_row.ndim == 2:
            phi_row = np.broadcast_to(phi_row, (x.shape[0],) + phi_row.shape)
        for j in range(p.jump.J):
            cj = averaged_jump(p, grid, t, x, p.jump.marks[j], w)
            val += p.jump.intensities[j] * np.einsum("qi,qi->q", phi_row[:, j], cj)
    return val


@dataclass(frozen=True)
class HamiltonianField:
    """Hamiltonian integrand sampled at every control atom.

    values[q, k, i] is the pathwise Hamiltonian at atom i; cell_values[k, c, i]
    is its occupancy-weighted average over the paths in feedback cell c (the
    piecewise-constant conditional expectation estimate).  In partial mode the
    pathwise values are the broadcast cell averages, so they are constant
    within an observation cell by construction.
    """

    values: np.ndarray  # (M, N, K)
    cell_values: np.ndarray  # (N, C, K)
    cell_index: np.ndarray  # (M, N)
    occupancy: np.ndarray  # (N, C)
    info_mode: str
    grid: ControlGrid
    feedback_mode: str
    feedback: CellPartition | None
    dt: float


def _nearest_nonempty(cell_values_k, counts_k, centers):
    """Fill empty cells with the values of the nearest occupied cell."""
    empty = np.flatnonzero(counts_k == 0)
    if empty.size == 0:
        return
    occupied = np.flatnonzero(counts_k > 0)
    if centers is None:  # single cell, cannot be empty
        return
    for c in empty:
        d = np.linalg.norm(centers[occupied] - centers[c], axis=1)
        cell_values_k[c] = cell_values_k[occupied[int(np.argmin(d))]]


def hamiltonian_field(
    p: Problem,
    base: PathEnsemble,
    adjoint: AdjointEnsemble,
    info_mode: str = INFO_FULL,
    basis_spec: BasisSpec | None = None,
) -> HamiltonianField:
    """Evaluate the Hamiltonian at every grid atom along the ensemble and
    condition it on the feedback cells of the control in force.

    Full mode conditions on the control's own information (trivial per-step
    cells for open-loop controls, state cells for state feedback); partial
    mode requires an observation-feedback control and conditions on its
    observation cells, broadcasting the cell averages back to the paths.
    Conditioning uses piecewise-constant cell averages, so basis_spec is
    accepted for interface parity but not consulted.
    """
    u0 = base.control_used
    if not isinstance(u0, RelaxedControl):
        raise ShapeMismatch("the ensemble must be driven by a relaxed control")
    if info_mode == INFO_PARTIAL and u0.feedback_mode != OBSERVATION_FEEDBACK:
        raise DomainError("partial information needs an observation-feedback control")
    if info_mode not in (INFO_FULL, INFO_PARTIAL):
        raise DomainError(f"unknown info mode {info_mode!r}")
    M, N, dt = base.M, base.n_steps, base.dt
    grid = u0.grid
    K = grid.K
    C = u0.n_cells
    centers = u0.feedback.centers() if u0.feedback is not None else None

    values = np.empty((M, N, K))
    cell_values = np.zeros((N, C, K))
    occupancy = np.zeros((N, C), dtype=np.int64)
    cell_index = np.zeros((M, N), dtype=np.int64)
    one_hot = np.eye(K)
    for k in range(N):
        t = k * dt
        x = base.states[:, k]
        psi = adjoint.psi_cont[:, k]
        Qk = adjoint.Q[:, k]
        phik = adjoint.phi[:, k] if adjoint.phi is not None else None
        for i in range(K):
            values[:, k, i] = hamiltonian(p, grid, t, x, psi, Qk, phik, one_hot[i])
        sig = base.feedback_signal(k, u0.feedback_mode)
        cells = np.zeros(M, dtype=np.int64) if sig is None else u0.feedback.assign(sig)
        cell_index[:, k] = cells
        counts = np.bincount(cells, minlength=C)
        occupancy[k] = counts
        sums = np.zeros((C, K))
        np.add.at(sums, cells, values[:, k, :])
        nonzero = counts > 0
        cell_values[k, nonzero] = sums[nonzero] / counts[nonzero, None]
        _nearest_nonempty(cell_values[k], counts, centers)
        if info_mode == INFO_PARTIAL:
            values[:, k, :] = cell_values[k, cells]
    for arr in (values, cell_values, occupancy, cell_index):
        arr.setflags(write=False)
    return HamiltonianField(
        values, cell_values, cell_index, occupancy, info_mode, grid, u0.feedback_mode, u0.feedback, dt
    )


def pointwise_argmin(field: HamiltonianField) -> RelaxedControl:
    """One-hot relaxed control at the per-(step, cell) Hamiltonian minimizer.

    Ties break to the lowest atom index; the result is an extreme point of
    the relaxed control set with the field's own feedback structure.
    """
    idx = np.argmin(field.cell_values, axis=2)  # (N, C)
    N, C = idx.shape
    w = np.zeros((N, C, field.grid.K))
    k_ix, c_ix = np.meshgrid(np.arange(N), np.arange(C), indexing="ij")
    w[k_ix, c_ix, idx] = 1.0
    return RelaxedControl(field.grid, w, field.feedback_mode, field.feedback)


def smp_gap(field: HamiltonianField, u0: RelaxedControl) -> tuple[float, np.ndarray]:
    """Integrated Hamiltonian excess of u0 over the pointwise minimum.

    Per (step, cell): the cell Hamiltonian paired with u0's weights minus the
    cell minimum, weighted by cell occupancy; summed over cells and steps with
    the time step.  Nonnegative by construction; zero exactly at the
    pointwise argmin of the field.
    """
    N, C, K = field.cell_values.shape
    if not np.array_equal(u0.grid.points, field.grid.points):
        raise ShapeMismatch("control and field use different grids")
    if u0.feedback_mode == field.feedback_mode:
        w = u0.weights
        if w.shape != (N, C, K):
            raise ShapeMismatch("control weights do not match the field cells")
        if u0.feedback is not None and not (
            np.array_equal(u0.feedback.bounds, field.feedback.bounds)
            and u0.feedback.cells_per_dim == field.feedback.cells_per_dim
        ):
            raise ShapeMismatch("control and field bin their feedback differently")
    elif u0.feedback_mode == OPEN_LOOP:
        w = np.broadcast_to(u0.weights, (N, C, K))
    else:
        raise ShapeMismatch("control feedback structure does not match the field")
    paired = np.einsum("kci,kci->kc", field.cell_values, w)
    excess = paired - field.cell_values.min(axis=2)
    weight = field.occupancy / np.maximum(field.occupancy.sum(axis=1, keepdims=True), 1)
    per_step = np.einsum("kc,kc->k", excess, weight)
    return float(field.dt * per_step.sum()), per_step


@dataclass
class IterateRecord:
    control: RelaxedControl
    cost: float
    std_error: float
    smp_gap: float
    step_size: float | None = None


@dataclass
class OptimizationResult:
    iterates: list
    status: str  # converged | max_iters | stalled
    final_control: RelaxedControl

    def table(self) -> list:
        return [
            {
                "iteration": i,
                "cost": rec.cost,
                "std_error": rec.std_error,
                "smp_gap": rec.smp_gap,
                "step_size": rec.step_size,
            }
            for i, rec in enumerate(self.iterates)
        ]

    def to_json(self) -> str:
        return json.dumps(
            {
                "status": self.status,
                "iterates": self.table(),
                "final_control": json.loads(self.final_control.to_json()),
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class OptimizeParams:
    M: int
    N: int
    max_iters: int = 50
    tol: float = 1e-3
    seed: int = 0
    info_mode: str = INFO_FULL
    basis: BasisSpec = field(default_factory=BasisSpec)
    threads: int = 1
    line_search_floor: int = 10  # smallest step is 2**-floor


def optimize(p: Problem, u_init: RelaxedControl, params: OptimizeParams) -> OptimizationResult:
    """Conditional-gradient descent on the relaxed control set.

    Each iteration simulates under the current control on frozen common
    random numbers, solves the adjoint backward, builds the conditional
    Hamiltonian field, and takes its pointwise argmin as the candidate
    extreme point.  A halving line search over the mixing weight accepts the
    first step whose paired cost decrease clears one standard error of the
    difference estimate.  Stops when the Hamiltonian excess certificate
    drops below tol, when no step is accepted (stalled), or at max_iters.
    """
    if u_init.time_steps != params.N:
        raise ShapeMismatch("u_init step count must match params.N")
    noise = sample_noise(p, params.M, params.N, params.seed)
    u = u_init
    iterates: list[IterateRecord] = []
    status = "max_iters"
    paths = simulate(p, u, noise, threads=params.threads)
    costs = pathwise_cost(p, paths)
    for _ in range(params.max_iters):
        J = float(costs.mean())
        se = float(costs.std(ddof=1) / np.sqrt(len(costs)))
        adj = solve_bsde(p, paths, u, params.basis)
        fld = hamiltonian_field(p, paths, adj, params.info_mode)
        gap, _ = smp_gap(fld, u)
        rec = IterateRecord(u, J, se, gap)
        iterates.append(rec)
        if gap <= params.tol:
            status = "converged"
            break
        candidate = pointwise_argmin(fld)
        accepted = None
        for halving in range(params.line_search_floor + 1):
            eps = 0.5**halving
            trial = mix(u, candidate, eps)
            trial_paths = simulate(p, trial, noise, threads=params.threads)
            trial_costs = pathwise_cost(p, trial_paths)
            diff = costs - trial_costs
            se_diff = float(diff.std(ddof=1) / np.sqrt(len(diff)))
            if float(diff.mean()) >= se_diff:
                accepted = (eps, trial, trial_paths, trial_costs)
                break
        if accepted is None:
            status = "stalled"
            break
        rec.step_size = accepted[0]
        u, paths, costs = accepted[1], accepted[2], accepted[3]
    else:
        # record the state reached by the last accepted step
        J = float(costs.mean())
        se = float(costs.std(ddof=1) / np.sqrt(len(costs)))
        adj = solve_bsde(p, paths, u, params.basis)
        fld = hamiltonian_field(p, paths, adj, params.info_mode)
        gap, _ = smp_gap(fld, u)
        iterates.append(IterateRecord(u, J, se, gap))
    return OptimizationResult(iterates, status, u)


def _largest_remainder(w: np.ndarray, R: int) -> np.ndarray:
    """Apportion R slots to weights w: floor allocation plus the largest
    remainders, ties to the lowest index."""
    scaled = w * R
    counts = np.floor(scaled).astype(int)
    short = R - counts.sum()
    if short > 0:
        order = np.argsort(-(scaled - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _interleave_slots(counts: np.ndarray, weights: np.ndarray, R: int) -> np.ndarray:
    """Order the apportioned slots so atoms alternate at the sub-slot scale:
    each slot goes to the atom with the largest cumulative deficit that still
    has quota left (ties to the lowest index)."""
    assigned = np.zeros(len(counts), dtype=int)
    order = np.empty(R, dtype=int)
    for s in range(R):
        deficit = weights * (s + 1) - assigned
        deficit[assigned >= counts] = -np.inf
        order[s] = int(np.argmax(deficit))
        assigned[order[s]] += 1
    return order


def realize_regular(u_relaxed: RelaxedControl, refinement: int, seed: int | None = None) -> RegularControl:
    """Chattering realization: subdivide each step into `refinement` sub-slots
    occupied by grid atoms in proportion to the relaxed weights.

    Largest-remainder apportionment keeps the per-step time-average of each
    atom within 1/refinement of its weight; within a step the slots alternate
    by a largest-deficit rule so the switching happens at the sub-slot scale.
    Passing a seed instead shuffles the slot order per (step, cell)
    reproducibly without changing the apportionment.
    """
    if refinement < 1:
        raise DomainError("refinement must be at least 1")
    N, C, K = u_relaxed.weights.shape
    d = u_relaxed.grid.d
    values = np.empty((N * refinement, C, d))
    rng = Generator(Philox(key=seed)) if seed is not None else None
    for k in range(N):
        for c in range(C):
            w = u_relaxed.weights[k, c]
            counts = _largest_remainder(w, refinement)
            slot_atoms = _interleave_slots(counts, w, refinement)
            if rng is not None:
                rng.shuffle(slot_atoms)
            values[k * refinement : (k + 1) * refinement, c] = u_relaxed.grid.points[slot_atoms]
    return RegularControl(values, u_relaxed.grid.box, u_relaxed.feedback_mode, u_relaxed.feedback)
