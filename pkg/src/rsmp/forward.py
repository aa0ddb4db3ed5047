"""Forward simulation of controlled (jump-)diffusions on a fixed time grid.

All randomness is pre-drawn into a NoiseEnsemble from counter-based Philox
substreams, one per path, so a simulation is a pure function of (problem,
control, noise) and is bit-identical for any worker count.  Jumps use a
finite atomic jump measure; each step applies the event counts minus their
compensator at the left endpoint.
"""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

from .control import OBSERVATION_FEEDBACK, OPEN_LOOP, RegularControl, RelaxedControl
from .errors import BlowUp, DomainError, NonFiniteCoefficient, ShapeMismatch
from .problem import (
    GaussianInitial,
    Problem,
    averaged_diffusion,
    averaged_drift,
    averaged_jump,
    averaged_running_cost,
)

BLOWUP_GUARD = 1e9
_BLOCK = 8192  # fixed path block size; keeps results independent of worker count


@dataclass(frozen=True)
class NoiseEnsemble:
    """Pre-drawn driving noise: Brownian increments, jump counts, initial draws.

    dW has shape (M, N, m) with variance dt per component; jump_counts has
    shape (M, N, J) (None without jumps); initial_normals holds the standard
    normal draws used by a stochastic initial state (None when deterministic).
    Path i draws from the Philox substream with counter offset i, so streams
    are independent across paths and reproducible from (seed, i) alone.
    """

    M: int
    N: int
    m: int
    dt: float
    seed: int
    dW: np.ndarray
    jump_counts: np.ndarray | None
    initial_normals: np.ndarray | None
    stream_ids: np.ndarray

    def coarsen(self, factor: int) -> "NoiseEnsemble":
        """Aggregate to a grid coarser by `factor`: increments and counts sum
        over consecutive fine steps, so the same driving paths are reused."""
        if self.N % factor != 0:
            raise DomainError("factor must divide the step count")
        Nc = self.N // factor
        dW = self.dW.reshape(self.M, Nc, factor, self.m).sum(axis=2)
        counts = None
        if self.jump_counts is not None:
            J = self.jump_counts.shape[2]
            counts = self.jump_counts.reshape(self.M, Nc, factor, J).sum(axis=2)
        return NoiseEnsemble(
            self.M, Nc, self.m, self.dt * factor, self.seed, dW, counts, self.initial_normals, self.stream_ids
        )


def sample_noise(p: Problem, M: int, N: int, seed: int) -> NoiseEnsemble:
    """Draw the full noise ensemble for M paths on an N-step grid.

    Per-path draw order is fixed: initial-state normals (if stochastic), then
    Brownian increments, then Poisson event counts per mark, so the same seed
    always reproduces the same ensemble bit for bit.
    """
    if M < 1 or N < 1:
        raise DomainError("M and N must be positive")
    dt = p.T / N
    gaussian_x0 = isinstance(p.x0, GaussianInitial)
    dW = np.empty((M, N, p.m))
    z0 = np.empty((M, p.n)) if gaussian_x0 else None
    counts = None
    lam_dt = None
    if p.jump is not None:
        lam_dt = np.broadcast_to(p.jump.intensities * dt, (N, p.jump.J))
        counts = np.empty((M, N, p.jump.J), dtype=np.int64)
    sqrt_dt = np.sqrt(dt)
    for i in range(M):
        gen = Generator(Philox(key=seed, counter=i << 128))
        if gaussian_x0:
            z0[i] = gen.standard_normal(p.n)
        dW[i] = sqrt_dt * gen.standard_normal((N, p.m))
        if counts is not None:
            counts[i] = gen.poisson(lam_dt)
    for arr in (dW, counts, z0):
        if arr is not None:
            arr.setflags(write=False)
    return NoiseEnsemble(M, N, p.m, dt, seed, dW, counts, z0, np.arange(M, dtype=np.int64))


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated states on the time grid plus the noise that drove them."""

    states: np.ndarray  # (M, N+1, n)
    noise: NoiseEnsemble
    control_used: object
    problem: Problem

    @property
    def M(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1] - 1

    @property
    def dt(self) -> float:
        return self.noise.dt

    @property
    def horizon(self) -> float:
        return self.noise.dt * self.n_steps

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def feedback_signal(self, k: int, mode: str):
        """Signal that resolves feedback cells at step k, or None for open loop."""
        if mode == OPEN_LOOP:
            return None
        x = self.states[:, k]
        if mode == OBSERVATION_FEEDBACK:
            return self.problem.observation(x)
        return x


def step_weights(paths: PathEnsemble, u: RelaxedControl, k: int) -> np.ndarray:
    """Per-path weight vectors of u at step k, resolved on the ensemble."""
    signal = paths.feedback_signal(k, u.feedback_mode)
    if signal is None:
        return np.broadcast_to(u.weights[k, 0], (paths.M, u.grid.K))
    return u.weights_at(k, signal)


def _control_values(p: Problem, u, k: int, N: int, t: float, x: np.ndarray) -> np.ndarray:
    """Point control values for a RegularControl or a plain policy callable."""
    if isinstance(u, RegularControl):
        if u.feedback_mode == OPEN_LOOP:
            sig = None
        elif u.feedback_mode == OBSERVATION_FEEDBACK:
            sig = p.observation(x)
        else:
            sig = x
        vals = u.values_at(k, N, sig)
    else:
        vals = np.asarray(u(t, x), dtype=float)
    return np.broadcast_to(vals, (x.shape[0], p.d))


def _simulate_block(p: Problem, u, noise: NoiseEnsemble, grid, sl: slice, out: np.ndarray):
    N, dt = noise.N, noise.dt
    x = out[sl, 0]
    relaxed = isinstance(u, RelaxedControl)
    lam = p.jump.intensities if p.jump is not None else None
    for k in range(N):
        t = k * dt
        if relaxed:
            if u.feedback_mode == OPEN_LOOP:
                w = u.weights[k, 0]
            elif u.feedback_mode == OBSERVATION_FEEDBACK:
                w = u.weights_at(k, p.observation(x))
            else:
                w = u.weights_at(k, x)
            drift = averaged_drift(p, grid, t, x, w)
            diff = averaged_diffusion(p, grid, t, x, w)
        else:
            xi = _control_values(p, u, k, N, t, x)
            drift = np.asarray(p.b(t, x, xi), dtype=float)
            diff = np.asarray(p.sigma(t, x, xi), dtype=float)
        x_next = x + drift * dt + np.einsum("qnm,qm->qn", diff, noise.dW[sl, k])
        if p.jump is not None:
            for j in range(p.jump.J):
                v = p.jump.marks[j]
                if relaxed:
                    cj = averaged_jump(p, grid, t, x, v, w)
                else:
                    cj = np.asarray(p.jump.C(t, x, v, xi), dtype=float)
                factor = noise.jump_counts[sl, k, j] - lam[j] * dt
                x_next = x_next + factor[:, None] * cj
        norms = np.abs(x_next).max(axis=1)
        if np.any(norms > BLOWUP_GUARD):
            raise BlowUp(k, float(norms.max()))
        if not np.all(np.isfinite(x_next)):
            raise NonFiniteCoefficient(f"non-finite state at step {k}")
        out[sl, k + 1] = x_next
        x = out[sl, k + 1]


def simulate(p: Problem, u, noise: NoiseEnsemble, threads: int = 1) -> PathEnsemble:
    """Euler step the controlled dynamics under a relaxed control, a regular
    control, or a plain feedback policy (t, x) -> xi.

    Feedback weights at step k are resolved from the state (or observation)
    at step k; jump events apply at the left endpoint of their step together
    with the intensity compensator.  Paths are advanced in fixed-size blocks
    so the result does not depend on the worker count.
    """
    if noise.m != p.m:
        raise ShapeMismatch("noise Brownian dimension does not match the problem")
    if p.jump is not None and (noise.jump_counts is None or noise.jump_counts.shape[2] != p.jump.J):
        raise ShapeMismatch("noise ensemble lacks jump draws for this problem")
    grid = u.grid if isinstance(u, RelaxedControl) else None
    if isinstance(u, RelaxedControl) and u.time_steps != noise.N:
        raise ShapeMismatch("control and noise disagree on step count")
    states = np.empty((noise.M, noise.N + 1, p.n))
    states[:, 0] = p.initial_states(noise.M, noise.initial_normals)
    blocks = [slice(s, min(s + _BLOCK, noise.M)) for s in range(0, noise.M, _BLOCK)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futs = [pool.submit(_simulate_block, p, u, noise, grid, sl, states) for sl in blocks]
            for f in futs:
                f.result()
    else:
        for sl in blocks:
            _simulate_block(p, u, noise, grid, sl, states)
    states.setflags(write=False)
    return PathEnsemble(states, noise, u, p)


def pathwise_cost(p: Problem, paths: PathEnsemble) -> np.ndarray:
    """Per-path cost: left-endpoint quadrature of the running cost plus the
    terminal cost, under the control recorded in the ensemble."""
    u = paths.control_used
    N, dt = paths.n_steps, paths.dt
    total = np.zeros(paths.M)
    relaxed = isinstance(u, RelaxedControl)
    for k in range(N):
        t = k * dt
        x = paths.states[:, k]
        if relaxed:
            w = step_weights(paths, u, k)
            total += averaged_running_cost(p, u.grid, t, x, w) * dt
        else:
            xi = _control_values(p, u, k, N, t, x)
            total += np.asarray(p.ell(t, x, xi), dtype=float) * dt
    total += np.asarray(p.phi(paths.states[:, N]), dtype=float)
    return total


def cost(p: Problem, paths: PathEnsemble) -> tuple[float, float]:
    """Monte Carlo cost estimate and its standard error."""
    c = pathwise_cost(p, paths)
    if not np.all(np.isfinite(c)):
        raise NonFiniteCoefficient("cost evaluation produced NaN/Inf")
    return float(c.mean()), float(c.std(ddof=1) / np.sqrt(len(c))) if len(c) > 1 else 0.0


def paths_to_csv(paths: PathEnsemble, fileobj) -> None:
    """One row per (path, step): path, step, t, x_0 .. x_{n-1}.

    UTF-8, header row, '.' decimals, LF line endings; floats use shortest
    round-trip formatting so replays are byte-identical.
    """
    close = False
    if isinstance(fileobj, (str, bytes)):
        fileobj = open(fileobj, "w", encoding="utf-8", newline="\n")
        close = True
    try:
        n = paths.states.shape[2]
        header = "path,step,t," + ",".join(f"x{i}" for i in range(n))
        fileobj.write(header + "\n")
        dt = paths.dt
        for q in range(paths.M):
            for k in range(paths.n_steps + 1):
                row = paths.states[q, k]
                fileobj.write(f"{q},{k},{dt * k!r}," + ",".join(repr(float(v)) for v in row) + "\n")
    finally:
        if close:
            fileobj.close()


def paths_to_csv_string(paths: PathEnsemble) -> str:
    buf = io.StringIO()
    paths_to_csv(paths, buf)
    return buf.getvalue()
