"""Backward least-squares Monte Carlo solver for the adjoint processes.

The backward sweep estimates, per time step, three conditional expectations
by cross-sectional polynomial regression over the path ensemble:

    Q_k      from the Brownian-increment covariation of the next adjoint state,
    phi_kj   from the compensated-event covariation (jump problems),
    psi_k    from propagating the next adjoint state plus its drift.

Regressed (fitted) values are propagated backward, so every stored process is
a function of the Markov state at its own step.  The terminal adjoint state
is set exactly from the terminal cost gradient.

The same module hosts the inner product on drift/diffusion/jump intensity
triples and the duality check pairing the adjoint triple against a control
perturbation, which must reproduce the variational cost derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .control import RelaxedControl
from .errors import DomainError, ShapeMismatch, SingularRegression
from .forward import PathEnsemble, step_weights
from .problem import (
    Problem,
    averaged_diffusion,
    averaged_diffusion_x,
    averaged_drift,
    averaged_drift_x,
    averaged_jump,
    averaged_jump_x,
    averaged_running_cost_x,
)
from .variation import VariationEnsemble, response_functional

COND_LIMIT = 1e12
RIDGE_SCALE = 1e-8
DEGENERATE_STD = 1e-12


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial regression basis: all state monomials of total degree <= degree."""

    degree: int = 2

    def exponents(self, n: int) -> list:
        exps = [(0,) * n]
        for deg in range(1, self.degree + 1):
            for combo in combinations_with_replacement(range(n), deg):
                alpha = [0] * n
                for idx in combo:
                    alpha[idx] += 1
                exps.append(tuple(alpha))
        return exps

    def features(self, x: np.ndarray) -> np.ndarray:
        """Design matrix (M, P) of monomials in the state components."""
        x = np.atleast_2d(x)
        cols = []
        for alpha in self.exponents(x.shape[1]):
            col = np.ones(x.shape[0])
            for dim, e in enumerate(alpha):
                if e:
                    col = col * x[:, dim] ** e
            cols.append(col)
        return np.stack(cols, axis=1)


@dataclass
class StepDiagnostics:
    step: int
    cond: float
    ridge: bool
    orthogonality: float
    psi_second_moment: float = 0.0


def _regress(X: np.ndarray, Y: np.ndarray, step: int) -> tuple[np.ndarray, StepDiagnostics]:
    """Least-squares fit of every column of Y onto the design X.

    Columns are standardized for conditioning (the fit is invariant to that
    reparametrization); degenerate columns are dropped, and a trace-scaled
    ridge is added when the normal matrix condition number exceeds the limit.
    Returns fitted values of Y's shape.
    """
    M = X.shape[0]
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    keep = sd > DEGENERATE_STD * (1.0 + np.abs(mu))
    Z = np.ones((M, 1 + int(keep.sum())))
    Z[:, 1:] = (X[:, keep] - mu[keep]) / sd[keep]
    G = Z.T @ Z
    c = Z.T @ Y
    cond = float(np.linalg.cond(G))
    ridge = not np.isfinite(cond) or cond > COND_LIMIT
    if ridge:
        G = G + (RIDGE_SCALE * np.trace(G) / G.shape[0]) * np.eye(G.shape[0])
    try:
        beta = np.linalg.solve(G, c)
    except np.linalg.LinAlgError as exc:
        raise SingularRegression(step, str(exc)) from exc
    if not np.all(np.isfinite(beta)):
        raise SingularRegression(step, "non-finite regression coefficients")
    fitted = Z @ beta
    ortho = float(np.abs(Z.T @ (Y - fitted)).max() / M)
    return fitted, StepDiagnostics(step, cond, ridge, ortho)


@dataclass(frozen=True)
class AdjointEnsemble:
    """Adjoint state, diffusion intensity, and jump intensity per path and step.

    psi[:, N] equals the terminal cost gradient exactly.  psi_cont[:, k] is
    the conditional mean of psi[:, k+1] given the step-k state; it is the
    value the duality pairing and the Hamiltonian integrate against on
    (t_k, t_{k+1}], and differs from psi[:, k] by the drift increment.
    """

    psi: np.ndarray  # (M, N+1, n)
    psi_cont: np.ndarray  # (M, N, n)
    Q: np.ndarray  # (M, N, n, m)
    phi: np.ndarray | None  # (M, N, J, n)
    basis_spec: BasisSpec
    conditioning: list


def solve_bsde(
    p: Problem, base: PathEnsemble, u0: RelaxedControl, basis_spec: BasisSpec | None = None
) -> AdjointEnsemble:
    """Backward regression sweep producing the adjoint triple on the ensemble.

    Per step k (from N-1 down to 0), with psi_next the fitted adjoint state
    at k+1:

      Q_k      <- fit of psi_next dW_k^T / dt,
      phi_kj   <- fit of psi_next (dN_kj - lam_j dt) / (lam_j dt),
      psi_k    <- fit of psi_next + [b_x^T psi_next + V_Q + l_x
                                      + sum_j lam_j C_x^T phi_kj] dt,

    all conditioned on the step-k state through the polynomial basis.  One
    normal-matrix factorization per step serves every target.
    """
    basis = basis_spec or BasisSpec()
    if not isinstance(base.control_used, RelaxedControl) or not np.array_equal(
        base.control_used.weights, u0.weights
    ):
        raise ShapeMismatch("base ensemble was not simulated under u0")
    noise = base.noise
    M, N, dt = base.M, base.n_steps, base.dt
    n, m = p.n, p.m
    J = p.jump.J if p.jump is not None else 0
    lam = p.jump.intensities if p.jump is not None else None
    grid = u0.grid

    psi = np.empty((M, N + 1, n))
    psi_cont = np.empty((M, N, n))
    Q = np.empty((M, N, n, m))
    phi = np.empty((M, N, J, n)) if J else None
    diagnostics = []

    psi[:, N] = np.asarray(p.phi_x(base.states[:, N]), dtype=float)
    for k in range(N - 1, -1, -1):
        t = k * dt
        x = base.states[:, k]
        w0 = step_weights(base, u0, k)
        psi_next = psi[:, k + 1]
        X = basis.features(x)

        targets = [psi_next, (psi_next[:, :, None] * noise.dW[:, k][:, None, :] / dt).reshape(M, n * m)]
        if J:
            dq = noise.jump_counts[:, k] - lam * dt  # (M, J)
            tj = psi_next[:, None, :] * (dq / (lam * dt))[:, :, None]  # (M, J, n)
            targets.append(tj.reshape(M, J * n))
        stacked = np.concatenate(targets, axis=1)
        fitted, diag = _regress(X, stacked, k)
        cont = fitted[:, :n]
        Qk = fitted[:, n : n + n * m].reshape(M, n, m)
        if J:
            phik = fitted[:, n + n * m :].reshape(M, J, n)
            phi[:, k] = phik

        bx = averaged_drift_x(p, grid, t, x, w0)  # (M, n, n)
        sx = averaged_diffusion_x(p, grid, t, x, w0)  # (M, n, m, n)
        drift = np.einsum("qij,qi->qj", bx, psi_next)
        drift += np.einsum("qab,qabl->ql", Qk, sx)
        drift += averaged_running_cost_x(p, grid, t, x, w0)
        if J:
            for j in range(J):
                cx = averaged_jump_x(p, grid, t, x, p.jump.marks[j], w0)
                drift += lam[j] * np.einsum("qij,qi->qj", cx, phik[:, j])
        fitted_psi, diag_psi = _regress(X, psi_next + drift * dt, k)
        psi[:, k] = fitted_psi
        psi_cont[:, k] = cont
        Q[:, k] = Qk
        diag.orthogonality = max(diag.orthogonality, diag_psi.orthogonality)
        diag.psi_second_moment = float(np.mean(np.sum(fitted_psi**2, axis=1)))
        diagnostics.append(diag)

    diagnostics.reverse()
    for arr in (psi, psi_cont, Q) + ((phi,) if J else ()):
        arr.setflags(write=False)
    return AdjointEnsemble(psi, psi_cont, Q, phi, basis, diagnostics)


def v_q(p: Problem, grid, Q_k: np.ndarray, t: float, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Vector V with components V_l = tr(Q_k^T sigma_x(t, x, w; e_l)).

    Bilinear in (Q_k, sigma_x); batched over paths when x is (M, n).
    """
    sx = averaged_diffusion_x(p, grid, t, x, w)
    Qk = np.asarray(Q_k, dtype=float)
    if sx.ndim == 3:  # single sample
        return np.einsum("ab,abl->l", Qk, sx)
    if Qk.ndim == 2:
        Qk = np.broadcast_to(Qk, sx.shape[:1] + Qk.shape)
    return np.einsum("qab,qabl->ql", Qk, sx)


@dataclass(frozen=True)
class Semimartingale:
    """Drift/diffusion/jump intensity triple of a square-integrable
    semimartingale started at zero, sampled per path and step."""

    v: np.ndarray  # (M, N, n)
    Sigma: np.ndarray  # (M, N, n, m)
    dt: float
    phi: np.ndarray | None = None  # (M, N, J, n)
    intensities: np.ndarray | None = None  # (J,)

    def __post_init__(self):
        if self.v.ndim != 3 or self.Sigma.ndim != 4:
            raise ShapeMismatch("intensities must be (M, N, n) and (M, N, n, m)")
        if self.v.shape[:2] != self.Sigma.shape[:2] or self.v.shape[2] != self.Sigma.shape[2]:
            raise ShapeMismatch("drift and diffusion intensities disagree on dimensions")
        if (self.phi is None) != (self.intensities is None):
            raise ShapeMismatch("jump intensity needs both phi and the jump rates")
        if self.phi is not None and (
            self.phi.shape[:2] != self.v.shape[:2] or self.phi.shape[3] != self.v.shape[2]
        ):
            raise ShapeMismatch("jump intensity dimensions do not match")
        if self.dt <= 0:
            raise DomainError("dt must be positive")
        for arr in (self.v, self.Sigma, self.phi):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DomainError("semimartingale intensities must be finite")


def sm_inner(a: Semimartingale, b: Semimartingale) -> float:
    """Inner product of two semimartingales through their intensity triples:
    time-quadrature Monte Carlo of the drift pairing, the diffusion trace
    pairing, and (when present) the jump pairing weighted by the jump rates.
    """
    if a.v.shape != b.v.shape or a.Sigma.shape != b.Sigma.shape or a.dt != b.dt:
        raise ShapeMismatch("semimartingales live on different grids")
    if (a.phi is None) != (b.phi is None):
        raise ShapeMismatch("one operand has a jump intensity, the other does not")
    total = np.einsum("qki,qki->qk", a.v, b.v) + np.einsum("qkab,qkab->qk", a.Sigma, b.Sigma)
    if a.phi is not None:
        if not np.array_equal(a.intensities, b.intensities):
            raise ShapeMismatch("jump rates differ")
        total = total + np.einsum("j,qkji,qkji->qk", a.intensities, a.phi, b.phi)
    return float(a.dt * total.sum(axis=1).mean())


def sm_norm(a: Semimartingale) -> float:
    return float(np.sqrt(max(sm_inner(a, a), 0.0)))


def adjoint_pairing(
    p: Problem, base: PathEnsemble, u0: RelaxedControl, u: RelaxedControl, adjoint: AdjointEnsemble
) -> float:
    """Pairing of the adjoint triple with the direction u - u0: the drift,
    diffusion-trace, and jump pairings of the coefficient differences,
    quadratured over the grid and averaged over paths."""
    N, dt = base.n_steps, base.dt
    grid = u0.grid
    lam = p.jump.intensities if p.jump is not None else None
    total = 0.0
    for k in range(N):
        t = k * dt
        x = base.states[:, k]
        dw = step_weights(base, u, k) - step_weights(base, u0, k)
        b_diff = averaged_drift(p, grid, t, x, dw)
        s_diff = averaged_diffusion(p, grid, t, x, dw)
        term = np.einsum("qi,qi->q", adjoint.psi_cont[:, k], b_diff)
        term += np.einsum("qab,qab->q", adjoint.Q[:, k], s_diff)
        if p.jump is not None:
            for j in range(p.jump.J):
                c_diff = averaged_jump(p, grid, t, x, p.jump.marks[j], dw)
                term += lam[j] * np.einsum("qi,qi->q", adjoint.phi[:, k, j], c_diff)
        total += dt * float(term.mean())
    return total


def duality_gap(
    p: Problem,
    base: PathEnsemble,
    u0: RelaxedControl,
    u: RelaxedControl,
    adjoint: AdjointEnsemble,
    var: VariationEnsemble,
) -> float:
    """Absolute mismatch between the variational functional and the adjoint
    pairing for the same direction.  Both sides estimate the state-response
    part of the cost derivative by independent routes, so a small gap is the
    working certificate that the adjoint triple represents that derivative.
    """
    lhs = response_functional(p, base, u0, var)
    rhs = adjoint_pairing(p, base, u0, u, adjoint)
    return abs(lhs - rhs)
