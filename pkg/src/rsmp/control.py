"""Probability-measure-valued controls on a finite control grid.

A relaxed control assigns, per time step and feedback cell, a probability
vector over a fixed set of control atoms.  Regular (point-valued) controls
embed as one-hot weight vectors; convex mixing and the duality pairing
against test functions operate directly on the weight arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DomainError,
    MissingPaths,
    NonFiniteCoefficient,
    ShapeMismatch,
    ValueOffGrid,
)

OPEN_LOOP = "open_loop"
STATE_FEEDBACK = "state_feedback"
OBSERVATION_FEEDBACK = "observation_feedback"

FEEDBACK_MODES = (OPEN_LOOP, STATE_FEEDBACK, OBSERVATION_FEEDBACK)

SIMPLEX_TOL = 1e-12
SNAP_TOL = 1e-9


@dataclass(frozen=True)
class ControlGrid:
    """Finite set of K control atoms inside a bounding box of the control set.

    points has shape (K, d); box has shape (d, 2) with box[:, 0] <= box[:, 1].
    """

    points: np.ndarray
    box: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        box = np.atleast_2d(np.asarray(self.box, dtype=float))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "box", box)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ShapeMismatch("grid needs at least one point of shape (K, d)")
        if box.shape != (pts.shape[1], 2):
            raise ShapeMismatch(f"box must have shape ({pts.shape[1]}, 2)")
        if np.any(pts < box[:, 0] - SNAP_TOL) or np.any(pts > box[:, 1] + SNAP_TOL):
            raise DomainError("grid points must lie inside the bounding box")
        for i in range(pts.shape[0]):
            for j in range(i + 1, pts.shape[0]):
                if np.array_equal(pts[i], pts[j]):
                    raise DomainError(f"grid points {i} and {j} coincide")
        pts.setflags(write=False)
        box.setflags(write=False)

    @property
    def K(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def snap(self, values: np.ndarray, tol: float = SNAP_TOL) -> np.ndarray:
        """Map each value in (..., d) to the index of the coinciding grid point.

        Raises ValueOffGrid if a value is farther than tol from every point.
        """
        v = np.asarray(values, dtype=float).reshape(-1, self.d)
        dist = np.linalg.norm(v[:, None, :] - self.points[None, :, :], axis=2)
        idx = np.argmin(dist, axis=1)
        worst = dist[np.arange(len(v)), idx]
        if np.any(worst > tol):
            bad = int(np.argmax(worst))
            raise ValueOffGrid(f"value {v[bad]} is {worst[bad]:.3e} from the nearest grid point")
        return idx.reshape(np.asarray(values).shape[:-1])


@dataclass(frozen=True)
class CellPartition:
    """Uniform hyper-rectangular binning of a feedback signal.

    bounds has shape (p, 2); cells_per_dim gives the bin count per coordinate.
    Signals outside the bounds clamp into the edge bins.
    """

    bounds: np.ndarray
    cells_per_dim: tuple

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        cpd = tuple(int(c) for c in np.atleast_1d(self.cells_per_dim))
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "cells_per_dim", cpd)
        if b.shape != (len(cpd), 2):
            raise ShapeMismatch("bounds must have shape (p, 2) matching cells_per_dim")
        if any(c < 1 for c in cpd):
            raise DomainError("need at least one cell per dimension")
        if np.any(b[:, 1] <= b[:, 0]):
            raise DomainError("each bound must satisfy lo < hi")
        b.setflags(write=False)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells_per_dim))

    def assign(self, signal: np.ndarray) -> np.ndarray:
        """Flat cell index for each row of signal (..., p)."""
        s = np.asarray(signal, dtype=float)
        if s.ndim == 1:
            s = s[:, None] if len(self.cells_per_dim) == 1 else s[None, :]
        lo = self.bounds[:, 0]
        width = (self.bounds[:, 1] - lo) / np.asarray(self.cells_per_dim)
        raw = np.floor((s - lo) / width).astype(int)
        raw = np.clip(raw, 0, np.asarray(self.cells_per_dim) - 1)
        flat = np.zeros(s.shape[:-1], dtype=int)
        for dim, c in enumerate(self.cells_per_dim):
            flat = flat * c + raw[..., dim]
        return flat

    def centers(self) -> np.ndarray:
        """Cell center coordinates, shape (n_cells, p)."""
        axes = []
        for (lo, hi), c in zip(self.bounds, self.cells_per_dim):
            w = (hi - lo) / c
            axes.append(lo + w * (np.arange(c) + 0.5))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def _check_weights(weights: np.ndarray, tol: float = SIMPLEX_TOL):
    if np.any(weights < -tol):
        bad = np.unravel_index(int(np.argmin(weights)), weights.shape)
        raise DomainError(f"negative weight {weights[bad]:.3e} at {bad}")
    sums = weights.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        bad = np.unravel_index(int(np.argmax(np.abs(sums - 1.0))), sums.shape)
        raise DomainError(f"weights at {bad} sum to {sums[bad]!r}")


@dataclass(frozen=True)
class RelaxedControl:
    """Adapted measure-valued control: weights[k, c, i] is the mass on grid
    atom i at step k in feedback cell c.

    Open-loop controls use a single cell (C = 1, feedback = None); feedback
    controls resolve c from the state or the observation at step k, so the
    weights at step k depend only on information available at step k.
    """

    grid: ControlGrid
    weights: np.ndarray
    feedback_mode: str = OPEN_LOOP
    feedback: CellPartition | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim == 2:
            w = w[:, None, :]
        object.__setattr__(self, "weights", w)
        if self.feedback_mode not in FEEDBACK_MODES:
            raise DomainError(f"unknown feedback mode {self.feedback_mode!r}")
        if w.ndim != 3 or w.shape[2] != self.grid.K:
            raise ShapeMismatch("weights must have shape (N, C, K)")
        if self.feedback_mode == OPEN_LOOP:
            if self.feedback is not None:
                raise ShapeMismatch("open-loop controls take no cell partition")
            if w.shape[1] != 1:
                raise ShapeMismatch("open-loop weights must have a single cell")
        else:
            if self.feedback is None:
                raise ShapeMismatch("feedback controls need a cell partition")
            if w.shape[1] != self.feedback.n_cells:
                raise ShapeMismatch("weights cell axis must match the partition")
        _check_weights(w)
        w.setflags(write=False)

    @property
    def time_steps(self) -> int:
        return self.weights.shape[0]

    @property
    def n_cells(self) -> int:
        return self.weights.shape[1]

    def weights_at(self, k: int, signal: np.ndarray | None = None) -> np.ndarray:
        """Per-path weight vectors at step k, shape (Q, K).

        signal carries the feedback variable (state or observation) with
        shape (Q, p); it is ignored for open-loop controls.
        """
        if self.feedback_mode == OPEN_LOOP:
            if signal is None:
                return self.weights[k, 0]
            return np.broadcast_to(self.weights[k, 0], (len(signal), self.grid.K))
        if signal is None:
            raise MissingPaths("feedback control needs a signal to resolve cells")
        cells = self.feedback.assign(signal)
        return self.weights[k, cells]

    def same_structure(self, other: "RelaxedControl") -> bool:
        return (
            self.feedback_mode == other.feedback_mode
            and self.weights.shape == other.weights.shape
            and np.array_equal(self.grid.points, other.grid.points)
        )

    def to_json(self) -> str:
        doc = {
            "grid": {"points": self.grid.points.tolist(), "box": self.grid.box.tolist()},
            "mode": self.feedback_mode,
            "weights": self.weights.tolist(),
        }
        if self.feedback is not None:
            doc["feedback"] = {
                "bounds": self.feedback.bounds.tolist(),
                "cells_per_dim": list(self.feedback.cells_per_dim),
            }
        else:
            doc["feedback"] = None
        return json.dumps(doc, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "RelaxedControl":
        doc = json.loads(text)
        grid = ControlGrid(np.array(doc["grid"]["points"]), np.array(doc["grid"]["box"]))
        fb = doc.get("feedback")
        part = None
        if fb is not None:
            part = CellPartition(np.array(fb["bounds"]), tuple(fb["cells_per_dim"]))
        return RelaxedControl(grid, np.array(doc["weights"]), doc["mode"], part)


@dataclass(frozen=True)
class RegularControl:
    """Point-valued control: values[s, c] is the control vector used in time
    slot s and feedback cell c.

    The S slots partition [0, T] uniformly; S may exceed the simulation step
    count (rapid switching within a step).
    """

    values: np.ndarray
    box: np.ndarray
    feedback_mode: str = OPEN_LOOP
    feedback: CellPartition | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, None, :]
        box = np.atleast_2d(np.asarray(self.box, dtype=float))
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "box", box)
        if v.ndim != 3:
            raise ShapeMismatch("values must have shape (S, C, d)")
        if np.any(v < box[:, 0] - SNAP_TOL) or np.any(v > box[:, 1] + SNAP_TOL):
            raise DomainError("control values must lie inside the box")
        if self.feedback_mode == OPEN_LOOP:
            if v.shape[1] != 1 or self.feedback is not None:
                raise ShapeMismatch("open-loop values must have a single cell")
        elif self.feedback is None or v.shape[1] != self.feedback.n_cells:
            raise ShapeMismatch("values cell axis must match the partition")
        v.setflags(write=False)
        box.setflags(write=False)

    @property
    def slots(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def values_at(self, k: int, n_steps: int, signal: np.ndarray | None = None) -> np.ndarray:
        """Control vectors in force at simulation step k of n_steps, shape (Q, d).

        Simulate on a grid at least as fine as the slot grid to resolve
        rapid switching; on a coarser grid each step samples the slot at its
        left endpoint.
        """
        s = (k * self.slots) // n_steps
        if self.feedback_mode == OPEN_LOOP:
            if signal is None:
                return self.values[s, 0]
            return np.broadcast_to(self.values[s, 0], (len(signal), self.d))
        if signal is None:
            raise MissingPaths("feedback control needs a signal to resolve cells")
        cells = self.feedback.assign(signal)
        return self.values[s, cells]

    def to_json(self) -> str:
        doc = {
            "values": self.values.tolist(),
            "box": self.box.tolist(),
            "mode": self.feedback_mode,
            "feedback": None
            if self.feedback is None
            else {
                "bounds": self.feedback.bounds.tolist(),
                "cells_per_dim": list(self.feedback.cells_per_dim),
            },
        }
        return json.dumps(doc, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "RegularControl":
        doc = json.loads(text)
        fb = doc.get("feedback")
        part = None
        if fb is not None:
            part = CellPartition(np.array(fb["bounds"]), tuple(fb["cells_per_dim"]))
        return RegularControl(np.array(doc["values"]), np.array(doc["box"]), doc["mode"], part)


def constant_control(grid: ControlGrid, time_steps: int, weights=None) -> RelaxedControl:
    """Open-loop control with the same weight vector at every step.

    Defaults to uniform weights over the grid atoms.
    """
    if weights is None:
        w = np.full(grid.K, 1.0 / grid.K)
    else:
        w = np.asarray(weights, dtype=float)
    return RelaxedControl(grid, np.tile(w, (time_steps, 1, 1)))


def refine_steps(u: RelaxedControl, factor: int) -> RelaxedControl:
    """The same control on a time grid `factor` times finer: each step's
    weights repeat over the sub-steps (the control is piecewise constant)."""
    if factor < 1:
        raise DomainError("refinement factor must be at least 1")
    w = np.repeat(u.weights, factor, axis=0)
    return RelaxedControl(u.grid, w, u.feedback_mode, u.feedback)


def dirac_embed(u: RegularControl, grid: ControlGrid) -> RelaxedControl:
    """Embed a point-valued control as a one-hot relaxed control.

    Every value of u must coincide with a grid atom (snap tolerance 1e-9).
    The embedding keeps u's time resolution: the result has one step per slot.
    """
    idx = grid.snap(u.values)
    w = np.zeros(u.values.shape[:2] + (grid.K,))
    s_ix, c_ix = np.meshgrid(np.arange(w.shape[0]), np.arange(w.shape[1]), indexing="ij")
    w[s_ix, c_ix, idx] = 1.0
    return RelaxedControl(grid, w, u.feedback_mode, u.feedback)


def mix(a: RelaxedControl, b: RelaxedControl, eps: float) -> RelaxedControl:
    """Convex combination (1 - eps) * a + eps * b, cellwise on the weights."""
    if not (0.0 <= eps <= 1.0):
        raise DomainError(f"mixing weight {eps} outside [0, 1]")
    if not a.same_structure(b):
        raise ShapeMismatch("controls must share grid, step count, and feedback mode")
    w = (1.0 - eps) * a.weights + eps * b.weights
    return RelaxedControl(a.grid, w, a.feedback_mode, a.feedback)


def pair(phi, u: RelaxedControl, paths=None, horizon: float | None = None) -> float:
    """Duality pairing of a test function against a relaxed control.

    Left-endpoint quadrature of sum_i phi(t_k, xi_i) * w[k, i] over the time
    grid; with feedback controls the weights are resolved per path from the
    supplied ensemble and the pairing is averaged over paths.

    phi is called as phi(t, xi) with xi a grid atom of shape (d,).
    """
    N = u.time_steps
    if paths is not None:
        T = paths.horizon
        if paths.n_steps != N:
            raise ShapeMismatch("path ensemble and control disagree on step count")
    elif u.feedback_mode != OPEN_LOOP:
        raise MissingPaths("feedback control cannot be paired without paths")
    elif horizon is None:
        raise DomainError("open-loop pairing needs an explicit horizon")
    else:
        T = float(horizon)
    dt = T / N
    phi_grid = np.array(
        [[float(phi(k * dt, u.grid.points[i])) for i in range(u.grid.K)] for k in range(N)]
    )
    if not np.all(np.isfinite(phi_grid)):
        raise NonFiniteCoefficient("test function evaluated to a non-finite value")
    if u.feedback_mode == OPEN_LOOP:
        return float(dt * np.sum(phi_grid * u.weights[:, 0, :]))
    total = 0.0
    for k in range(N):
        w = u.weights_at(k, paths.feedback_signal(k, u.feedback_mode))
        total += dt * float(np.mean(w @ phi_grid[k]))
    return total


@dataclass(frozen=True)
class WeightViolation:
    step: int
    cell: int
    kind: str
    magnitude: float


@dataclass
class ControlReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(u, tol: float = SIMPLEX_TOL) -> ControlReport:
    """Report every (step, cell) whose weight vector leaves the simplex.

    Accepts a RelaxedControl or a bare weight array of shape (N, C, K) or
    (N, K); the constructor enforces validity, so raw arrays are the usual
    subject (hand-assembled weights, edited files).
    """
    w = u.weights if isinstance(u, RelaxedControl) else np.asarray(u, dtype=float)
    if w.ndim == 1:
        w = w[None, None, :]
    elif w.ndim == 2:
        w = w[:, None, :]
    report = ControlReport()
    for k in range(w.shape[0]):
        for c in range(w.shape[1]):
            row = w[k, c]
            neg = row.min()
            if neg < -tol:
                report.violations.append(WeightViolation(k, c, "negative", float(-neg)))
            gap = abs(row.sum() - 1.0)
            if gap > tol:
                report.violations.append(WeightViolation(k, c, "normalization", float(gap)))
    return report
