"""Fixed-step ODE kernel and symmetric linear-algebra helpers.

Everything downstream (Riccati solves, consistency-condition decoupling,
mean-field extraction) runs on one uniform time grid, integrated with
classical fourth-order Runge-Kutta in either direction.  The step is fixed on
purpose: reproducibility and exact node alignment with the Euler-Maruyama
simulator matter more here than adaptive efficiency.

Blow-up (NaN/Inf or max-norm past BLOWUP_NORM) raises NonFiniteError instead
of being clipped; a diverging backward Riccati solve is how non-solvability
on [0, T] manifests and callers need to see it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, NotSymmetricError

BLOWUP_NORM = 1e12
SYM_TOL_SCALE = 1e-8


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_0 = 0 < ... < t_M = T with step dt = T/M."""

    T: float
    steps: int

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError(f"need at least 2 steps, got {self.steps}")
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError(f"horizon must be positive and finite, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def nodes(self) -> np.ndarray:
        # linspace pins the endpoint to T exactly
        return np.linspace(0.0, self.T, self.steps + 1)


class Trajectory:
    """Values sampled at every grid node, linearly interpolated in between.

    ``values[k]`` is the sample at node k; shape is (steps+1, *shape).  Calling
    with a time t returns the piecewise-linear interpolant, which is exact at
    the nodes (boundary conditions survive untouched).
    """

    def __init__(self, grid: TimeGrid, values, check: bool = True):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != grid.steps + 1:
            raise ValueError(
                f"expected {grid.steps + 1} samples, got {values.shape[0]}"
            )
        if check and not np.all(np.isfinite(values)):
            raise NonFiniteError("trajectory contains non-finite samples")
        self.grid = grid
        self.values = values

    @property
    def shape(self):
        return self.values.shape[1:]

    def at(self, k: int) -> np.ndarray:
        return self.values[k]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def __call__(self, t: float) -> np.ndarray:
        u = t / self.grid.dt
        i = int(np.floor(u))
        i = min(max(i, 0), self.grid.steps - 1)
        w = u - i
        if w == 0.0:
            return self.values[i]
        return (1.0 - w) * self.values[i] + w * self.values[i + 1]


def _check_state(y: np.ndarray, where: str):
    if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > BLOWUP_NORM:
        raise NonFiniteError(f"blow-up detected {where}")


def integrate_rk4(rhs, boundary_value, grid: TimeGrid, direction: str = "forward",
                  project=None) -> Trajectory:
    """Classical RK4 sweep over the grid, storing the value at every node.

    rhs(t, y) -> dy/dt.  ``direction='backward'`` anchors the boundary value
    at t_M and fills nodes down to t_0.  ``project`` is applied after each
    step (used to re-symmetrize Riccati iterates).
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    y0 = np.asarray(boundary_value, dtype=float)
    _check_state(y0, "in the boundary value")
    M = grid.steps
    h = grid.dt if direction == "forward" else -grid.dt
    nodes = grid.nodes
    out = np.empty((M + 1,) + y0.shape)
    order = range(M) if direction == "forward" else range(M, 0, -1)
    k0 = 0 if direction == "forward" else M
    out[k0] = y0
    y = y0
    for k in order:
        t = nodes[k]
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if project is not None:
            y = project(y)
        _check_state(y, f"at node {k + (1 if direction == 'forward' else -1)}")
        out[k + (1 if direction == "forward" else -1)] = y
    return Trajectory(grid, out, check=False)


def quadrature(traj: Trajectory) -> float:
    """Composite trapezoid rule over the trajectory's grid.

    Works on scalar samples and on arrays (integrates along the time axis).
    """
    v = traj.values
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("quadrature input contains non-finite samples")
    return trapezoid_nodes(v, traj.grid)


def trapezoid_nodes(values: np.ndarray, grid: TimeGrid):
    """Trapezoid rule on node samples (time along axis 0)."""
    v = np.asarray(values, dtype=float)
    return grid.dt * (v.sum(axis=0) - 0.5 * (v[0] + v[-1]))


def symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


def _require_symmetric(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise NotSymmetricError(f"expected a square matrix, got shape {S.shape}")
    tol = SYM_TOL_SCALE * (1.0 + np.max(np.abs(S)))
    asym = np.max(np.abs(S - S.T)) if S.size else 0.0
    if asym > tol:
        raise NotSymmetricError(f"asymmetry {asym:.3e} exceeds tolerance {tol:.3e}")
    return symmetrize(S)


def eigvals_sym(S: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of a (nearly) symmetric matrix.

    The input is symmetrized after a tolerance check; the contract is the
    Rayleigh bound lam_min ||x||^2 <= x'Sx <= lam_max ||x||^2.
    """
    return np.linalg.eigvalsh(_require_symmetric(S))


def is_psd(S: np.ndarray, tol: float = 1e-10) -> bool:
    """True iff the smallest eigenvalue is >= -tol."""
    return bool(eigvals_sym(S)[0] >= -tol)
