"""Backward Riccati solves and feedback-law synthesis.

Two layers live here:

* the n-dimensional auxiliary problem behind the decentralized law: the
  symmetric Riccati equation for P with the multiplicative-noise correction
  C'PC and gain denominators R + D'PD, the affine adjoint phi driven by the
  mean-field trajectories, and the node-wise gains Theta1, Theta2;

* the nN-dimensional brute-force oracle for small populations: the
  multi-noise Riccati for the stacked system plus its affine adjoint.  The
  oracle's affine term is validated at runtime by a finite-difference
  stationarity test under common random numbers, so a bookkeeping mistake in
  the derivation cannot silently corrupt the optimality-gap experiments.

Regularity (R + D'PD strictly positive definite along the whole horizon) is
always measured and enforced; the decentralized law is meaningless without it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, RegularityLostError, StationarityError
from .model import AugmentedCoeffs, ModelParams
from .ode import TimeGrid, Trajectory, integrate_rk4, quadrature, symmetrize

REGULARITY_TOL = 1e-10


def _grid_for(params: ModelParams, grid: TimeGrid | None) -> TimeGrid:
    if grid is None:
        return params.grid()
    tv = any(params.is_time_varying(name) for name in
             ("A", "B", "C", "D", "F", "Ftilde", "Q", "R", "Gamma", "eta"))
    if tv and grid.steps != params.steps:
        raise GridMismatchError(
            "sampled coefficients are tied to the master grid; "
            f"got steps={grid.steps} vs params.steps={params.steps}"
        )
    return grid


def _check_grids(grid: TimeGrid, *trajs: Trajectory):
    for tr in trajs:
        if tr.grid.steps != grid.steps or tr.grid.T != grid.T:
            raise GridMismatchError("trajectory grids do not match")


class _Coeffs:
    """Fast interpolated access to the model coefficients."""

    NAMES = ("A", "B", "C", "D", "F", "Ftilde", "Q", "R", "Gamma", "eta")

    def __init__(self, params: ModelParams):
        self.params = params
        self.dt = params.T / params.steps
        self.steps = params.steps
        self.tables = {k: params.node_table(k) for k in self.NAMES}
        self.varying = {k for k in self.NAMES if params.is_time_varying(k)}

    def at(self, t: float, *names: str):
        if not self.varying:
            return tuple(self.tables[k][0] for k in names)
        u = t / self.dt
        i = min(max(int(np.floor(u)), 0), self.steps - 1)
        w = u - i
        out = []
        for k in names:
            tab = self.tables[k]
            if k not in self.varying or w == 0.0:
                out.append(tab[i])
            else:
                out.append((1.0 - w) * tab[i] + w * tab[i + 1])
        return tuple(out)


def regularity_margin(P: Trajectory, params: ModelParams) -> float:
    """min over nodes of lambda_min(R + D'PD)."""
    margins = []
    Rt = params.node_table("R")
    Dt = params.node_table("D")
    for k in range(params.steps + 1):
        S = Rt[k] + Dt[k].T @ P.values[k] @ Dt[k]
        margins.append(np.linalg.eigvalsh(symmetrize(S))[0])
    return float(min(margins))


def solve_P(params: ModelParams, grid: TimeGrid | None = None) -> tuple[Trajectory, float]:
    """Backward solve of the regular Riccati equation for P, P(T) = G.

    dP/dt = -[PA + A'P + C'PC + Q - (PB + C'PD)(R + D'PD)^{-1}(B'P + D'PC)]

    P is re-symmetrized after every step.  Returns (P, margin) where margin is
    the minimal node-wise lambda_min(R + D'PD); RegularityLostError if the
    margin falls to the tolerance, NonFiniteError on blow-up.
    """
    grid = _grid_for(params, grid)
    c = _Coeffs(params)

    def rhs(t, P):
        A, B, C, D, Q, R = c.at(t, "A", "B", "C", "D", "Q", "R")
        PD = P @ D
        S = R + D.T @ PD
        W = P @ B + C.T @ PD
        try:
            gain = np.linalg.solve(S, W.T)
        except np.linalg.LinAlgError as exc:
            raise RegularityLostError(f"R + D'PD singular at t={t:.6g}") from exc
        return -(P @ A + A.T @ P + C.T @ (P @ C) + Q - W @ gain)

    P = integrate_rk4(rhs, symmetrize(params.G), grid, "backward", project=symmetrize)
    margin = regularity_margin(P, params) if grid.steps == params.steps else _margin_on(P, params, grid)
    if margin <= REGULARITY_TOL:
        raise RegularityLostError(f"regularity margin {margin:.3e} <= {REGULARITY_TOL}")
    return P, margin


def _margin_on(P: Trajectory, params: ModelParams, grid: TimeGrid) -> float:
    c = _Coeffs(params)
    margins = []
    for k, t in enumerate(grid.nodes):
        D, R = c.at(t, "D", "R")
        S = R + D.T @ P.values[k] @ D
        margins.append(np.linalg.eigvalsh(symmetrize(S))[0])
    return float(min(margins))


def theta1(P: Trajectory, params: ModelParams) -> Trajectory:
    """State-feedback gain Theta1 = -(R + D'PD)^{-1}(B'P + D'PC), node-wise."""
    grid = P.grid
    c = _Coeffs(params)
    out = np.empty((grid.steps + 1, params.m, params.n))
    for k, t in enumerate(grid.nodes):
        A, B, C, D, R = c.at(t, "A", "B", "C", "D", "R")
        Pk = P.values[k]
        S = R + D.T @ Pk @ D
        try:
            out[k] = -np.linalg.solve(S, B.T @ Pk + D.T @ Pk @ C)
        except np.linalg.LinAlgError as exc:
            raise RegularityLostError(f"R + D'PD singular at node {k}") from exc
    return Trajectory(grid, out)


def solve_phi(P: Trajectory, params: ModelParams, xhat: Trajectory,
              yhat1: Trajectory, yhat2: Trajectory, betahat1: Trajectory) -> Trajectory:
    """Backward affine adjoint driven by the mean-field trajectories.

    dphi/dt = -(A + B Theta1)' phi
              + [(PB + C'PD)(R + D'PD)^{-1} D' - C'] P Ftilde xhat
              - P F xhat - q1(t)

    with q1 = -Q(Gamma xhat + eta) - Gamma'Q[(I - Gamma) xhat - eta]
              + F' yhat2 + F' yhat1 + Ftilde' betahat1
    and phi(T) = -G(GammaBar xhat(T) + etaBar)
                 - GammaBar'G[(I - GammaBar) xhat(T) - etaBar].
    """
    grid = P.grid
    _check_grids(grid, xhat, yhat1, yhat2, betahat1)
    c = _Coeffs(params)
    n = params.n
    eye = np.eye(n)

    def q1(t, xh, y1, y2, b1):
        Q, Gamma, eta, F, Ft = c.at(t, "Q", "Gamma", "eta", "F", "Ftilde")
        return (-Q @ (Gamma @ xh + eta) - Gamma.T @ (Q @ ((eye - Gamma) @ xh - eta))
                + F.T @ y2 + F.T @ y1 + Ft.T @ b1)

    def rhs(t, phi):
        A, B, C, D, R, F, Ft = c.at(t, "A", "B", "C", "D", "R", "F", "Ftilde")
        Pk = P(t)
        S = R + D.T @ Pk @ D
        W = Pk @ B + C.T @ Pk @ D
        gain = np.linalg.solve(S, np.column_stack([B.T @ phi, D.T @ (Pk @ (Ft @ xhat(t)))]))
        closed = A.T @ phi - W @ gain[:, 0]
        drive = (W @ gain[:, 1] - C.T @ (Pk @ (Ft @ xhat(t)))) - Pk @ (F @ xhat(t))
        return -(closed) + drive - q1(t, xhat(t), yhat1(t), yhat2(t), betahat1(t))

    xT = xhat.terminal
    G, Gb, eb = params.G, params.GammaBar, params.etaBar
    q2 = -G @ (Gb @ xT + eb) - Gb.T @ (G @ ((eye - Gb) @ xT - eb))
    return integrate_rk4(rhs, q2, grid, "backward")


def theta2(P: Trajectory, phi: Trajectory, xhat: Trajectory, params: ModelParams) -> Trajectory:
    """Affine gain Theta2 = -(R + D'PD)^{-1}(B'phi + D'P Ftilde xhat), node-wise."""
    grid = P.grid
    _check_grids(grid, phi, xhat)
    c = _Coeffs(params)
    out = np.empty((grid.steps + 1, params.m))
    for k, t in enumerate(grid.nodes):
        B, D, R, Ft = c.at(t, "B", "D", "R", "Ftilde")
        Pk = P.values[k]
        S = R + D.T @ Pk @ D
        try:
            out[k] = -np.linalg.solve(S, B.T @ phi.values[k] + D.T @ (Pk @ (Ft @ xhat.values[k])))
        except np.linalg.LinAlgError as exc:
            raise RegularityLostError(f"R + D'PD singular at node {k}") from exc
    return Trajectory(grid, out)


@dataclass
class FeedbackLaw:
    """Decentralized law u_i = Theta1 x_i + Theta2 with its backing P, phi."""

    grid: TimeGrid
    P: Trajectory
    phi: Trajectory
    Theta1: Trajectory
    Theta2: Trajectory
    regularity_margin: float

    def __post_init__(self):
        if self.regularity_margin <= REGULARITY_TOL:
            raise RegularityLostError(
                f"law built with nonpositive regularity margin {self.regularity_margin:.3e}"
            )
        asym = np.max(np.abs(self.P.values - np.swapaxes(self.P.values, -1, -2)))
        if asym > 1e-9:
            raise RegularityLostError(f"P asymmetry {asym:.3e} exceeds 1e-9")


# ---------------------------------------------------------------------------
# Brute-force centralized oracle (small N only)
# ---------------------------------------------------------------------------

@dataclass
class OracleLaw:
    """Centralized law u = gain x + affine for the stacked system."""

    grid: TimeGrid
    N: int
    P: Trajectory
    phi: Trajectory
    gain: Trajectory     # (Nm, Nn)
    affine: Trajectory   # (Nm,)
    regularity_margin: float
    validation: dict = field(default_factory=dict)


def solve_oracle(aug: AugmentedCoeffs, grid: TimeGrid | None = None, *,
                 validate: bool = True, validation_paths: int = 2048,
                 validation_seed: int = 424242, fd_step: float = 1e-4,
                 fd_tol: float = 1e-2) -> OracleLaw:
    """Solve the stacked problem's multi-noise Riccati and affine adjoint.

    dP/dt = -[PA + A'P + sum_i Ci'P Ci + Q
              - (PB + sum_i Ci'P Di)(R + sum_i Di'P Di)^{-1}(PB + sum_i Ci'P Di)'],
    P(T) = G;   dphi/dt = -(A + B gain)' phi - S1,  phi(T) = S2,

    with gain = -(R + sum Di'P Di)^{-1}(B'P + sum Di'P Ci) and control
    u = gain x - (R + sum Di'P Di)^{-1} B' phi.

    With validate=True the resulting law must pass a stationarity self-check:
    for 5 random bounded perturbations delta of the affine term, the centered
    finite difference [J(u+h delta) - J(u-h delta)]/(2h) under common random
    numbers stays below fd_tol * ||delta||_{L2} * (1 + |J|), and the perturbed
    cost never undercuts J by more than Monte Carlo slack.
    """
    grid = _grid_for(aug.params, grid)
    dim = aug.dim

    def parts(t, P):
        s = aug.at(t)
        PC = np.einsum("ij,njk->nik", P, s.C)
        PD = np.einsum("ij,njk->nik", P, s.D)
        CtPC = np.einsum("nji,njk->ik", s.C, PC)
        CtPD = np.einsum("nji,njk->ik", s.C, PD)
        DtPD = np.einsum("nji,njk->ik", s.D, PD)
        DtPC = np.einsum("nji,njk->ik", s.D, PC)
        S = s.R + DtPD
        return s, CtPC, CtPD, DtPC, S

    def rhs(t, P):
        s, CtPC, CtPD, DtPC, S = parts(t, P)
        W = P @ s.B + CtPD
        try:
            sol = np.linalg.solve(S, s.B.T @ P + DtPC)
        except np.linalg.LinAlgError as exc:
            raise RegularityLostError(f"oracle R + sum D'PD singular at t={t:.6g}") from exc
        return -(P @ s.A + s.A.T @ P + CtPC + s.Q - W @ sol)

    terminal = symmetrize(aug.at(grid.T).G)
    P = integrate_rk4(rhs, terminal, grid, "backward", project=symmetrize)

    gains = np.empty((grid.steps + 1, aug.N * aug.params.m, dim))
    margins = np.empty(grid.steps + 1)
    for k, t in enumerate(grid.nodes):
        s, _, CtPD, DtPC, S = parts(t, P.values[k])
        margins[k] = np.linalg.eigvalsh(symmetrize(S))[0]
        gains[k] = -np.linalg.solve(S, s.B.T @ P.values[k] + DtPC)
    margin = float(margins.min())
    if margin <= REGULARITY_TOL:
        raise RegularityLostError(f"oracle regularity margin {margin:.3e}")
    gain = Trajectory(grid, gains)

    def phi_rhs(t, phi):
        s = aug.at(t)
        Acl = s.A + s.B @ gain(t)
        return -(Acl.T @ phi + s.S1)

    phi = integrate_rk4(phi_rhs, aug.at(grid.T).S2, grid, "backward")

    affines = np.empty((grid.steps + 1, aug.N * aug.params.m))
    for k, t in enumerate(grid.nodes):
        s, _, _, _, S = parts(t, P.values[k])
        affines[k] = -np.linalg.solve(S, s.B.T @ phi.values[k])
    law = OracleLaw(grid=grid, N=aug.N, P=P, phi=phi, gain=gain,
                    affine=Trajectory(grid, affines), regularity_margin=margin)
    if validate:
        law.validation = _validate_stationarity(
            aug, law, paths=validation_paths, seed=validation_seed,
            h=fd_step, tol=fd_tol)
    return law


MAX_VALIDATION_PATHS = 16384


def _validate_stationarity(aug: AugmentedCoeffs, law: OracleLaw, *, paths: int,
                           seed: int, h: float, tol: float, n_dirs: int = 5) -> dict:
    """Finite-difference stationarity check under common random numbers.

    The pathwise centered difference is exact (the cost is quadratic in the
    control along a fixed noise path), so the estimate's only error is Monte
    Carlo; an over-threshold reading that 3 standard errors could explain is
    re-measured once with more paths before it counts as a failure.
    """
    from .montecarlo import NoiseBank, simulate_centralized

    grid = law.grid
    rng = np.random.default_rng(seed ^ 0x5EED)
    dim_u = aug.N * aug.params.m
    deltas = [rng.uniform(-1.0, 1.0, size=(grid.steps + 1, dim_u)) for _ in range(n_dirs)]

    def measure(n_paths: int):
        noise = NoiseBank(seed=seed, n_paths=n_paths, n_agents=aug.N, grid=grid).materialized()
        base = simulate_centralized(aug, law, noise, store=False)
        rows = []
        for delta in deltas:
            norm = float(np.sqrt(quadrature(Trajectory(grid, (delta**2).sum(axis=1)))))
            Jp = simulate_centralized(aug, _perturbed(law, +h * delta), noise, store=False).J_soc
            Jm = simulate_centralized(aug, _perturbed(law, -h * delta), noise, store=False).J_soc
            dpath = (Jp - Jm) / (2.0 * h)
            rows.append((float(dpath.mean()),
                         float(dpath.std(ddof=1) / np.sqrt(n_paths)),
                         norm, Jp - base.J_soc))
        return base, rows

    base, rows = measure(paths)
    J0 = float(base.J_soc.mean())
    inconclusive = any(
        abs(d) > tol * norm * (1.0 + abs(J0)) and abs(d) - 3.0 * se <= tol * norm * (1.0 + abs(J0))
        for d, se, norm, _ in rows
    )
    used = paths
    if inconclusive and paths < MAX_VALIDATION_PATHS:
        used = MAX_VALIDATION_PATHS
        base, rows = measure(used)
        J0 = float(base.J_soc.mean())

    report = {"J": J0, "J_se": float(base.J_soc.std(ddof=1) / np.sqrt(used)),
              "paths": used, "derivatives": [], "derivative_ses": [],
              "thresholds": [], "ascent_ok": True}
    for d, se, norm, up in rows:
        threshold = tol * norm * (1.0 + abs(J0))
        report["derivatives"].append(d)
        report["derivative_ses"].append(se)
        report["thresholds"].append(threshold)
        if abs(d) > threshold:
            raise StationarityError(
                f"oracle failed stationarity: |dJ| = {abs(d):.3e} > {threshold:.3e} "
                f"(se {se:.1e}, {used} paths)"
            )
        slack = 2.0 * float(up.std(ddof=1) / np.sqrt(used)) + 1e-12 * (1.0 + abs(J0))
        if float(up.mean()) < -slack:
            report["ascent_ok"] = False
            raise StationarityError(
                f"oracle failed ascent check: mean dJ = {float(up.mean()):.3e} < -{slack:.3e}"
            )
    return report


def _perturbed(law: OracleLaw, offset: np.ndarray) -> OracleLaw:
    return OracleLaw(grid=law.grid, N=law.N, P=law.P, phi=law.phi, gain=law.gain,
                     affine=Trajectory(law.grid, law.affine.values + offset),
                     regularity_margin=law.regularity_margin)
