"""Consistency-condition system: block assembly, Riccati decoupling, and
mean-field extraction.

The limiting single-agent system couples a forward state with three backward
adjoints.  Stacking the forward part as X = (x, 0, 0) and the backward part
as Y = (phi, y1, y2) (with diffusion carried only by y1) turns it into one
linear mean-field FBSDE; splitting into mean and fluctuation and stacking
those gives a 6n-dimensional FBSDE that the ansatz Y = K X + kappa decouples
into a non-symmetric matrix Riccati equation for K and a linear backward
equation for kappa.

Once (K, kappa) are known, the mean path is a plain forward ODE: the mean of
the fluctuation block vanishes (certified by the transition-matrix
determinant check), so EY = K (X1, 0) + kappa closes dX1/dt in deterministic
terms, and the mean fields xhat, y1hat, y2hat, beta1hat fall out of the block
bookkeeping.  The extraction is cross-validated by re-solving the affine
adjoint directly from the extracted mean fields and comparing: both routes
must produce the same phi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    MFLQGError,
    NearSingularError,
    NonFiniteError,
    NotReducedCaseError,
)
from .model import ModelParams
from .ode import TimeGrid, Trajectory, integrate_rk4
from .riccati import FeedbackLaw, _Coeffs, solve_P, solve_phi, theta1, theta2

COND37_DET_TOL = 1e-8
REDUCED_SV_TOL = 1e-8
BLOCK_IDENTITY_TOL = 1e-10


def _interp(table: np.ndarray, grid: TimeGrid, t: float) -> np.ndarray:
    u = t / grid.dt
    i = min(max(int(np.floor(u)), 0), grid.steps - 1)
    w = u - i
    if w == 0.0:
        return table[i]
    return (1.0 - w) * table[i] + w * table[i + 1]


@dataclass
class CCMatrices:
    """Node-sampled blocks of the consistency-condition system.

    pi1..pi4, pi1p..pi3p are the n x n pieces; a1..g_vec the 3n blocks of the
    mean-field FBSDE; the *_t fields the 6n blocks of the stacked
    (mean, fluctuation) system.  K_terminal / kappa_terminal are the terminal
    data of the decoupling pair.
    """

    grid: TimeGrid
    n: int
    # n x n pieces
    pi1: np.ndarray
    pi2: np.ndarray
    pi3: np.ndarray
    pi4: np.ndarray
    pi1p: np.ndarray
    pi2p: np.ndarray
    pi3p: np.ndarray
    # 3n blocks
    a1: np.ndarray
    a1bar: np.ndarray
    b1: np.ndarray
    a1p: np.ndarray
    a1pbar: np.ndarray
    b1p: np.ndarray
    a2: np.ndarray
    a2bar: np.ndarray
    b2: np.ndarray
    b2bar: np.ndarray
    c2: np.ndarray
    c2bar: np.ndarray
    f_vec: np.ndarray
    Gbar: np.ndarray
    Gbar_prime: np.ndarray
    g_vec: np.ndarray
    xi_bar: np.ndarray
    # 6n stacked blocks
    a1_t: np.ndarray
    b1_t: np.ndarray
    a1p_t: np.ndarray
    b1p_t: np.ndarray
    a2_t: np.ndarray
    b2_t: np.ndarray
    c2_t: np.ndarray
    c2bar_t: np.ndarray
    f_t: np.ndarray
    K_terminal: np.ndarray
    kappa_terminal: np.ndarray
    xi_t: np.ndarray

    def at(self, name: str, t: float) -> np.ndarray:
        return _interp(getattr(self, name), self.grid, t)


def _embed(block_tables: dict[tuple[int, int], np.ndarray], nodes: int, side: int,
           n: int, cols: int | None = None) -> np.ndarray:
    cols = side if cols is None else cols
    out = np.zeros((nodes, side * n, cols * n))
    for (i, j), tab in block_tables.items():
        out[:, i * n:(i + 1) * n, j * n:(j + 1) * n] = tab
    return out


def build_cc(params: ModelParams, P: Trajectory) -> CCMatrices:
    """Assemble every block of the consistency-condition system from P.

    The closed-loop pieces satisfy pi1 = A + B Theta1 and pi1p = C + D Theta1
    identically; both identities are asserted to 1e-10 as a bookkeeping guard.
    """
    grid = P.grid
    n = params.n
    c = _Coeffs(params)
    nodes = grid.steps + 1
    eye = np.eye(n)

    pi = {k: np.empty((nodes, n, n)) for k in
          ("pi1", "pi2", "pi3", "pi4", "pi1p", "pi2p", "pi3p")}
    th1 = np.empty((nodes, params.m, n))
    qg = np.empty((nodes, n, n))       # Q Gamma
    gqig = np.empty((nodes, n, n))     # Gamma'Q(I - Gamma)
    qmat = np.empty((nodes, n, n))
    f_vec = np.empty((nodes, 3 * n))

    for k, t in enumerate(grid.nodes):
        A, B, C, D, Q, R, F, Ft, Gam, eta = c.at(
            t, "A", "B", "C", "D", "Q", "R", "F", "Ftilde", "Gamma", "eta")
        Pk = P.values[k]
        S = R + D.T @ Pk @ D
        W = Pk @ B + C.T @ Pk @ D           # PB + C'PD
        BtP_DtPC = B.T @ Pk + D.T @ Pk @ C  # B'P + D'PC
        Sinv_BtP = np.linalg.solve(S, BtP_DtPC)
        Sinv_Bt = np.linalg.solve(S, B.T)
        Sinv_Dt = np.linalg.solve(S, D.T)
        PFt = Pk @ Ft
        th1[k] = -Sinv_BtP
        pi["pi1"][k] = A - B @ Sinv_BtP
        pi["pi2"][k] = F - B @ (Sinv_Dt @ PFt)
        pi["pi3"][k] = -B @ Sinv_Bt
        pi["pi1p"][k] = C - D @ Sinv_BtP
        pi["pi2p"][k] = Ft - D @ (Sinv_Dt @ PFt)
        pi["pi3p"][k] = -D @ Sinv_Bt
        pi["pi4"][k] = (W @ (Sinv_Dt @ PFt) - C.T @ PFt - Pk @ F
                        + Q @ Gam + Gam.T @ Q @ (eye - Gam))
        qg[k] = Q @ Gam
        gqig[k] = Gam.T @ Q @ (eye - Gam)
        qmat[k] = Q
        Qeta = Q @ eta
        GtQeta = Gam.T @ Qeta
        f_vec[k] = np.concatenate([Qeta - GtQeta, Qeta, -GtQeta])

    # closed-loop identities, asserted as a guard on the block bookkeeping
    for k, t in enumerate(grid.nodes):
        A, B, C, D = c.at(t, "A", "B", "C", "D")
        err1 = np.max(np.abs(pi["pi1"][k] - (A + B @ th1[k])))
        err2 = np.max(np.abs(pi["pi1p"][k] - (C + D @ th1[k])))
        if max(err1, err2) > BLOCK_IDENTITY_TOL * (1.0 + np.max(np.abs(pi["pi1"][k]))):
            raise MFLQGError(f"closed-loop block identity violated at node {k}")

    Ftab = params.node_table("F")
    Fttab = params.node_table("Ftilde")
    Atab = params.node_table("A")
    FT = np.swapaxes(Ftab, -1, -2)
    FtT = np.swapaxes(Fttab, -1, -2)
    AT = np.swapaxes(Atab, -1, -2)

    a1 = _embed({(0, 0): pi["pi1"]}, nodes, 3, n)
    a1bar = _embed({(0, 0): pi["pi2"]}, nodes, 3, n)
    b1 = _embed({(0, 0): pi["pi3"]}, nodes, 3, n)
    a1p = _embed({(0, 0): pi["pi1p"]}, nodes, 3, n)
    a1pbar = _embed({(0, 0): pi["pi2p"]}, nodes, 3, n)
    b1p = _embed({(0, 0): pi["pi3p"]}, nodes, 3, n)
    a2 = _embed({(1, 0): -qmat}, nodes, 3, n)
    a2bar = _embed({(0, 0): pi["pi4"], (1, 0): qg, (2, 0): gqig}, nodes, 3, n)
    b2 = _embed({(0, 0): -np.swapaxes(pi["pi1"], -1, -2), (0, 2): -FT,
                 (1, 1): -AT, (2, 2): -(AT + FT)}, nodes, 3, n)
    b2bar = _embed({(0, 1): -FT, (2, 1): -FT}, nodes, 3, n)
    Ctab = params.node_table("C")
    c2 = _embed({(1, 1): -np.swapaxes(Ctab, -1, -2)}, nodes, 3, n)
    c2bar = _embed({(0, 1): -FtT, (2, 1): -FtT}, nodes, 3, n)

    G, Gb, eb = params.G, params.GammaBar, params.etaBar
    GGb = G @ Gb
    GbtGIGb = Gb.T @ G @ (np.eye(n) - Gb)
    Gbar = np.zeros((3 * n, 3 * n))
    Gbar[n:2 * n, 0:n] = G
    Gbar_prime = np.zeros((3 * n, 3 * n))
    Gbar_prime[0:n, 0:n] = -GGb - GbtGIGb
    Gbar_prime[n:2 * n, 0:n] = -GGb
    Gbar_prime[2 * n:, 0:n] = -GbtGIGb
    Geb = G @ eb
    GbtGeb = Gb.T @ Geb
    g_vec = np.concatenate([GbtGeb - Geb, -Geb, GbtGeb])
    xi_bar = np.concatenate([params.xi0, np.zeros(2 * n)])

    z3 = np.zeros((nodes, 3 * n, 3 * n))

    def two(b11, b12, b21, b22):
        return np.concatenate([
            np.concatenate([b11, b12], axis=2),
            np.concatenate([b21, b22], axis=2),
        ], axis=1)

    a1_t = two(a1 + a1bar, z3, z3, a1)
    b1_t = two(b1, z3, z3, b1)
    a1p_t = two(z3, z3, a1p + a1pbar, a1p)
    b1p_t = two(z3, z3, b1p, b1p)
    a2_t = two(a2 + a2bar, z3, z3, a2)
    b2_t = two(b2 + b2bar, z3, z3, b2)
    c2_t = two(z3, z3, z3, c2)
    c2bar_t = two(z3, c2 + c2bar, z3, -c2)
    K_terminal = np.zeros((6 * n, 6 * n))
    K_terminal[:3 * n, :3 * n] = Gbar + Gbar_prime
    K_terminal[3 * n:, 3 * n:] = Gbar
    f_t = np.concatenate([f_vec, np.zeros_like(f_vec)], axis=1)
    kappa_terminal = np.concatenate([g_vec, np.zeros(3 * n)])
    xi_t = np.concatenate([xi_bar, np.zeros(3 * n)])

    return CCMatrices(grid=grid, n=n, pi1=pi["pi1"], pi2=pi["pi2"], pi3=pi["pi3"],
                      pi4=pi["pi4"], pi1p=pi["pi1p"], pi2p=pi["pi2p"], pi3p=pi["pi3p"],
                      a1=a1, a1bar=a1bar, b1=b1, a1p=a1p, a1pbar=a1pbar, b1p=b1p,
                      a2=a2, a2bar=a2bar, b2=b2, b2bar=b2bar, c2=c2, c2bar=c2bar,
                      f_vec=f_vec, Gbar=Gbar, Gbar_prime=Gbar_prime, g_vec=g_vec,
                      xi_bar=xi_bar, a1_t=a1_t, b1_t=b1_t, a1p_t=a1p_t, b1p_t=b1p_t,
                      a2_t=a2_t, b2_t=b2_t, c2_t=c2_t, c2bar_t=c2bar_t, f_t=f_t,
                      K_terminal=K_terminal, kappa_terminal=kappa_terminal, xi_t=xi_t)


def solve_K(cc: CCMatrices, grid: TimeGrid | None = None) -> Trajectory:
    """Backward solve of the non-symmetric decoupling Riccati equation

    dK/dt = A2t + B2t K - K (A1t + B1t K) + (C2t + C2bart) K (A1pt + B1pt K),
    K(T) = K_terminal.

    Blow-up raises NonFiniteError: the equation is not symmetric and need not
    be solvable on all of [0, T].
    """
    grid = grid or cc.grid

    def rhs(t, K):
        a1t = cc.at("a1_t", t)
        b1t = cc.at("b1_t", t)
        a1pt = cc.at("a1p_t", t)
        b1pt = cc.at("b1p_t", t)
        a2t = cc.at("a2_t", t)
        b2t = cc.at("b2_t", t)
        csum = cc.at("c2_t", t) + cc.at("c2bar_t", t)
        return (a2t + b2t @ K - K @ (a1t + b1t @ K)
                + csum @ (K @ (a1pt + b1pt @ K)))

    return integrate_rk4(rhs, cc.K_terminal, grid, "backward")


def solve_kappa(cc: CCMatrices, K: Trajectory, grid: TimeGrid | None = None) -> Trajectory:
    """Backward affine companion of K:

    dkappa/dt = [B2t + (C2t + C2bart) K B1pt - K B1t] kappa + f_t,
    kappa(T) = kappa_terminal.
    """
    grid = grid or cc.grid

    def rhs(t, kappa):
        Kt = K(t)
        csum = cc.at("c2_t", t) + cc.at("c2bar_t", t)
        bracket = cc.at("b2_t", t) + csum @ (Kt @ cc.at("b1p_t", t)) - Kt @ cc.at("b1_t", t)
        return bracket @ kappa + cc.at("f_t", t)

    return integrate_rk4(rhs, cc.kappa_terminal, grid, "backward")


def check_condition_37(cc: CCMatrices, grid: TimeGrid | None = None) -> dict:
    """Non-degeneracy certificate for the fluctuation-mean system.

    Integrates the 6n-dimensional transition matrix of

        [[A1, B1], [A2 - Gbar A1 + (B2 - Gbar B1) Gbar, B2 - Gbar B1]]

    forward over [0, T] and reports the determinant of its lower-right 3n x 3n
    block; the certificate holds when |det| > 1e-8.
    """
    grid = grid or cc.grid
    n3 = 3 * cc.n
    Gb = cc.Gbar

    def rhs(t, Phi):
        a1 = cc.at("a1", t)
        b1 = cc.at("b1", t)
        a2 = cc.at("a2", t)
        b2 = cc.at("b2", t)
        top = np.concatenate([a1, b1], axis=1)
        low_left = a2 - Gb @ a1 + (b2 - Gb @ b1) @ Gb
        low = np.concatenate([low_left, b2 - Gb @ b1], axis=1)
        return np.concatenate([top, low], axis=0) @ Phi

    Phi = integrate_rk4(rhs, np.eye(2 * n3), grid, "forward")
    block = Phi.terminal[n3:, n3:]
    det = float(np.linalg.det(block))
    return {"holds": bool(abs(det) > COND37_DET_TOL), "determinant": det}


def explicit_K_reduced(cc: CCMatrices, grid: TimeGrid | None = None) -> Trajectory:
    """Closed-form K for the reduced case (no state/average noise feedthrough
    into the adjoints: C = Ftilde = 0) with zero terminal data.

    K(t) = -[(0,I) Psi(T,t) (0,I)'ed]^{-1} (0,I) Psi(T,t) (I,0)'ed, with Psi the
    transition matrix of [[A1t, B1t], [A2t, B2t]].  The inverted block's
    smallest singular value is monitored at every node.
    """
    grid = grid or cc.grid
    n6 = 6 * cc.n
    if np.max(np.abs(cc.c2_t + cc.c2bar_t)) > 0.0:
        raise NotReducedCaseError("closed-form K requires C = Ftilde = 0")
    if np.max(np.abs(cc.K_terminal)) > 0.0:
        raise NotReducedCaseError("closed-form K is anchored at zero terminal data (G = 0)")

    def rhs(t, Psi):
        top = np.concatenate([cc.at("a1_t", t), cc.at("b1_t", t)], axis=1)
        low = np.concatenate([cc.at("a2_t", t), cc.at("b2_t", t)], axis=1)
        M = np.concatenate([top, low], axis=0)
        # d/dt Psi(T, t) = -Psi(T, t) M(t), Psi(T, T) = I
        return -Psi @ M

    Psi = integrate_rk4(rhs, np.eye(2 * n6), grid, "backward")
    out = np.empty((grid.steps + 1, n6, n6))
    for k in range(grid.steps + 1):
        Pk = Psi.values[k]
        lower_right = Pk[n6:, n6:]
        sv = np.linalg.svd(lower_right, compute_uv=False)[-1]
        if sv < REDUCED_SV_TOL:
            raise NearSingularError(
                f"transition block nearly singular at node {k}: sigma_min = {sv:.3e}")
        out[k] = -np.linalg.solve(lower_right, Pk[n6:, :n6])
    return Trajectory(grid, out)


@dataclass
class CCSolution:
    """Decoupling pair plus the extracted deterministic mean-field paths."""

    grid: TimeGrid
    K: Trajectory
    kappa: Trajectory
    X1: Trajectory          # (3n,) deterministic forward path
    xhat: Trajectory
    y1hat: Trajectory
    y2hat: Trajectory
    beta1hat: Trajectory
    phi: Trajectory         # first adjoint block of Y1
    diagnostics: dict = field(default_factory=dict)


def extract_mean_fields(cc: CCMatrices, K: Trajectory, kappa: Trajectory,
                        cond37: dict | None = None) -> CCSolution:
    """Close the deterministic mean system through Y = K X + kappa and read
    the mean fields off the block stacking.

    dX1/dt = (A1 + A1bar) X1 + B1 Y1 with Y1 = [K (X1, 0) + kappa]_{first 3n},
    X1(0) = (xi0, 0, 0).  The state block is (x, 0, 0) so xhat is the first n
    entries of X1; the adjoint block is (phi, y1, y2); the diffusion block is
    (0, beta1, 0), read from EZ = [K(A1pt + B1pt K)(X1, 0) + K B1pt kappa]
    restricted to the rows that feed the mean adjoint equation.
    """
    grid = cc.grid
    n = cc.n
    n3 = 3 * n

    def Y1_of(t, X1):
        Kt = K(t)
        return Kt[:n3, :n3] @ X1 + kappa(t)[:n3]

    def rhs(t, X1):
        return (cc.at("a1", t) + cc.at("a1bar", t)) @ X1 + cc.at("b1", t) @ Y1_of(t, X1)

    X1 = integrate_rk4(rhs, cc.xi_bar, grid, "forward")

    nodes = grid.steps + 1
    Y1 = np.empty((nodes, n3))
    EZ = np.empty((nodes, n3))
    ey2_resid = 0.0
    for k in range(nodes):
        Kk = K.values[k]
        kap = kappa.values[k]
        X1k = X1.values[k]
        Xt = np.concatenate([X1k, np.zeros(n3)])
        Yt = Kk @ Xt + kap
        Y1[k] = Yt[:n3]
        # consistency of the closure: the fluctuation-mean adjoint must vanish
        ey2_resid = max(ey2_resid, float(np.max(np.abs(Yt[n3:]))))
        Zt = Kk @ (cc.a1p_t[k] + cc.b1p_t[k] @ Kk) @ Xt + Kk @ cc.b1p_t[k] @ kap
        EZ[k] = Zt[n3:]

    xhat = Trajectory(grid, X1.values[:, :n])
    phi = Trajectory(grid, Y1[:, :n])
    y1hat = Trajectory(grid, Y1[:, n:2 * n])
    y2hat = Trajectory(grid, Y1[:, 2 * n:])
    beta1hat = Trajectory(grid, EZ[:, n:2 * n])

    diagnostics = {
        "ey2_max": ey2_resid,
        "k_terminal_err": float(np.max(np.abs(K.terminal - cc.K_terminal))),
        "kappa_terminal_err": float(np.max(np.abs(kappa.terminal - cc.kappa_terminal))),
    }
    if cond37 is not None:
        diagnostics["condition37"] = dict(cond37)
        if not cond37["holds"]:
            diagnostics["warnings"] = [
                "fluctuation-mean nondegeneracy certificate failed; EX2 = 0 not certified"
            ]
    return CCSolution(grid=grid, K=K, kappa=kappa, X1=X1, xhat=xhat, y1hat=y1hat,
                      y2hat=y2hat, beta1hat=beta1hat, phi=phi, diagnostics=diagnostics)


def solve_cc(params: ModelParams, grid: TimeGrid | None = None) -> tuple[CCSolution, FeedbackLaw]:
    """End-to-end decentralized synthesis.

    Pipeline: P Riccati -> block assembly -> K Riccati -> kappa -> determinant
    certificate -> mean-field extraction -> gains.  The law's affine adjoint
    is cross-checked by integrating it directly from the extracted mean fields
    (both routes must agree); the max deviation lands in the diagnostics.
    """
    stage = "solve_P"
    try:
        P, margin = solve_P(params, grid)
        stage = "build_cc"
        cc = build_cc(params, P)
        stage = "solve_K"
        K = solve_K(cc)
        stage = "solve_kappa"
        kappa = solve_kappa(cc, K)
        stage = "check_condition_37"
        cond = check_condition_37(cc)
        stage = "extract_mean_fields"
        sol = extract_mean_fields(cc, K, kappa, cond)
        stage = "feedback_gains"
        Th1 = theta1(P, params)
        Th2 = theta2(P, sol.phi, sol.xhat, params)
        stage = "phi_cross_check"
        phi_direct = solve_phi(P, params, sol.xhat, sol.y1hat, sol.y2hat, sol.beta1hat)
        cross = float(np.max(np.abs(phi_direct.values - sol.phi.values)))
    except MFLQGError as exc:
        raise type(exc)(f"[stage {stage}] {exc}") from exc
    sol.diagnostics.update({
        "regularity_margin": margin,
        "phi_cross_max_err": cross,
        "xhat_initial_err": float(np.max(np.abs(sol.xhat.initial - params.xi0))),
    })
    law = FeedbackLaw(grid=P.grid, P=P, phi=sol.phi, Theta1=Th1, Theta2=Th2,
                      regularity_margin=margin)
    return sol, law
