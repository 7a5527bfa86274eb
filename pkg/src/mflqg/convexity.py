"""Low-dimensional sufficient criteria for convexity of the social cost.

The social objective is a quadratic functional of the stacked control; for
large populations its convexity cannot be checked head-on, but three
low-dimensional certificates cover the practical cases:

* all weights positive semidefinite (uniformly convex when R is strictly
  positive);
* decoupled dynamics (F = Ftilde = 0) with indefinite weights, reduced to a
  single-agent problem with shifted weights whose own Riccati solvability
  certifies uniform convexity;
* coupled dynamics with indefinite running weight, handled through a
  Gronwall growth constant: K e^{2KT} lam_min(Q - dQ) + lam_min(R)/2 >= 0.

Every check returns a verdict; "not verified" never asserts non-convexity,
the criteria are sufficient only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CouplingPresentError, NonFiniteError, RegularityLostError
from .model import ModelParams
from .ode import Trajectory, eigvals_sym, integrate_rk4, symmetrize

UNIFORM_TOL = 1e-10

CONVEX = "Convex"
UNIFORMLY_CONVEX = "UniformlyConvex"
NOT_VERIFIED = "NotVerified"


@dataclass
class ConvexityVerdict:
    status: str
    criterion: str
    witness: dict = field(default_factory=dict)

    @property
    def is_convex(self) -> bool:
        return self.status in (CONVEX, UNIFORMLY_CONVEX)

    @property
    def is_uniformly_convex(self) -> bool:
        return self.status == UNIFORMLY_CONVEX


def _node_eig_min(params: ModelParams, name: str) -> float:
    table = params.node_table(name)
    return float(min(np.linalg.eigvalsh(symmetrize(M))[0] for M in table))


def check_psd_case(params: ModelParams) -> ConvexityVerdict:
    """Semidefinite-weight certificate: Q, R, G >= 0 gives convexity, and
    additionally R strictly positive definite gives uniform convexity."""
    lam_q = _node_eig_min(params, "Q")
    lam_r = _node_eig_min(params, "R")
    lam_g = float(np.linalg.eigvalsh(symmetrize(params.G))[0])
    witness = {"lambda_min_Q": lam_q, "lambda_min_R": lam_r, "lambda_min_G": lam_g}
    if min(lam_q, lam_r, lam_g) < -UNIFORM_TOL:
        return ConvexityVerdict(NOT_VERIFIED, "psd-weights", witness)
    if lam_r > UNIFORM_TOL:
        witness["margin"] = lam_r
        return ConvexityVerdict(UNIFORMLY_CONVEX, "psd-weights", witness)
    return ConvexityVerdict(CONVEX, "psd-weights", witness)


def _hat_tables(params: ModelParams):
    n = params.n
    eye = np.eye(n)
    Qt, Gt = params.node_table("Q"), params.node_table("Gamma")
    qhat = np.einsum("kji,kjl,klm->kim", Gt - eye, Qt, Gt - eye)
    ghat = (params.GammaBar - eye).T @ params.G @ (params.GammaBar - eye)
    return qhat, ghat


def _as_table(delta, steps: int, n: int, name: str) -> np.ndarray:
    arr = np.asarray(delta, dtype=float)
    if arr.shape == (n, n):
        return np.broadcast_to(arr, (steps + 1, n, n))
    if arr.shape == (steps + 1, n, n):
        return arr
    raise ValueError(f"{name}: expected shape {(n, n)} or {(steps + 1, n, n)}, got {arr.shape}")


def check_decoupled_indefinite(params: ModelParams, dQ=None, dG=None) -> ConvexityVerdict:
    """Indefinite-weight certificate for decoupled dynamics (F = Ftilde = 0).

    Requires Q - Qhat >= 0, G - Ghat >= 0 and shifts dQ >= Q - Qhat,
    dG >= G - Ghat (defaults: the tightest choice, dQ = Q - Qhat and
    dG = G - Ghat).  Uniform convexity of the shifted single-agent problem is
    certified by integrating its Riccati equation with weights
    (Q - dQ, R, G - dG) and watching R + D'PD stay strictly positive.
    """
    if np.max(np.abs(params.node_table("F"))) > 0 or np.max(np.abs(params.node_table("Ftilde"))) > 0:
        raise CouplingPresentError("this certificate requires F = Ftilde = 0")
    n, steps = params.n, params.steps
    Qt = params.node_table("Q")
    qhat, ghat = _hat_tables(params)
    q_gap = min(np.linalg.eigvalsh(symmetrize(M))[0] for M in (Qt - qhat))
    g_gap = np.linalg.eigvalsh(symmetrize(params.G - ghat))[0]
    witness = {"lambda_min_Q_minus_Qhat": float(q_gap), "lambda_min_G_minus_Ghat": float(g_gap)}
    if q_gap < -UNIFORM_TOL or g_gap < -UNIFORM_TOL:
        return ConvexityVerdict(NOT_VERIFIED, "decoupled-indefinite", witness)

    dQt = Qt - qhat if dQ is None else _as_table(dQ, steps, n, "dQ")
    dGm = params.G - ghat if dG is None else np.asarray(dG, dtype=float)
    dq_ok = min(np.linalg.eigvalsh(symmetrize(M))[0] for M in (dQt - (Qt - qhat)))
    dg_ok = np.linalg.eigvalsh(symmetrize(dGm - (params.G - ghat)))[0]
    witness["lambda_min_dQ_gap"] = float(dq_ok)
    witness["lambda_min_dG_gap"] = float(dg_ok)
    if dq_ok < -UNIFORM_TOL:
        witness["failed"] = "dQ >= Q - Qhat"
        return ConvexityVerdict(NOT_VERIFIED, "decoupled-indefinite", witness)
    if dg_ok < -UNIFORM_TOL:
        witness["failed"] = "dG >= G - Ghat"
        return ConvexityVerdict(NOT_VERIFIED, "decoupled-indefinite", witness)

    shifted = ModelParams(
        n=n, m=params.m, T=params.T, steps=steps,
        A=params.A, B=params.B, C=params.C, D=params.D,
        F=np.zeros((n, n)), Ftilde=np.zeros((n, n)),
        Q=Qt - dQt, R=params.R, G=symmetrize(params.G - dGm),
        Gamma=np.zeros((n, n)), GammaBar=np.zeros((n, n)),
        eta=np.zeros(n), etaBar=np.zeros(n), xi0=np.zeros(n))
    from .riccati import solve_P
    try:
        _, margin = solve_P(shifted)
    except (NonFiniteError, RegularityLostError) as exc:
        witness["riccati"] = f"failed: {exc}"
        return ConvexityVerdict(NOT_VERIFIED, "decoupled-indefinite", witness)
    witness["margin"] = margin
    return ConvexityVerdict(UNIFORMLY_CONVEX, "decoupled-indefinite", witness)


def growth_constant(params: ModelParams) -> float:
    """Gronwall growth constant of the stacked second moment.

    K = max of: lam_max(A' + A) + lam_max(F' + F);
                lam_max(C'C + (Ftilde + C)'(Ftilde + C));
                sqrt(lam_max(B'B));
                sqrt(lam_max(D'(Ftilde Ftilde' + C Ftilde' + Ftilde C')D)
                     + lam_max(D'C C'D));
                lam_max(D'D).
    Time-varying coefficients take the max over grid nodes.
    """
    tabs = {k: params.node_table(k) for k in ("A", "B", "C", "D", "F", "Ftilde")}
    K = 0.0
    for k in range(params.steps + 1):
        A, B, C, D = tabs["A"][k], tabs["B"][k], tabs["C"][k], tabs["D"][k]
        F, Ft = tabs["F"][k], tabs["Ftilde"][k]
        terms = (
            eigvals_sym(A.T + A)[-1] + eigvals_sym(F.T + F)[-1],
            eigvals_sym(C.T @ C + (Ft + C).T @ (Ft + C))[-1],
            np.sqrt(max(eigvals_sym(B.T @ B)[-1], 0.0)),
            np.sqrt(max(eigvals_sym(D.T @ (Ft @ Ft.T + C @ Ft.T + Ft @ C.T) @ D)[-1], 0.0)
                    + max(eigvals_sym(D.T @ (C @ C.T) @ D)[-1], 0.0)),
            eigvals_sym(D.T @ D)[-1],
        )
        K = max(K, *terms)
    return float(max(K, 0.0))


def check_coupled_indefinite(params: ModelParams, dQ=None) -> ConvexityVerdict:
    """Indefinite-running-weight certificate for coupled dynamics.

    Hypotheses checked in order: G >= 0; Q - Qhat >= 0; dQ >= Q - Qhat;
    lam_min(Q - dQ) <= 0.  Then with K the growth constant the certificate is

        K e^{2KT} lam_min(Q - dQ) + lam_min(R)/2 >= 0   (convex;
        uniformly convex when strictly positive).
    """
    n, steps = params.n, params.steps
    witness: dict = {}
    lam_g = float(np.linalg.eigvalsh(symmetrize(params.G))[0])
    witness["lambda_min_G"] = lam_g
    if lam_g < -UNIFORM_TOL:
        witness["failed"] = "G >= 0"
        return ConvexityVerdict(NOT_VERIFIED, "coupled-indefinite", witness)
    Qt = params.node_table("Q")
    qhat, _ = _hat_tables(params)
    q_gap = float(min(np.linalg.eigvalsh(symmetrize(M))[0] for M in (Qt - qhat)))
    witness["lambda_min_Q_minus_Qhat"] = q_gap
    if q_gap < -UNIFORM_TOL:
        witness["failed"] = "Q - Qhat >= 0"
        return ConvexityVerdict(NOT_VERIFIED, "coupled-indefinite", witness)
    dQt = Qt - qhat if dQ is None else _as_table(dQ, steps, n, "dQ")
    dq_gap = float(min(np.linalg.eigvalsh(symmetrize(M))[0] for M in (dQt - (Qt - qhat))))
    witness["lambda_min_dQ_gap"] = dq_gap
    if dq_gap < -UNIFORM_TOL:
        witness["failed"] = "dQ >= Q - Qhat"
        return ConvexityVerdict(NOT_VERIFIED, "coupled-indefinite", witness)
    lam_qd = float(min(np.linalg.eigvalsh(symmetrize(M))[0] for M in (Qt - dQt)))
    witness["lambda_min_Q_minus_dQ"] = lam_qd
    if lam_qd > UNIFORM_TOL:
        witness["failed"] = "lam_min(Q - dQ) <= 0"
        return ConvexityVerdict(NOT_VERIFIED, "coupled-indefinite", witness)
    K = growth_constant(params)
    lam_r = _node_eig_min(params, "R")
    lhs = K * np.exp(2.0 * K * params.T) * lam_qd + 0.5 * lam_r
    witness.update({"K": K, "lambda_min_R": lam_r, "lhs": float(lhs)})
    if lhs > UNIFORM_TOL:
        witness["margin"] = float(lhs)
        return ConvexityVerdict(UNIFORMLY_CONVEX, "coupled-indefinite", witness)
    if lhs >= 0.0:
        return ConvexityVerdict(CONVEX, "coupled-indefinite", witness)
    witness["failed"] = "K e^{2KT} lam_min(Q - dQ) + lam_min(R)/2 >= 0"
    return ConvexityVerdict(NOT_VERIFIED, "coupled-indefinite", witness)


def report_all(params: ModelParams) -> dict:
    """Run every applicable certificate and collect the verdicts."""
    out = {"psd": check_psd_case(params)}
    coupled = (np.max(np.abs(params.node_table("F"))) > 0
               or np.max(np.abs(params.node_table("Ftilde"))) > 0)
    if not coupled:
        out["decoupled_indefinite"] = check_decoupled_indefinite(params)
    else:
        out["coupled_indefinite"] = check_coupled_indefinite(params)
    return out
