"""Problem definition: coefficients, validation, the stacked-system builder,
and JSON config I/O.

An instance is the weakly coupled population model

    dx_i = (A x_i + B u_i + F xavg) dt + (C x_i + D u_i + Ftilde xavg) dW_i,
    J_i  = 1/2 E[ int ||x_i - Gamma xavg - eta||_Q^2 + ||u_i||_R^2 dt
                  + ||x_i(T) - GammaBar xavg(T) - etaBar||_G^2 ],

with xavg the population state-average and all agents started at xi0.  The
social objective is the sum of the J_i.

Coefficients A, B, C, D, F, Ftilde, Q, R, Gamma, eta may be time-varying,
stored as per-node samples on the master grid (piecewise linear in between);
G, GammaBar, etaBar, xi0 are constants.  The stacked nN-dimensional form of
the same problem (used only by the small-N brute-force oracle) is assembled
by :func:`build_augmented` / :class:`AugmentedCoeffs`.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, fields

import numpy as np

from .errors import InvalidNError, ParseError, SchemaError
from .ode import TimeGrid, symmetrize

# name -> (shape in terms of (n, m), may be time-varying, must be symmetric)
COEFF_SPEC = {
    "A": (("n", "n"), True, False),
    "B": (("n", "m"), True, False),
    "C": (("n", "n"), True, False),
    "D": (("n", "m"), True, False),
    "F": (("n", "n"), True, False),
    "Ftilde": (("n", "n"), True, False),
    "Q": (("n", "n"), True, True),
    "R": (("m", "m"), True, True),
    "Gamma": (("n", "n"), True, False),
    "eta": (("n",), True, False),
    "G": (("n", "n"), False, True),
    "GammaBar": (("n", "n"), False, False),
    "etaBar": (("n",), False, False),
    "xi0": (("n",), False, False),
}

CONFIG_KEYS = ["n", "m", "T", "steps"] + list(COEFF_SPEC)

SYM_REPAIR_TOL = 1e-8

# The decentralized pipeline never forms Nn x Nn matrices; the brute-force
# oracle path refuses to materialize them past this size.
MAX_AUGMENTED_DIM = 64


def _shape_of(spec, n: int, m: int):
    return tuple(n if s == "n" else m for s in spec)


@dataclass(eq=False)
class ModelParams:
    """All problem coefficients plus the master grid parameters."""

    n: int
    m: int
    T: float
    steps: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    F: np.ndarray
    Ftilde: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    G: np.ndarray
    Gamma: np.ndarray
    GammaBar: np.ndarray
    eta: np.ndarray
    etaBar: np.ndarray
    xi0: np.ndarray

    def __post_init__(self):
        for name in COEFF_SPEC:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.steps)

    def base_shape(self, name: str):
        return _shape_of(COEFF_SPEC[name][0], self.n, self.m)

    def is_time_varying(self, name: str) -> bool:
        return getattr(self, name).ndim == len(COEFF_SPEC[name][0]) + 1

    def node_table(self, name: str) -> np.ndarray:
        """Samples at all nodes, shape (steps+1, *base); constants broadcast."""
        arr = getattr(self, name)
        if self.is_time_varying(name):
            return arr
        return np.broadcast_to(arr, (self.steps + 1,) + arr.shape)

    def coeff_at(self, name: str, t: float) -> np.ndarray:
        arr = getattr(self, name)
        if not self.is_time_varying(name):
            return arr
        dt = self.T / self.steps
        u = t / dt
        i = int(np.floor(u))
        i = min(max(i, 0), self.steps - 1)
        w = u - i
        if w == 0.0:
            return arr[i]
        return (1.0 - w) * arr[i] + w * arr[i + 1]

    def equals(self, other: "ModelParams") -> bool:
        if (self.n, self.m, self.T, self.steps) != (other.n, other.m, other.T, other.steps):
            return False
        return all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in COEFF_SPEC
        )


def validate(params: ModelParams) -> list[str]:
    """Return every violated admissibility condition (empty list = admissible)."""
    report: list[str] = []
    if not (isinstance(params.n, int) and params.n >= 1):
        report.append(f"n must be a positive integer, got {params.n!r}")
    if not (isinstance(params.m, int) and params.m >= 1):
        report.append(f"m must be a positive integer, got {params.m!r}")
    if not (np.isfinite(params.T) and params.T > 0):
        report.append(f"T must be positive and finite, got {params.T}")
    if not (isinstance(params.steps, int) and params.steps >= 2):
        report.append(f"steps must be an integer >= 2, got {params.steps!r}")
    if report:
        return report

    for name, (spec, tv_ok, must_sym) in COEFF_SPEC.items():
        arr = getattr(params, name)
        base = _shape_of(spec, params.n, params.m)
        if arr.shape == base:
            table = arr[None]
        elif tv_ok and arr.shape == (params.steps + 1,) + base:
            table = arr
        else:
            report.append(
                f"{name}: expected shape {base} or {(params.steps + 1,) + base}, "
                f"got {arr.shape}"
            )
            continue
        if not np.all(np.isfinite(arr)):
            report.append(f"{name}: contains non-finite entries")
            continue
        if must_sym:
            tol = SYM_REPAIR_TOL * (1.0 + np.max(np.abs(table)))
            asym = np.max(np.abs(table - np.swapaxes(table, -1, -2)))
            if asym > tol:
                report.append(f"{name}: asymmetry {asym:.3e} exceeds {tol:.3e}")
    return report


# ---------------------------------------------------------------------------
# Stacked (augmented) system for the brute-force centralized oracle
# ---------------------------------------------------------------------------

@dataclass
class AugmentedSystem:
    """One time-slice of the nN-dimensional stacked problem.

    A: (Nn,Nn) with A + F/N on the diagonal blocks and F/N off-diagonal;
    C[i]: nonzero i-th block row only (Ftilde/N everywhere, +C at column i);
    D[i]: D in block (i, i); Q = diag(Q) + (E kron (Qhat - Q))/N with
    Qhat = (Gamma-I)'Q(Gamma-I); G analogous; R = diag(R);
    S1 = stack(Gamma'Q eta - Q eta); S2 = stack(GammaBar'G etaBar - G etaBar);
    Xi = stack(xi0).
    """

    N: int
    n: int
    m: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray  # (N, Nn, Nn)
    D: np.ndarray  # (N, Nn, Nm)
    Q: np.ndarray
    R: np.ndarray
    G: np.ndarray
    S1: np.ndarray
    S2: np.ndarray
    Xi: np.ndarray
    Qhat: np.ndarray
    Ghat: np.ndarray


def _assemble_augmented(N, n, m, A, B, C, D, F, Ftilde, Q, R, G, Gamma, GammaBar,
                        eta, etaBar, xi0) -> AugmentedSystem:
    eye = np.eye(N)
    ones = np.ones((N, N))
    Qhat = (Gamma - np.eye(n)).T @ Q @ (Gamma - np.eye(n))
    Ghat = (GammaBar - np.eye(n)).T @ G @ (GammaBar - np.eye(n))
    AA = np.kron(eye, A) + np.kron(ones, F) / N
    BB = np.kron(eye, B)
    QQ = np.kron(eye, Q) + np.kron(ones, Qhat - Q) / N
    GG = np.kron(eye, G) + np.kron(ones, Ghat - G) / N
    RR = np.kron(eye, R)
    CC = np.zeros((N, N * n, N * n))
    DD = np.zeros((N, N * n, N * m))
    for i in range(N):
        rows = slice(i * n, (i + 1) * n)
        CC[i, rows, :] = np.tile(Ftilde / N, N)
        CC[i, rows, i * n:(i + 1) * n] += C
        DD[i, rows, i * m:(i + 1) * m] = D
    # linear cost terms, fixed by expanding sum_i ||x_i - Gamma xavg - eta||_Q^2
    S1 = np.tile(Gamma.T @ (Q @ eta) - Q @ eta, N)
    S2 = np.tile(GammaBar.T @ (G @ etaBar) - G @ etaBar, N)
    Xi = np.tile(xi0, N)
    return AugmentedSystem(N=N, n=n, m=m, A=AA, B=BB, C=CC, D=DD, Q=symmetrize(QQ),
                           R=symmetrize(RR), G=symmetrize(GG), S1=S1, S2=S2, Xi=Xi,
                           Qhat=Qhat, Ghat=Ghat)


def _check_population(params: ModelParams, N: int):
    if not (isinstance(N, int) and N >= 1):
        raise InvalidNError(f"population size must be a positive integer, got {N!r}")
    if N * params.n > MAX_AUGMENTED_DIM:
        raise InvalidNError(
            f"refusing to materialize an {N * params.n}-dimensional stacked system "
            f"(limit {MAX_AUGMENTED_DIM}); the decentralized pipeline never needs it"
        )


def build_augmented(params: ModelParams, N: int, node: int = 0) -> AugmentedSystem:
    """Stacked system slice at the given grid node."""
    _check_population(params, N)
    vals = {name: params.node_table(name)[node]
            for name in ("A", "B", "C", "D", "F", "Ftilde", "Q", "R", "Gamma", "eta")}
    return _assemble_augmented(N, params.n, params.m, vals["A"], vals["B"], vals["C"],
                               vals["D"], vals["F"], vals["Ftilde"], vals["Q"],
                               vals["R"], params.G, vals["Gamma"], params.GammaBar,
                               vals["eta"], params.etaBar, params.xi0)


class AugmentedCoeffs:
    """Continuous-time view of the stacked system, for the oracle solver.

    Assembly is linear in the base coefficients, so interpolating them first
    and assembling afterwards equals interpolating assembled blocks.
    """

    def __init__(self, params: ModelParams, N: int):
        _check_population(params, N)
        self.params = params
        self.N = N
        self.dim = N * params.n
        self._constant = not any(
            params.is_time_varying(k)
            for k in ("A", "B", "C", "D", "F", "Ftilde", "Q", "R", "Gamma", "eta")
        )
        self._cache = build_augmented(params, N, 0) if self._constant else None

    def at(self, t: float) -> AugmentedSystem:
        if self._constant:
            return self._cache
        p = self.params
        return _assemble_augmented(
            self.N, p.n, p.m, p.coeff_at("A", t), p.coeff_at("B", t),
            p.coeff_at("C", t), p.coeff_at("D", t), p.coeff_at("F", t),
            p.coeff_at("Ftilde", t), p.coeff_at("Q", t), p.coeff_at("R", t),
            p.G, p.coeff_at("Gamma", t), p.GammaBar, p.coeff_at("eta", t),
            p.etaBar, p.xi0)

    def at_node(self, k: int) -> AugmentedSystem:
        if self._constant:
            return self._cache
        return build_augmented(self.params, self.N, k)


# ---------------------------------------------------------------------------
# JSON config I/O
# ---------------------------------------------------------------------------

def _coeff_to_json(params: ModelParams, name: str):
    arr = getattr(params, name)
    if params.is_time_varying(name):
        return {"samples": arr.tolist()}
    return arr.tolist()


def save_config(params: ModelParams, path):
    doc = {"n": params.n, "m": params.m, "T": params.T, "steps": params.steps}
    for name in COEFF_SPEC:
        doc[name] = _coeff_to_json(params, name)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_coeff(name: str, raw, n: int, m: int, steps: int) -> np.ndarray:
    spec, tv_ok, must_sym = COEFF_SPEC[name]
    base = _shape_of(spec, n, m)
    if isinstance(raw, dict):
        if "samples" not in raw:
            raise SchemaError(f"field {name!r}: time-varying entry must carry 'samples'")
        if not tv_ok:
            raise SchemaError(f"field {name!r} must be constant")
        arr = np.asarray(raw["samples"], dtype=float)
        want = (steps + 1,) + base
        if arr.shape != want:
            raise SchemaError(f"field {name!r}: expected samples of shape {want}, got {arr.shape}")
    else:
        arr = np.asarray(raw, dtype=float)
        if arr.shape != base:
            raise SchemaError(f"field {name!r}: expected shape {base}, got {arr.shape}")
    if must_sym:
        table = arr if arr.ndim == len(base) + 1 else arr[None]
        asym = np.max(np.abs(table - np.swapaxes(table, -1, -2)))
        if asym > SYM_REPAIR_TOL * (1.0 + np.max(np.abs(arr))):
            warnings.warn(f"{name} symmetrized on load (asymmetry {asym:.3e})")
        arr = 0.5 * (arr + np.swapaxes(arr, -1, -2))
    return arr


def load_config(path) -> ModelParams:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    for key in CONFIG_KEYS:
        if key not in doc:
            raise SchemaError(f"{path}: missing required field {key!r}")
    try:
        n, m = int(doc["n"]), int(doc["m"])
        T, steps = float(doc["T"]), int(doc["steps"])
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad scalar field: {exc}") from exc
    if n < 1 or m < 1:
        raise SchemaError(f"{path}: dimensions must be positive (n={n}, m={m})")
    if steps < 2:
        raise SchemaError(f"{path}: steps must be >= 2, got {steps}")
    coeffs = {name: _parse_coeff(name, doc[name], n, m, steps) for name in COEFF_SPEC}
    return ModelParams(n=n, m=m, T=T, steps=steps, **coeffs)
