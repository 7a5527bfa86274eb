"""Euler-Maruyama Monte Carlo for the N-agent system, with reproducible
counter-based noise and cost evaluation.

Brownian increments come from one Philox stream per (seed, path, agent), so
any (path, agent, step) increment regenerates bit-identically no matter how
work is chunked or how many worker threads run.  Paths are independent work
units; reductions are ordered by path index, which keeps every simulation
bit-deterministic for a fixed seed regardless of MFLQG_THREADS.

The state-average uses the same-step (explicit) value in both drift and
diffusion.  Costs are accumulated online with trapezoid weights so that huge
runs never need to store full trajectories; when trajectories do fit in the
storage budget they are kept and :func:`social_cost` can recompute the same
numbers from them.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, MissingTrajectoriesError, NonFiniteError
from .model import AugmentedCoeffs, ModelParams
from .ode import TimeGrid, trapezoid_nodes
from .riccati import FeedbackLaw, OracleLaw

# full trajectory storage cap, in scalars (states + controls combined)
STORE_BUDGET = 2**28


def worker_count() -> int:
    env = os.environ.get("MFLQG_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class NoiseBank:
    """Reproducible Brownian increments keyed by (seed, path, agent).

    Each (path, agent) pair owns an independent Philox stream; increments are
    N(0, dt) along the grid steps.
    """

    seed: int
    n_paths: int
    n_agents: int
    grid: TimeGrid

    def __post_init__(self):
        if self.n_paths < 1 or self.n_agents < 1:
            raise ValueError("need at least one path and one agent")
        if self.n_paths >= 2**32 or self.n_agents >= 2**32:
            raise ValueError("path/agent indices must fit in 32 bits")

    def _normals(self, path: int, agent: int) -> np.ndarray:
        key = [self.seed & (2**64 - 1), ((path << 32) | agent) & (2**64 - 1)]
        gen = np.random.Generator(np.random.Philox(key=key))
        return gen.standard_normal(self.grid.steps)

    def increments(self, path: int) -> np.ndarray:
        """(n_agents, steps) array of Brownian increments for one path."""
        out = np.empty((self.n_agents, self.grid.steps))
        for agent in range(self.n_agents):
            out[agent] = self._normals(path, agent)
        return out * np.sqrt(self.grid.dt)

    def increments_block(self, paths) -> np.ndarray:
        out = np.empty((len(paths), self.n_agents, self.grid.steps))
        for j, p in enumerate(paths):
            out[j] = self.increments(p)
        return out

    def materialized(self) -> "MaterializedNoise":
        return MaterializedNoise(self)


class MaterializedNoise:
    """Noise bank facade that generates all increments once and serves slices.

    Pays off when the same bank drives many simulations (common-random-number
    comparisons); falls back to identical values because the underlying
    streams are keyed, not stateful.
    """

    def __init__(self, bank: NoiseBank):
        scalars = bank.n_paths * bank.n_agents * bank.grid.steps
        if scalars > STORE_BUDGET:
            raise ValueError(f"refusing to materialize {scalars} noise scalars")
        self.seed = bank.seed
        self.n_paths = bank.n_paths
        self.n_agents = bank.n_agents
        self.grid = bank.grid
        self._all = bank.increments_block(range(bank.n_paths))

    def increments_block(self, paths) -> np.ndarray:
        return self._all[paths.start:paths.stop]


@dataclass
class SimResult:
    """Monte Carlo output: state-average paths, costs, optional trajectories."""

    grid: TimeGrid
    N: int
    n_paths: int
    seed: int
    xavg: np.ndarray                 # (paths, steps+1, n)
    J_i: np.ndarray                  # (paths, N)
    J_soc: np.ndarray                # (paths,)
    xs: np.ndarray | None = None     # (paths, N, steps+1, n)
    us: np.ndarray | None = None     # (paths, N, steps+1, m)
    meta: dict = field(default_factory=dict)


@dataclass
class CostSummary:
    j_soc_mean: float
    j_soc_se: float
    j_i_mean: np.ndarray
    j_soc_paths: np.ndarray
    j_i_paths: np.ndarray


def _trap_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.steps + 1, grid.dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _quad(dev: np.ndarray, M: np.ndarray) -> np.ndarray:
    # dev: (..., d), M: (d, d) -> (...)
    return ((dev @ M) * dev).sum(axis=-1)


class _CostAccumulator:
    """Online trapezoid accumulation of the per-agent individual costs."""

    def __init__(self, params: ModelParams, grid: TimeGrid, n_paths: int, N: int):
        self.p = params
        self.w = _trap_weights(grid)
        self.run = np.zeros((n_paths, N))
        self.tabs = {k: params.node_table(k) for k in ("Q", "R", "Gamma", "eta")}

    def update(self, k: int, X: np.ndarray, U: np.ndarray, xb: np.ndarray):
        Q, R = self.tabs["Q"][k], self.tabs["R"][k]
        Gam, eta = self.tabs["Gamma"][k], self.tabs["eta"][k]
        dev = X - (xb @ Gam.T)[:, None, :] - eta
        self.run += self.w[k] * (_quad(dev, Q) + _quad(U, R))

    def finalize(self, X: np.ndarray, xb: np.ndarray) -> np.ndarray:
        devT = X - (xb @ self.p.GammaBar.T)[:, None, :] - self.p.etaBar
        return 0.5 * (self.run + _quad(devT, self.p.G))


def _chunks(n_paths: int, per_path_scalars: int) -> list[range]:
    # Chunk boundaries depend only on the memory cap, never on the worker
    # count: BLAS kernels are not bit-stable across batch shapes, so the
    # shapes must be pinned for thread-count-independent output.
    mem_cap = max(1, 2**24 // max(1, per_path_scalars))
    size = max(1, min(n_paths, mem_cap))
    return [range(a, min(a + size, n_paths)) for a in range(0, n_paths, size)]


def _run_chunks(fn, chunks):
    workers = worker_count()
    if workers == 1 or len(chunks) == 1:
        for c in chunks:
            fn(c)
        return
    with ThreadPoolExecutor(max_workers=workers) as ex:
        list(ex.map(fn, chunks))


def _should_store(store, n_paths, N, grid, n, m) -> bool:
    if store is not None:
        return bool(store)
    return n_paths * N * (grid.steps + 1) * (n + m) <= STORE_BUDGET


def simulate_decentralized(params: ModelParams, law: FeedbackLaw, N: int,
                           noise: NoiseBank, paths: int | None = None,
                           store: bool | None = None) -> SimResult:
    """Simulate all N agents under u_i = Theta1 x_i + Theta2, common start xi0.

    The state-average is recomputed from the current states at every step and
    feeds both drift and diffusion.
    """
    grid = noise.grid
    if law.grid.steps != grid.steps or law.grid.T != grid.T:
        raise GridMismatchError("law grid does not match the noise grid")
    if noise.n_agents < N:
        raise GridMismatchError(f"noise bank holds {noise.n_agents} agents, need {N}")
    n_paths = noise.n_paths if paths is None else paths
    if n_paths > noise.n_paths:
        raise GridMismatchError(f"noise bank holds {noise.n_paths} paths, need {n_paths}")
    n, m, M = params.n, params.m, grid.steps
    dt = grid.dt
    storing = _should_store(store, n_paths, N, grid, n, m)

    tabs = {k: params.node_table(k) for k in ("A", "B", "C", "D", "F", "Ftilde")}
    Th1, Th2 = law.Theta1.values, law.Theta2.values

    xavg = np.empty((n_paths, M + 1, n))
    J_i = np.empty((n_paths, N))
    xs = np.empty((n_paths, N, M + 1, n)) if storing else None
    us = np.empty((n_paths, N, M + 1, m)) if storing else None

    def run(chunk: range):
        P = len(chunk)
        X = np.broadcast_to(params.xi0, (P, N, n)).copy()
        dW = noise.increments_block(chunk)[:, :N, :]
        acc = _CostAccumulator(params, grid, P, N)
        sl = slice(chunk.start, chunk.stop)
        for k in range(M + 1):
            xb = X.mean(axis=1)
            U = X @ Th1[k].T + Th2[k]
            xavg[sl, k] = xb
            if storing:
                xs[sl, :, k] = X
                us[sl, :, k] = U
            acc.update(k, X, U, xb)
            if k == M:
                J_i[sl] = acc.finalize(X, xb)
                break
            A, B = tabs["A"][k], tabs["B"][k]
            C, D = tabs["C"][k], tabs["D"][k]
            F, Ft = tabs["F"][k], tabs["Ftilde"][k]
            drift = X @ A.T + U @ B.T + (xb @ F.T)[:, None, :]
            diff = X @ C.T + U @ D.T + (xb @ Ft.T)[:, None, :]
            X = X + dt * drift + diff * dW[:, :, k, None]
            if not np.all(np.isfinite(X)):
                raise NonFiniteError(f"decentralized simulation blew up at step {k + 1}")

    _run_chunks(run, _chunks(n_paths, N * M))
    return SimResult(grid=grid, N=N, n_paths=n_paths, seed=noise.seed, xavg=xavg,
                     J_i=J_i, J_soc=J_i.sum(axis=1), xs=xs, us=us,
                     meta={"kind": "decentralized"})


def simulate_centralized(aug: AugmentedCoeffs, law: OracleLaw, noise: NoiseBank,
                         paths: int | None = None, store: bool | None = None) -> SimResult:
    """Simulate the stacked system under the centralized law u = gain x + affine.

    The stacked trajectory is unstacked into per-agent paths for cost
    evaluation, so costs are directly comparable with the decentralized run
    under the same noise bank.
    """
    grid = noise.grid
    if law.grid.steps != grid.steps or law.grid.T != grid.T:
        raise GridMismatchError("oracle grid does not match the noise grid")
    params, N = aug.params, aug.N
    if noise.n_agents < N:
        raise GridMismatchError(f"noise bank holds {noise.n_agents} agents, need {N}")
    n_paths = noise.n_paths if paths is None else paths
    if n_paths > noise.n_paths:
        raise GridMismatchError(f"noise bank holds {noise.n_paths} paths, need {n_paths}")
    n, m, M = params.n, params.m, grid.steps
    dt = grid.dt
    storing = _should_store(store, n_paths, N, grid, n, m)

    gains, affs = law.gain.values, law.affine.values

    def diffusion_mats(s):
        # column-stacked transposes so the per-agent diffusion rows come from
        # two plain matmuls: (Y @ CT + U @ DT).reshape(P, N, Nn)
        CT = np.concatenate([s.C[i].T for i in range(N)], axis=1)
        DT = np.concatenate([s.D[i].T for i in range(N)], axis=1)
        return s.A.T, s.B.T, CT, DT

    const_mats = diffusion_mats(aug.at_node(0)) if aug._constant else None

    xavg = np.empty((n_paths, M + 1, n))
    J_i = np.empty((n_paths, N))
    xs = np.empty((n_paths, N, M + 1, n)) if storing else None
    us = np.empty((n_paths, N, M + 1, m)) if storing else None

    def run(chunk: range):
        P = len(chunk)
        Y = np.broadcast_to(aug.at_node(0).Xi, (P, N * n)).copy()
        dW = noise.increments_block(chunk)[:, :N, :]
        acc = _CostAccumulator(params, grid, P, N)
        sl = slice(chunk.start, chunk.stop)
        for k in range(M + 1):
            U = Y @ gains[k].T + affs[k]
            Xag = Y.reshape(P, N, n)
            Uag = U.reshape(P, N, m)
            xb = Xag.mean(axis=1)
            xavg[sl, k] = xb
            if storing:
                xs[sl, :, k] = Xag
                us[sl, :, k] = Uag
            acc.update(k, Xag, Uag, xb)
            if k == M:
                J_i[sl] = acc.finalize(Xag, xb)
                break
            AT, BT, CT, DT = const_mats if const_mats is not None else diffusion_mats(aug.at_node(k))
            drift = Y @ AT + U @ BT
            diffs = (Y @ CT + U @ DT).reshape(P, N, N * n)
            Y = Y + dt * drift + (diffs * dW[:, :, k, None]).sum(axis=1)
            if not np.all(np.isfinite(Y)):
                raise NonFiniteError(f"centralized simulation blew up at step {k + 1}")

    _run_chunks(run, _chunks(n_paths, N * M))
    return SimResult(grid=grid, N=N, n_paths=n_paths, seed=noise.seed, xavg=xavg,
                     J_i=J_i, J_soc=J_i.sum(axis=1), xs=xs, us=us,
                     meta={"kind": "centralized"})


def social_cost(result: SimResult, params: ModelParams) -> CostSummary:
    """Recompute the social cost from stored trajectories (trapezoid rule).

    J_i = 1/2 [ int ||x_i - Gamma xavg - eta||_Q^2 + ||u_i||_R^2 dt
                + ||x_i(T) - GammaBar xavg(T) - etaBar||_G^2 ],
    J_soc = sum_i J_i; expectations are path averages with standard error
    sample-std / sqrt(paths).
    """
    if result.xs is None or result.us is None:
        raise MissingTrajectoriesError("full trajectories were not stored for this run")
    grid = result.grid
    Qt, Rt = params.node_table("Q"), params.node_table("R")
    Gt, et = params.node_table("Gamma"), params.node_table("eta")
    # tracking deviation x_i - Gamma xavg - eta, per (path, agent, node)
    gx = np.einsum("kij,pkj->pki", Gt, result.xavg)
    dev = result.xs - gx[:, None] - et[None, None]
    cq = np.einsum("pnki,kij,pnkj->pnk", dev, Qt, dev)
    cr = np.einsum("pnki,kij,pnkj->pnk", result.us, Rt, result.us)
    run = trapezoid_nodes(np.moveaxis(cq + cr, -1, 0), grid)
    devT = (result.xs[:, :, -1] - (result.xavg[:, -1] @ params.GammaBar.T)[:, None]
            - params.etaBar)
    term = _quad(devT, params.G)
    j_i = 0.5 * (run + term)
    j_soc = j_i.sum(axis=1)
    se = float(j_soc.std(ddof=1) / np.sqrt(len(j_soc))) if len(j_soc) > 1 else 0.0
    return CostSummary(j_soc_mean=float(j_soc.mean()), j_soc_se=se,
                       j_i_mean=j_i.mean(axis=0), j_soc_paths=j_soc, j_i_paths=j_i)


def stacked_social_cost(params: ModelParams, N: int, xs: np.ndarray,
                        us: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Social cost per path evaluated through the stacked quadratic form.

    1/2 [ int x'Qx + 2 S1'x + N eta'Q eta + u'Ru dt
          + x(T)'G x(T) + 2 S2'x(T) + N etaBar'G etaBar ]

    with the stacked weight matrices; used as the cross-check that the lifted
    cost really is the sum of the per-agent costs.
    """
    aug = AugmentedCoeffs(params, N)
    P, _, nodes, n = xs.shape
    x_st = np.swapaxes(xs, 1, 2).reshape(P, nodes, N * n)
    u_st = np.swapaxes(us, 1, 2).reshape(P, nodes, N * us.shape[-1])
    etat = params.node_table("eta")
    Qt = params.node_table("Q")
    integ = np.empty((nodes, P))
    for k in range(nodes):
        s = aug.at_node(k)
        xk, uk = x_st[:, k], u_st[:, k]
        integ[k] = (_quad(xk, s.Q) + 2.0 * xk @ s.S1 + N * etat[k] @ Qt[k] @ etat[k]
                    + _quad(uk, s.R))
    sT = aug.at_node(nodes - 1)
    xT = x_st[:, -1]
    terminal = (_quad(xT, sT.G) + 2.0 * xT @ sT.S2
                + N * params.etaBar @ params.G @ params.etaBar)
    return 0.5 * (trapezoid_nodes(integ, grid) + terminal)
