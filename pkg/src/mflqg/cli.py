"""Command-line pipeline: validation, convexity certificates, the
consistency-condition solve, Monte Carlo simulation, and the convergence and
optimality-gap experiments.

Every run writes its artifacts plus a manifest.json into the output
directory; CSV payloads are byte-identical across reruns with the same
inputs and any MFLQG_THREADS setting (floats are printed with 17 significant
digits, newlines are always LF).  Exit codes: 0 success, 1 validation
failure, 2 numerical failure (stage named on stderr).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import convergence_study, gap_study, lambda_boundedness
from .consistency import solve_cc
from .convexity import report_all, check_coupled_indefinite, check_decoupled_indefinite
from .errors import ConfigError, MFLQGError
from .model import ModelParams, load_config, save_config, validate
from .ode import TimeGrid, Trajectory
from .presets import repro_instance
from .riccati import FeedbackLaw
from .montecarlo import NoiseBank, simulate_decentralized, social_cost


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(cell if isinstance(cell, str) else fmt(cell) for cell in row) + "\n")
    return path


def write_json(path: Path, doc: dict) -> Path:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def sha256_of(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, config_path: Path, seed, grid: TimeGrid,
                    artifacts: list[Path], t0: float, extra: dict | None = None):
    doc = {
        "command": command,
        "config_sha256": sha256_of(config_path),
        "seed": seed,
        "grid": {"T": grid.T, "steps": grid.steps},
        "artifacts": sorted(p.name for p in artifacts),
        "wall_time_s": round(time.time() - t0, 3),
        "version": __version__,
    }
    if extra:
        doc.update(extra)
    write_json(out / "manifest.json", doc)


def _stash_config(src: Path | None, params: ModelParams, out: Path) -> Path:
    dest = out / "config.json"
    if src is not None:
        dest.write_bytes(Path(src).read_bytes())
    else:
        save_config(params, dest)
    return dest


def _samples(traj: Trajectory) -> dict:
    return {"samples": traj.values.tolist()}


def save_law(law: FeedbackLaw, xhat: Trajectory, out: Path) -> Path:
    doc = {
        "T": law.grid.T,
        "steps": law.grid.steps,
        "n": law.P.shape[0],
        "m": law.Theta2.shape[0],
        "regularity_margin": law.regularity_margin,
        "P": _samples(law.P),
        "phi": _samples(law.phi),
        "Theta1": _samples(law.Theta1),
        "Theta2": _samples(law.Theta2),
        "xhat": _samples(xhat),
    }
    return write_json(out / "law.json", doc)


def load_law(law_dir: Path) -> tuple[FeedbackLaw, Trajectory, str]:
    path = Path(law_dir) / "law.json"
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    grid = TimeGrid(float(doc["T"]), int(doc["steps"]))
    law = FeedbackLaw(
        grid=grid,
        P=Trajectory(grid, np.asarray(doc["P"]["samples"])),
        phi=Trajectory(grid, np.asarray(doc["phi"]["samples"])),
        Theta1=Trajectory(grid, np.asarray(doc["Theta1"]["samples"])),
        Theta2=Trajectory(grid, np.asarray(doc["Theta2"]["samples"])),
        regularity_margin=float(doc["regularity_margin"]),
    )
    xhat = Trajectory(grid, np.asarray(doc["xhat"]["samples"]))
    return law, xhat, sha256_of(path)


def _verdict_doc(v) -> dict:
    return {"status": v.status, "criterion": v.criterion,
            "witness": {k: (val if isinstance(val, str) else float(val))
                        for k, val in v.witness.items()}}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    params = load_config(args.config)
    report = validate(params)
    if report:
        for line in report:
            print(f"invalid: {line}", file=sys.stderr)
        return 1
    print("config admissible")
    return 0


def cmd_convexity(args) -> int:
    params = load_config(args.config)
    dq = np.asarray(json.loads(Path(args.dq).read_text())) if args.dq else None
    dg = np.asarray(json.loads(Path(args.dg).read_text())) if args.dg else None
    if dq is None and dg is None:
        verdicts = report_all(params)
    else:
        coupled = (np.max(np.abs(params.node_table("F"))) > 0
                   or np.max(np.abs(params.node_table("Ftilde"))) > 0)
        if coupled:
            verdicts = {"coupled_indefinite": check_coupled_indefinite(params, dq)}
        else:
            verdicts = {"decoupled_indefinite": check_decoupled_indefinite(params, dq, dg)}
    doc = {k: _verdict_doc(v) for k, v in verdicts.items()}
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def _solve_into(params: ModelParams, out: Path, config_src: Path | None,
                command: str, write_manifest: bool = True) -> tuple:
    t0 = time.time()
    out.mkdir(parents=True, exist_ok=True)
    cfg = _stash_config(config_src, params, out)
    sol, law = solve_cc(params)
    artifacts = [save_law(law, sol.xhat, out)]
    n, m = params.n, params.m
    header = (["t"] + [f"xhat_{i+1}" for i in range(n)]
              + [f"y1hat_{i+1}" for i in range(n)] + [f"y2hat_{i+1}" for i in range(n)]
              + [f"beta1hat_{i+1}" for i in range(n)] + [f"phi_{i+1}" for i in range(n)]
              + [f"Theta1_{i+1}{j+1}" for i in range(m) for j in range(n)]
              + [f"Theta2_{i+1}" for i in range(m)])
    grid = law.grid
    rows = []
    for k, t in enumerate(grid.nodes):
        row = [t, *sol.xhat.values[k], *sol.y1hat.values[k], *sol.y2hat.values[k],
               *sol.beta1hat.values[k], *sol.phi.values[k],
               *law.Theta1.values[k].ravel(), *law.Theta2.values[k]]
        rows.append(row)
    artifacts.append(write_csv(out / "solution.csv", header, rows))
    artifacts.append(write_json(out / "diagnostics.json", _json_safe(sol.diagnostics)))
    if write_manifest:
        _write_manifest(out, command, cfg, None, grid, artifacts, t0)
    return sol, law, cfg, artifacts


def _json_safe(doc):
    if isinstance(doc, dict):
        return {k: _json_safe(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_json_safe(v) for v in doc]
    if isinstance(doc, (np.floating, np.integer)):
        return doc.item()
    if isinstance(doc, np.bool_):
        return bool(doc)
    return doc


def cmd_solve(args) -> int:
    params = load_config(args.config)
    _solve_into(params, Path(args.out), Path(args.config), "solve")
    print(f"law written to {args.out}")
    return 0


def cmd_simulate(args) -> int:
    t0 = time.time()
    params = load_config(args.config)
    law, _, law_hash = load_law(Path(args.law))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _stash_config(Path(args.config), params, out)
    noise = NoiseBank(seed=args.seed, n_paths=args.paths, n_agents=args.N, grid=law.grid)
    res = simulate_decentralized(params, law, args.N, noise)
    artifacts = []
    thin = max(1, args.thin)
    nodes = law.grid.nodes
    n = params.n
    rows = []
    keep = [k for k in range(law.grid.steps + 1) if k % thin == 0 or k == law.grid.steps]
    if res.xs is not None:
        for p in range(res.n_paths):
            for agent in range(args.N):
                for k in keep:
                    rows.append([str(p), str(agent), nodes[k], *res.xs[p, agent, k]])
    else:
        for p in range(res.n_paths):
            for k in keep:
                rows.append([str(p), "avg", nodes[k], *res.xavg[p, k]])
    header = ["path", "agent", "t"] + [f"x_{i+1}" for i in range(n)]
    artifacts.append(write_csv(out / "trajectories.csv", header, rows))
    keep_agents = min(args.N, 8)
    cost_rows = [[str(p), res.J_soc[p], *res.J_i[p, :keep_agents]] for p in range(res.n_paths)]
    cost_header = ["path", "J_soc"] + [f"J_{i+1}" for i in range(keep_agents)]
    artifacts.append(write_csv(out / "costs.csv", cost_header, cost_rows))
    _write_manifest(out, "simulate", cfg, args.seed, law.grid, artifacts, t0,
                    extra={"N": args.N, "paths": args.paths, "dt": law.grid.dt,
                           "law_sha256": law_hash, "thin": thin})
    print(f"simulation written to {out}")
    return 0


def cmd_converge(args) -> int:
    t0 = time.time()
    params = load_config(args.config)
    law, xhat, law_hash = load_law(Path(args.law))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _stash_config(Path(args.config), params, out)
    N_list = [int(s) for s in args.N_list.split(",") if s]
    table = convergence_study(params, law, xhat, N_list, args.reps, args.seed)
    artifacts = [write_csv(out / "convergence.csv",
                           ["N", "replications", "estimate", "se"],
                           [[str(N), str(reps), est, se] for N, reps, est, se in table.rows])]
    artifacts.append(write_json(out / "summary.json",
                                {"slope": table.slope, "intercept": table.intercept}))
    _write_manifest(out, "converge", cfg, args.seed, law.grid, artifacts, t0,
                    extra={"law_sha256": law_hash, "replications": args.reps})
    print(f"slope {table.slope:.4f} written to {out}")
    return 0


def cmd_gap(args) -> int:
    t0 = time.time()
    params = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _stash_config(Path(args.config), params, out)
    N_list = [int(s) for s in args.N_list.split(",") if s]
    table = gap_study(params, N_list, args.paths, args.seed)
    artifacts = [write_csv(out / "gap.csv",
                           ["N", "J_dec_per_capita", "J_oracle_per_capita", "gap_per_capita", "se"],
                           [[str(N), a, b, g, se] for N, a, b, g, se in table.rows])]
    verdicts = {
        "oracle_dominates": all(g >= -2 * se for _, _, _, g, se in table.rows),
        "warnings": table.warnings,
    }
    artifacts.append(write_json(out / "summary.json", verdicts))
    _write_manifest(out, "gap", cfg, args.seed, params.grid(), artifacts, t0)
    print(f"gap table written to {out}")
    return 0


def cmd_repro(args) -> int:
    t0 = time.time()
    params = repro_instance(steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sol, law, cfg, artifacts = _solve_into(params, out, None, "repro-sec7",
                                           write_manifest=False)

    noise = NoiseBank(seed=args.seed, n_paths=args.paths, n_agents=args.N, grid=law.grid)
    res = simulate_decentralized(params, law, args.N, noise, store=False)
    xavg = res.xavg.mean(axis=0)
    rows = [[t, *sol.xhat.values[k], *xavg[k]] for k, t in enumerate(law.grid.nodes)]
    artifacts.append(write_csv(out / "trajectories.csv",
                               ["t", "xhat_1", "xhat_2", "xavg_1", "xavg_2"], rows))

    N_list = [int(s) for s in args.n_list.split(",") if s]
    table = convergence_study(params, law, sol.xhat, N_list, args.reps, args.seed)
    artifacts.append(write_csv(out / "convergence.csv",
                               ["N", "replications", "estimate", "se"],
                               [[str(N), str(reps), est, se] for N, reps, est, se in table.rows]))

    lam = lambda_boundedness(params, law, [10, 100, 1000])
    summary = {
        "sup_norm_distance": float(np.max(np.abs(res.xavg.mean(axis=0) - sol.xhat.values))),
        "sup_sq_distance_mean": float(np.mean(np.max(
            np.sum((res.xavg - sol.xhat.values) ** 2, axis=2), axis=1))),
        "convergence_slope": table.slope,
        "convexity": {k: _verdict_doc(v) for k, v in report_all(params).items()},
        "lyapunov": {"dominated": lam.dominated, "uniform": lam.uniform,
                     "spread_lam1": lam.max_spread1, "spread_lam2": lam.max_spread2},
        "diagnostics": _json_safe(sol.diagnostics),
    }
    artifacts.append(write_json(out / "summary.json", summary))
    _write_manifest(out, "repro-sec7", cfg, args.seed, law.grid, artifacts, t0,
                    extra={"N": args.N, "paths": args.paths})
    print(f"reproduction written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mflqg", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config against the model assumptions")
    p.add_argument("config")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("convexity", help="run the convexity certificates")
    p.add_argument("config")
    p.add_argument("--dq", default=None, help="JSON file with the dQ shift matrix")
    p.add_argument("--dg", default=None, help="JSON file with the dG shift matrix")
    p.set_defaults(fn=cmd_convexity)

    p = sub.add_parser("solve", help="solve the consistency condition and store the law")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("simulate", help="Monte Carlo of the N-agent system under a stored law")
    p.add_argument("config")
    p.add_argument("--law", required=True)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--paths", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thin", type=int, default=1)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("converge", help="mean-field convergence study")
    p.add_argument("config")
    p.add_argument("--law", required=True)
    p.add_argument("--N-list", dest="N_list", required=True)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_converge)

    p = sub.add_parser("gap", help="per-capita optimality gap against the oracle")
    p.add_argument("config")
    p.add_argument("--N-list", dest="N_list", required=True)
    p.add_argument("--paths", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gap)

    p = sub.add_parser("repro-sec7", help="bundled reference scenario: solve, simulate, converge")
    p.add_argument("--out", required=True)
    p.add_argument("--N", type=int, default=1000)
    p.add_argument("--paths", type=int, default=1)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--n-list", dest="n_list", default="50,100,200,400,800")
    p.add_argument("--steps", type=int, default=1000)
    p.set_defaults(fn=cmd_repro)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return 1
    except MFLQGError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
