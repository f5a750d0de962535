"""Command-line front end: experiment execution and CSV/grid export.

Subcommands, each reading one INI-style config via -c/--config:

    run           identify a coefficient, write history.csv, summary.csv,
                  timing.csv and q_final.grid to the output directory
    check         fast self-verification battery on a coarse grid
    sweep         run a mesh-size x noise-level matrix into one CSV
    denoise-test  round-trip an image through the configured denoiser

Exit codes: 0 success, 1 config error, 2 solver failure, 3 failed check.
The COEFFID_BRIDGE_CMD environment variable overrides any configured
external-denoiser launch command.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import assembly, problems
from .driver import AdmmConfig, AdmmState, admm_init, admm_iterate
from .linsolve import LinearSolverConfig, schur_operator
from .mesh import Mesh, build_uniform_mesh
from .psolver import (BridgeEndpoint, BridgeError, DenoiserSpec, discrete_tv,
                      prox_tv, resolve_bridge_command, solve_p_subproblem,
                      to_image)
from .qsolver import ActiveSets, BoxBounds, NewtonConfig, newton_step

HISTORY_COLUMNS = ["iter", "rel_error", "grad_misfit", "newton_steps",
                   "pcg_state", "pcg_H", "wall_ms"]
SUMMARY_COLUMNS = ["delta", "h", "total_newton", "total_pcg_state",
                   "total_pcg_H", "cpu_s", "rel_error_50"]
TIMING_ROWS = ["h_system", "denoiser", "n_assembly", "a_assembly",
               "state_system", "other"]


class ConfigError(Exception):
    pass


# ------------------------------------------------------------ config parsing


def _load_ini(path: str) -> configparser.ConfigParser:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    cp = configparser.ConfigParser(interpolation=None,
                                   inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(p.read_text(), source=path)
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return cp


def _get(cp, section: str, key: str, default, conv):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key).strip()
    if raw == "":
        return default
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _as_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _as_list(conv):
    def parse(raw: str):
        return [conv(tok.strip()) for tok in raw.split(",") if tok.strip()]
    return parse


@dataclass
class RunConfig:
    example: str
    n: int | None
    delta: float
    seed: int
    f_const: float
    obs_file: str | None
    save_obs: bool
    admm: AdmmConfig
    bridge_command: str | None
    fallback_to_prox: bool
    outdir: Path


def load_run_config(path: str) -> RunConfig:
    """Parse and validate a config file; raises ConfigError."""
    return build_run_config(_load_ini(path))


def build_run_config(cp: configparser.ConfigParser,
                     require_n: bool = True) -> RunConfig:
    example = _get(cp, "problem", "example", "ex1", str)
    n = _get(cp, "problem", "n", None, int)
    obs_file = _get(cp, "problem", "obs_file", None, str)
    if require_n and n is None and obs_file is None:
        raise ConfigError("[problem] n is required unless obs_file is set")
    if n is not None and n < 2:
        raise ConfigError("[problem] n must be at least 2")
    delta = _get(cp, "problem", "delta", 0.0, float)
    if delta < 0.0:
        raise ConfigError("[problem] delta must be nonnegative")

    kind = _get(cp, "denoiser", "kind", "rof_prox", str)
    fallback = _get(cp, "denoiser", "fallback_to_prox", False, _as_bool)
    try:
        spec = DenoiserSpec(
            kind=kind,
            theta=_get(cp, "denoiser", "theta", None, float),
            sigma=_get(cp, "denoiser", "sigma", None, float),
            rof_tol=_get(cp, "denoiser", "rof_tol", 1e-6, float),
            rof_max_iters=_get(cp, "denoiser", "rof_max_iters", 2000, int),
            fallback_to_prox=fallback)
        bounds = BoxBounds(lower=_get(cp, "admm", "lower", 0.1, float),
                           upper=_get(cp, "admm", "upper", 5.0, float))
        newton = NewtonConfig(
            tol=_get(cp, "newton", "tol", 1e-3, float),
            max_inner=_get(cp, "newton", "max_inner", 10, int),
            h_tol=_get(cp, "newton", "h_tol", 1e-5, float),
            h_max_iters=_get(cp, "newton", "h_max_iters", 2000, int))
        admm = AdmmConfig(
            beta=_get(cp, "admm", "beta", 0.1, float),
            denoiser=spec,
            outer_iters=_get(cp, "admm", "outer_iters", 50, int),
            newton=newton,
            lin_state=LinearSolverConfig(
                tol=_get(cp, "state", "tol", 1e-10, float),
                max_iters=_get(cp, "state", "max_iters", 2000, int)),
            bounds=bounds,
            f_const=_get(cp, "problem", "f_const", 10.0, float),
            primal_tol=_get(cp, "admm", "primal_tol", None, float))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        example=example, n=n, delta=delta,
        seed=_get(cp, "problem", "seed", 0, int),
        f_const=admm.f_const, obs_file=obs_file,
        save_obs=_get(cp, "problem", "save_obs", False, _as_bool),
        admm=admm,
        bridge_command=_get(cp, "denoiser", "bridge_command", None, str),
        fallback_to_prox=fallback,
        outdir=Path(_get(cp, "output", "dir", "out", str)))


# ------------------------------------------------------------- data loading


@dataclass
class LoadedProblem:
    mesh: Mesh
    obs: np.ndarray
    truth: np.ndarray | None
    u_clean: np.ndarray | None
    delta: float
    seed: int
    spec: problems.ProblemSpec | None


def load_problem(rc: RunConfig) -> LoadedProblem:
    if rc.obs_file is not None:
        try:
            n, delta, seed, obs = problems.read_observation(rc.obs_file)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read {rc.obs_file}: {exc}") from exc
        mesh = build_uniform_mesh(n)
        truth = None
        fields = problems.fields_path_for(rc.obs_file)
        if Path(fields).is_file():
            fn, truth, _u = problems.read_fields(fields)
            if fn != n:
                raise ConfigError(
                    f"{fields} is for n={fn}, observation has n={n}")
        return LoadedProblem(mesh=mesh, obs=obs, truth=truth, u_clean=None,
                             delta=delta, seed=seed, spec=None)
    spec = problems.ProblemSpec(example=rc.example, n=rc.n, delta=rc.delta,
                                seed=rc.seed, f_const=rc.f_const)
    try:
        mesh, truth = problems.build_problem(spec)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot build problem: {exc}") from exc
    obs, u_clean = problems.generate_observation(mesh, truth, spec.f_const,
                                                 spec.delta, spec.seed)
    return LoadedProblem(mesh=mesh, obs=obs, truth=truth, u_clean=u_clean,
                         delta=rc.delta, seed=rc.seed, spec=spec)


def open_endpoint(rc: RunConfig) -> BridgeEndpoint | None:
    if rc.admm.denoiser.kind != "external":
        return None
    command = resolve_bridge_command(rc.bridge_command)
    if command is None:
        raise ConfigError(
            "[denoiser] kind = external needs bridge_command or the "
            "COEFFID_BRIDGE_CMD environment variable")
    return BridgeEndpoint.from_command_line(command)


# ------------------------------------------------------------- file writers


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def summary_row(state: AdmmState, delta: float, cpu_s: float) -> list:
    hist = state.history
    rel = hist[-1].metrics.rel_error if hist else None
    return [delta, state.mesh.h,
            sum(r.newton_steps for r in hist),
            sum(r.pcg_state for r in hist),
            sum(r.pcg_h for r in hist),
            cpu_s, rel]


def write_outputs(outdir: Path, state: AdmmState, delta: float,
                  cpu_s: float) -> None:
    rows = [[r.iteration, r.metrics.rel_error, r.metrics.grad_misfit,
             r.newton_steps, r.pcg_state, r.pcg_h, round(r.wall_ms, 3)]
            for r in state.history]
    _write_csv(outdir / "history.csv", HISTORY_COLUMNS, rows)
    _write_csv(outdir / "summary.csv", SUMMARY_COLUMNS,
               [summary_row(state, delta, cpu_s)])
    tracked = {k: state.timings.get(k, 0.0) for k in TIMING_ROWS[:-1]}
    other = max(cpu_s - sum(tracked.values()), 0.0)
    _write_csv(outdir / "timing.csv", ["subtask", "seconds"],
               [[k, round(v, 6)] for k, v in tracked.items()]
               + [["other", round(other, 6)]])
    problems.write_grid(outdir / "q_final.grid", state.mesh.n, state.q)


# -------------------------------------------------------------- subcommands


def cmd_run(config_path: str) -> int:
    try:
        rc = build_run_config(_load_ini(config_path))
        prob = load_problem(rc)
        endpoint = open_endpoint(rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    rc.outdir.mkdir(parents=True, exist_ok=True)
    if rc.save_obs and prob.spec is not None:
        obs_path = rc.outdir / "observation.obs"
        problems.write_observation(obs_path, prob.spec, prob.obs)
        problems.write_fields(problems.fields_path_for(obs_path), prob.mesh,
                              prob.truth, prob.u_clean)
    t0 = time.perf_counter()
    failure = None
    state = None
    try:
        state = admm_init(prob.mesh, prob.obs, rc.admm, endpoint=endpoint,
                          truth=prob.truth)
        for _ in range(rc.admm.outer_iters):
            admm_iterate(state)
            if (rc.admm.primal_tol is not None
                    and state.primal_residual <= rc.admm.primal_tol):
                break
    except RuntimeError as exc:
        failure = exc
    finally:
        if endpoint is not None:
            endpoint.close()
    cpu_s = time.perf_counter() - t0
    if state is not None:
        write_outputs(rc.outdir, state, prob.delta, cpu_s)
    if failure is not None:
        (rc.outdir / "FAILED").write_text(f"{failure}\n")
        print(f"solver failure: {failure}", file=sys.stderr)
        cause = failure.__cause__
        if cause is not None:
            print(f"  caused by: {cause}", file=sys.stderr)
        return 2
    last = state.history[-1].metrics if state.history else None
    rel = "n/a" if last is None or last.rel_error is None \
        else f"{last.rel_error:.4f}"
    print(f"{state.k} iterations in {cpu_s:.1f}s, rel_error {rel}, "
          f"outputs in {rc.outdir}")
    return 0


def cmd_sweep(config_path: str) -> int:
    try:
        cp = _load_ini(config_path)
        rc = build_run_config(cp, require_n=False)
        if rc.obs_file is not None:
            raise ConfigError("sweep generates its data; obs_file not allowed")
        ns = _get(cp, "sweep", "n", None, _as_list(int))
        deltas = _get(cp, "sweep", "delta", None, _as_list(float))
        if not ns or not deltas:
            raise ConfigError("[sweep] needs n and delta lists")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    rc.outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    failures = 0
    for n in ns:
        for delta in deltas:
            cell = replace(rc, n=n, delta=delta)
            try:
                prob = load_problem(cell)
                endpoint = open_endpoint(cell)
            except ConfigError as exc:
                print(f"config error: {exc}", file=sys.stderr)
                return 1
            t0 = time.perf_counter()
            try:
                state = admm_init(prob.mesh, prob.obs, cell.admm,
                                  endpoint=endpoint, truth=prob.truth)
                for _ in range(cell.admm.outer_iters):
                    admm_iterate(state)
                    if (cell.admm.primal_tol is not None
                            and state.primal_residual
                            <= cell.admm.primal_tol):
                        break
            except RuntimeError as exc:
                failures += 1
                print(f"cell n={n} delta={delta} failed: {exc}",
                      file=sys.stderr)
                rows.append([delta, 1.0 / n, None, None, None, None,
                             None, "FAILED"])
                continue
            finally:
                if endpoint is not None:
                    endpoint.close()
            cpu_s = time.perf_counter() - t0
            rows.append(summary_row(state, delta, cpu_s) + ["ok"])
            print(f"cell n={n} delta={delta}: done in {cpu_s:.1f}s")
    _write_csv(rc.outdir / "sweep.csv", SUMMARY_COLUMNS + ["status"], rows)
    print(f"wrote {rc.outdir / 'sweep.csv'} ({len(rows)} cells, "
          f"{failures} failed)")
    return 2 if failures == len(rows) else 0


# --------------------------------------------------------- the check battery


def _random_active_sets(rng, size: int) -> ActiveSets:
    plus = rng.random(size) < 0.15
    minus = ~plus & (rng.random(size) < 0.15)
    return ActiveSets(plus=plus, minus=minus)


def run_battery(corrupt_gradient: bool = False) -> list[tuple[str, float, float]]:
    """Four oracle checks on n=4.  Returns (name, measured, tolerance)
    triples; a check passes when measured <= tolerance."""
    m = build_uniform_mesh(4)
    rng = np.random.default_rng(7)
    nn = m.num_nodes
    truth = problems.nodal_coefficient(m, "ex2")
    obs, _ = problems.generate_observation(m, truth, 10.0, 0.0, 0)
    q = rng.uniform(0.5, 3.0, nn)
    scfg = LinearSolverConfig(tol=1e-13, max_iters=10000)

    def energy(qv: np.ndarray) -> float:
        res = assembly.forward_solve(m, qv, 10.0, cfg=scfg)
        return assembly.misfit_energy(
            m, qv, assembly.state_gradients(m, res.x), obs)

    # 1. misfit gradient against central differences
    res = assembly.forward_solve(m, q, 10.0, cfg=scfg)
    grad = assembly.misfit_gradient(
        m, assembly.state_gradients(m, res.x), obs)
    if corrupt_gradient:
        grad = grad.copy()
        grad[3] += 1e-3
    worst = 0.0
    eps = 1e-6
    for _ in range(5):
        v = rng.standard_normal(nn)
        v /= np.linalg.norm(v)
        fd = (energy(q + eps * v) - energy(q - eps * v)) / (2.0 * eps)
        worst = max(worst, abs(fd - float(grad @ v)) / max(1.0, abs(fd)))
    checks = [("gradient-fd", worst, 1e-6)]

    # 2. reduced-operator action against a dense composition
    A = assembly.assemble_stiffness(m, q)
    N = assembly.assemble_coupling(m, assembly.state_gradients(m, res.x))
    W = assembly.lumped_mass(m)
    beta = 0.7
    sets = _random_active_sets(rng, nn)
    Nd = N.toarray()
    mask = np.where(sets.inactive, 1.0 / W, 0.0)
    H_dense = A.toarray() + (Nd.T * mask) @ Nd / beta
    H_op = schur_operator(A, N, W, sets.inactive, beta)
    worst = 0.0
    for _ in range(5):
        v = rng.standard_normal(m.num_interior)
        ref = H_dense @ v
        worst = max(worst, float(np.max(np.abs(H_op(v) - ref)))
                    / max(1.0, float(np.max(np.abs(ref)))))
    checks.append(("hessian-action", worst, 1e-12))

    # 3. factorized step against the dense saddle-point system
    idx = np.flatnonzero(sets.active)
    d2 = rng.standard_normal(nn)
    d3 = rng.standard_normal(idx.size)
    step = newton_step(A, N, W, beta, sets, d2, d3,
                       h_cfg=LinearSolverConfig(tol=1e-13, max_iters=5000))
    ni = m.num_interior
    na = idx.size
    PA = np.zeros((na, nn))
    PA[np.arange(na), idx] = 1.0
    F = np.zeros((ni + nn + na, ni + nn + na))
    F[:ni, :ni] = A.toarray()
    F[:ni, ni:ni + nn] = Nd.T
    F[ni:ni + nn, :ni] = -Nd
    F[ni:ni + nn, ni:ni + nn] = beta * np.diag(W)
    F[ni:ni + nn, ni + nn:] = PA.T
    F[ni + nn:, ni:ni + nn] = PA
    x = np.concatenate([step.r, step.dq, step.eta_active])
    rhs = np.concatenate([np.zeros(ni), d2, d3])
    measured = float(np.max(np.abs(F @ x - rhs))
                     / max(1.0, np.max(np.abs(rhs))))
    checks.append(("factorization", measured, 1e-8))

    # 4. prox output beats nearby candidates on its own objective
    z = rng.standard_normal(nn)
    theta = 0.3
    x_star = prox_tv(z, theta, tol=1e-10, max_iters=100000)

    def objective(x: np.ndarray) -> float:
        return theta * discrete_tv(x) + 0.5 * float(np.sum((x - z) ** 2))

    best = objective(x_star)
    worst = 0.0
    candidates = [z, np.full(nn, z.mean())]
    candidates += [x_star + 0.01 * rng.standard_normal(nn) for _ in range(5)]
    for cand in candidates:
        worst = max(worst, best - objective(cand))
    checks.append(("prox-optimality", worst, 1e-8))
    return checks


def cmd_check(config_path: str, corrupt_gradient: bool = False) -> int:
    try:
        cp = _load_ini(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    corrupt = corrupt_gradient or _get(cp, "check", "corrupt_gradient",
                                       False, _as_bool)
    failed = 0
    for name, measured, tol in run_battery(corrupt):
        ok = measured <= tol
        failed += not ok
        print(f"{name:<16} {'PASS' if ok else 'FAIL'}   "
              f"measured {measured:.3e}   tol {tol:.1e}")
    return 3 if failed else 0


def cmd_denoise_test(config_path: str) -> int:
    try:
        rc = build_run_config(_load_ini(config_path))
        if rc.n is None:
            raise ConfigError("[problem] n is required for denoise-test")
        mesh = build_uniform_mesh(rc.n)
        truth = problems.nodal_coefficient(mesh, rc.example)
        endpoint = open_endpoint(rc)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    zeros = np.zeros_like(truth)
    try:
        out = solve_p_subproblem(truth, zeros, 1.0, rc.admm.denoiser,
                                 rc.admm.bounds, endpoint=endpoint)
    except (BridgeError, RuntimeError) as exc:
        print(f"denoiser failure: {exc}", file=sys.stderr)
        return 2
    finally:
        if endpoint is not None:
            endpoint.close()
    rc.outdir.mkdir(parents=True, exist_ok=True)
    problems.write_grid(rc.outdir / "denoise_input.grid", mesh.n, truth)
    problems.write_grid(rc.outdir / "denoise_output.grid", mesh.n, out)
    img = to_image(truth, rc.admm.bounds)
    print(f"denoiser {rc.admm.denoiser.kind} on {rc.example}, n={rc.n}")
    print(f"image range [{img.min():.2f}, {img.max():.2f}]")
    print(f"input  range [{truth.min():.4f}, {truth.max():.4f}]  "
          f"tv {discrete_tv(truth):.6f}")
    print(f"output range [{out.min():.4f}, {out.max():.4f}]  "
          f"tv {discrete_tv(out):.6f}")
    print(f"max abs change {np.max(np.abs(out - truth)):.6f}")
    print(f"wrote grids to {rc.outdir}")
    return 0


# -------------------------------------------------------------- entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="coeffid",
        description="identify a piecewise-constant diffusion coefficient "
                    "from gradient observations")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "check", "sweep", "denoise-test"):
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", required=True,
                       help="INI config file")
        if name == "check":
            p.add_argument("--corrupt-gradient", action="store_true",
                           help="negative control: perturb the gradient "
                                "so the first check must fail")
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "check":
        return cmd_check(args.config, args.corrupt_gradient)
    if args.command == "sweep":
        return cmd_sweep(args.config)
    return cmd_denoise_test(args.config)


if __name__ == "__main__":
    sys.exit(main())
