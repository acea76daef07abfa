"""Command-line experiment runner.

    mfg-decode <stationary|forward|linearize|probe|reconstruct|verify> --config PATH
               [--out DIR] [--seed N] [--jobs N]

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 acceptance
failure. Every file written carries the config digest and the seed, and no
file carries a timestamp, so equal (config, seed) pairs give equal bytes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .acceptance import run_battery
from .config import ExperimentConfig, load_config, space_field
from .errors import ConfigError, MFGError
from .forward import measure, solve_mfg, stationary_residual
from .grid import Grid, divergence
from .inverse import GroundTruth, LinearResponse, reconstruct, simulate_measurements
from .linearize import LinearizedOperator, frechet_report, solve_first_order
from .probes import CGOParams, probe_sweep

log = logging.getLogger("mfg_decode")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_ACCEPTANCE = 0, 2, 3, 4


class Run:
    """Output directory plus the provenance stamped on every artifact."""

    def __init__(self, cfg: ExperimentConfig, out: Path, seed: int, jobs: int):
        self.cfg, self.out, self.seed, self.jobs = cfg, out, seed, jobs
        out.mkdir(parents=True, exist_ok=True)

    @property
    def stamp(self) -> dict:
        return {"config_digest": self.cfg.digest, "seed": self.seed}

    @property
    def comment(self) -> str:
        return f"config_digest={self.cfg.digest} seed={self.seed}"

    def container(self, name: str, grid: Grid, values, kind: str, **meta):
        return io.write_container(self.out / f"{name}.mfgc", grid, values, kind, **self.stamp, **meta)

    def fields(self, name: str, grid: Grid, columns: dict[str, np.ndarray]):
        return io.write_fields_csv(self.out / f"{name}.csv", grid, columns, self.comment)

    def rows(self, name: str, header, rows):
        return io.write_rows_csv(self.out / f"{name}.csv", header, rows, self.comment)

    def json(self, name: str, payload: dict):
        path = self.out / f"{name}.json"
        path.write_text(json.dumps({**self.stamp, **payload}, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# -- subcommands --------------------------------------------------------------------


def cmd_stationary(run: Run) -> int:
    cfg = run.cfg
    grid = cfg.grid()
    metric = cfg.metric(grid)
    state = cfg.stationary(grid, metric)
    q = state.drift(grid, metric)
    ru, rm = stationary_residual(grid, state, metric)
    run.container("u0", grid, state.u0, "u0")
    run.container("m0", grid, state.m0, "m0")
    run.fields("stationary", grid, {"u0": state.u0, "m0": state.m0, "q": q})
    run.rows("stationary_residual", ["equation", "max_abs", "l2"], [
        ["hjb", float(np.abs(ru).max()), float(np.sqrt(np.sum(grid.weights * ru**2)))],
        ["kfp", float(np.abs(rm).max()), float(np.sqrt(np.sum(grid.weights * rm**2)))],
    ])
    log.info("stationary state written to %s", run.out)
    return EXIT_OK


def cmd_forward(run: Run) -> int:
    problem = run.cfg.problem()
    grid = problem.grid
    settings = run.cfg.settings()
    # an empty battery still yields one run: the stationary extension
    batches = [(l, (p,)) for l, p in enumerate(problem.perturbations)] or [(-1, ())]
    summary = []
    for l, perts in batches:
        sol = solve_mfg(problem.with_perturbations(perts), settings)
        tag = "stationary" if l < 0 else f"direction{l}"
        eps = perts[0].eps if perts else 0.0
        data = measure(grid, sol.u, sol.m, eps, direction=l)
        run.container(f"u_{tag}", grid, sol.u, "u", direction=l, eps=eps)
        run.container(f"m_{tag}", grid, sol.m, "m", direction=l, eps=eps)
        io.write_cauchy_csv(run.out / f"cauchy_{tag}.csv", grid, data, run.comment)
        summary.append([l, eps, sol.iterations, float(sol.increment)])
    run.rows("forward", ["direction", "eps", "iterations", "final_increment"], summary)
    return EXIT_OK


def cmd_linearize(run: Run) -> int:
    cfg = run.cfg
    problem = cfg.problem()
    grid = problem.grid
    block = dict(cfg.raw.get("linearize", {}))
    order = int(block.get("order", 2))
    ladder = tuple(float(e) for e in block.get("eps_ladder", (1e-2, 5e-3, 2.5e-3)))
    if not 1 <= order <= 4:
        raise ConfigError("linearize.order: must be between 1 and 4")
    op = LinearizedOperator(grid, problem.state, problem.metric)
    rem_rows, slope_rows = [], []
    for l, spec in enumerate(problem.perturbations):
        first = solve_first_order(grid, problem.state, problem.metric, spec.g, spec.h, op=op)
        run.container(f"u1_direction{l}", grid, first.u, "u1", direction=l)
        run.container(f"m1_direction{l}", grid, first.m, "m1", direction=l)
        rep = frechet_report(problem, spec.scaled(1.0), ladder, tuple(range(1, order + 1)), cfg.settings())
        for n, rems in rep.remainders.items():
            rem_rows += [[l, n, e, r] for e, r in zip(rep.eps, rems)]
            slope_rows.append([l, n, rep.slopes[n], n + 1.0])
    run.rows("frechet_remainders", ["direction", "order", "eps", "remainder"], rem_rows)
    run.rows("frechet_slopes", ["direction", "order", "slope", "expected"], slope_rows)
    return EXIT_OK


def _probe_params(cfg: ExperimentConfig, grid: Grid) -> list[CGOParams]:
    b = cfg.probe()
    zeta = b.get("zeta", [1.0] + [0.0] * (grid.dim - 1))
    zetas = zeta if isinstance(zeta[0], list) else [zeta]
    xi = b.get("xi")
    tau = float(b.get("tau", 0.0))
    try:
        return [CGOParams(4.0, tuple(z), None if xi is None else tuple(xi), tau) for z in zetas]
    except ValueError as exc:
        raise ConfigError(f"probe: {exc}") from exc


def cmd_probe(run: Run) -> int:
    cfg = run.cfg
    grid = cfg.grid()
    metric = cfg.metric(grid)
    state = cfg.stationary(grid, metric)
    b = cfg.probe()
    rhos = [float(r) for r in b.get("rhos", (4, 8, 16))]
    drift = b.get("drift", "stationary")
    if drift not in ("stationary", "zero"):
        raise ConfigError("probe.drift: expected 'stationary' or 'zero'")
    q = state.drift(grid, metric)
    phi = q if drift == "stationary" else None
    q_pot = None if phi is None else -divergence(grid, phi)
    if "dq" in b:
        exprs = b["dq"] if isinstance(b["dq"], list) else [b["dq"]]
        if len(exprs) != grid.dim:
            raise ConfigError(f"probe.dq: needs {grid.dim} components")
        dq = np.stack([space_field(grid, e, f"probe.dq[{k}]") for k, e in enumerate(exprs)], -1)
    else:
        dq = q
    rows = []
    for base in _probe_params(cfg, grid):
        for r in probe_sweep(grid, base, rhos, phi, q_pot, dq):
            rows.append([r.rho, *r.zeta, *(r.xi or (0.0,) * grid.dim), r.tau, r.remainder_norm,
                         r.pairing.real, r.pairing.imag])
    axes = "xy"[: grid.dim]
    header = ["rho", *[f"zeta_{a}" for a in axes], *[f"xi_{a}" for a in axes], "tau", "remainder_norm",
              "pairing_re", "pairing_im"]
    run.rows("probe_sweep", header, rows)
    return EXIT_OK


def cmd_reconstruct(run: Run) -> int:
    cfg = run.cfg
    problem = cfg.problem()
    grid = problem.grid
    rc, extra = cfg.reconstruction()
    rc.check_lattice(grid)
    eps = float(extra.get("eps", 0.02))
    multiples = tuple(int(j) for j in extra.get("multiples", (-2, -1, 1, 2)))
    meas = simulate_measurements(problem, problem.perturbations, eps, multiples, cfg.settings(), run.jobs)
    if rc.noise_level > 0:
        meas = meas.with_noise(rc.noise_level, run.seed, orders=range(1, rc.max_order + 1))
    truth = GroundTruth(
        problem.state.drift(grid, problem.metric), problem.state.u0, problem.metric.kappa,
        problem.state.m0, problem.cost.coefficients,
    )
    # probe mode pairs against the first-order response of the simulated drift
    response = LinearResponse(grid, truth.q) if rc.mode == "probe" else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = reconstruct(meas, problem.metric.g, rc, truth if extra.get("truth", True) else None, response)
    fields = {"q": rep.q, "u0": rep.u0, "kappa": rep.kappa, "m0": rep.m0}
    fields.update({f"F{k}": v for k, v in rep.F.items()})
    for name, v in fields.items():
        run.container(name, grid, v, name)
    run.container("mask", grid, rep.mask.astype(float), "mask")
    run.fields("reconstruction", grid, fields)
    stages = [k for k in ("q", "u0", "kappa", "m0") if getattr(rep, k) is not None] + [f"F{k}" for k in rep.F]
    run.rows("errors", ["stage", "residual", "relative_l2_error"],
             [[s, float(rep.residuals.get(s, np.nan)), float(rep.errors.get(s, np.nan))] for s in stages])
    run.json("report", {**rep.to_dict(), "mode": rc.mode, "eps": eps, "multiples": list(multiples),
                        "warnings": sorted({str(w.message) for w in caught})})
    return EXIT_OK


def cmd_verify(run: Run, only=None) -> int:
    results = run_battery(run.cfg, only, run.jobs, run.seed, report=lambda r: print(r.line(), flush=True))
    passed = all(r.ok for r in results)
    run.json("acceptance", {"passed": passed, "criteria": [r.to_dict() for r in results]})
    print(f"{sum(r.ok for r in results)}/{len(results)} criteria passed")
    return EXIT_OK if passed else EXIT_ACCEPTANCE


COMMANDS = {
    "stationary": cmd_stationary,
    "forward": cmd_forward,
    "linearize": cmd_linearize,
    "probe": cmd_probe,
    "reconstruct": cmd_reconstruct,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfg-decode", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="experiment configuration (JSON)")
    ap.add_argument("--out", default=None, help="output directory (default: run.out or ./out)")
    ap.add_argument("--seed", type=int, default=None, help="noise seed (default: run.seed or 0)")
    ap.add_argument("--jobs", type=int, default=None, help="concurrent independent solves")
    ap.add_argument("--only", type=int, nargs="+", default=None, help="verify: criterion numbers to run")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, jobs=args.jobs)
        seed = int(cfg.run.get("seed", 0))
        jobs = int(cfg.run.get("jobs", 1))
        if seed < 0 or jobs < 1:
            raise ConfigError("run: seed must be nonnegative and jobs positive")
        out = Path(args.out or cfg.run.get("out", "out"))
        run = Run(cfg, out, seed, jobs)
        if args.command == "verify":
            return cmd_verify(run, args.only)
        return COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MFGError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        stage = getattr(exc, "stage", None)
        where = f" [{stage}]" if stage else ""
        print(f"solver failure{where}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
