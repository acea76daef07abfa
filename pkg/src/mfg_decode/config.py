"""Experiment configuration: JSON ingestion, field expressions and problem assembly.

Fields are given as arithmetic expressions in the coordinates ``x, y`` and
the time ``t`` (e.g. ``"1 + 0.5*sin(2*pi*x)"``), or as plain numbers. The
expressions are parsed with ``ast`` and only a whitelist of numpy functions
is callable.
"""

from __future__ import annotations

import ast
import copy
import hashlib
import json
import operator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .forward import (
    MFGProblem,
    PerturbationSpec,
    RunningCost,
    SolverSettings,
    StationaryState,
    solve_stationary,
)
from .grid import Grid, MetricField, trace
from .inverse import ReconstructionConfig

_FUNCS = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "sinh", "cosh", "tanh", "abs", "arctan", "minimum", "maximum")
}
_CONSTS = {"pi": np.pi, "e": np.e}
_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNOPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}


def evaluate(expr, env: dict, path: str = "<expr>"):
    """Evaluate a whitelisted arithmetic expression over numpy arrays in ``env``."""
    if isinstance(expr, (int, float)):
        return float(expr)
    if not isinstance(expr, str):
        raise ConfigError(f"{path}: expected a number or an expression string")
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"{path}: cannot parse {expr!r}") from exc

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return node.value
        if isinstance(node, ast.Name):
            if node.id in env:
                return env[node.id]
            if node.id in _CONSTS:
                return _CONSTS[node.id]
            raise ConfigError(f"{path}: unknown name {node.id!r}")
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            return _UNOPS[type(node.op)](ev(node.operand))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS:
            if node.keywords:
                raise ConfigError(f"{path}: keyword arguments are not allowed")
            return _FUNCS[node.func.id](*[ev(a) for a in node.args])
        raise ConfigError(f"{path}: unsupported syntax in {expr!r}")

    # non-finite results are rejected by the field helpers, so numpy need not warn
    with np.errstate(all="ignore"):
        return ev(tree)


def _space_env(grid: Grid) -> dict:
    names = ("x", "y", "z")
    return {names[k]: grid.coords[..., k] for k in range(grid.dim)}


def space_field(grid: Grid, expr, path: str) -> np.ndarray:
    out = evaluate(expr, _space_env(grid), path)
    out = np.broadcast_to(np.asarray(out, dtype=float), grid.shape).copy()
    if not np.all(np.isfinite(out)):
        raise ConfigError(f"{path}: expression is not finite on the grid")
    return out


def spacetime_field(grid: Grid, expr, path: str) -> np.ndarray:
    env = {k: v[None] for k, v in _space_env(grid).items()}
    env["t"] = grid.times.reshape(-1, *([1] * grid.dim))
    out = evaluate(expr, env, path)
    out = np.broadcast_to(np.asarray(out, dtype=float), grid.st_shape).copy()
    if not np.all(np.isfinite(out)):
        raise ConfigError(f"{path}: expression is not finite on the grid")
    return out


def _get(block: dict, key: str, path: str, default=...):
    if not isinstance(block, dict):
        raise ConfigError(f"{path}: expected an object")
    if key not in block:
        if default is ...:
            raise ConfigError(f"{path}.{key}: missing required entry")
        return default
    return block[key]


def _number(value, path: str, kind=float, positive=False):
    try:
        out = kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: expected {kind.__name__}, got {value!r}") from exc
    if positive and not out > 0:
        raise ConfigError(f"{path}: must be positive")
    return out


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    raw: dict
    source: str = "<dict>"

    @property
    def digest(self) -> str:
        # worker count never changes results, so it stays out of the digest
        raw = dict(self.raw)
        if "run" in raw:
            raw["run"] = {k: v for k, v in raw["run"].items() if k != "jobs"}
        text = json.dumps(raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def problem_block(self) -> dict:
        return _get(self.raw, "problem", "config")

    @property
    def run(self) -> dict:
        return dict(self.raw.get("run", {}))

    def grid(self) -> Grid:
        b = _get(self.problem_block, "grid", "problem")
        path = "problem.grid"
        dim = _number(_get(b, "dim", path, 1), f"{path}.dim", int, True)
        if dim not in (1, 2):
            raise ConfigError(f"{path}.dim: only 1 and 2 are supported")
        n = _get(b, "n_cells", path)
        n_cells = tuple([n] * dim) if isinstance(n, int) else tuple(n)
        if len(n_cells) != dim:
            raise ConfigError(f"{path}.n_cells: needs {dim} entries")
        extent = _get(b, "extent", path, [[0.0, 1.0]] * dim)
        try:
            grid = Grid(
                tuple((float(a), float(c)) for a, c in extent),
                tuple(int(v) for v in n_cells),
                _number(_get(b, "T", path, 1.0), f"{path}.T", float, True),
                _number(_get(b, "n_time", path), f"{path}.n_time", int, True),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return grid

    def metric(self, grid: Grid) -> MetricField:
        b = _get(self.problem_block, "metric", "problem")
        path = "problem.metric"
        kappa = space_field(grid, _get(b, "kappa", path, 1.0), f"{path}.kappa")
        g = _get(b, "g", path, "identity")
        if g == "identity":
            G = np.broadcast_to(np.eye(grid.dim), (*grid.shape, grid.dim, grid.dim)).copy()
        else:
            if len(g) != grid.dim or any(len(row) != grid.dim for row in g):
                raise ConfigError(f"{path}.g: expected a {grid.dim}x{grid.dim} array of expressions")
            G = np.stack(
                [np.stack([space_field(grid, e, f"{path}.g[{i}][{j}]") for j, e in enumerate(row)], -1)
                 for i, row in enumerate(g)], -2,
            )
        try:
            return MetricField(grid, G, kappa)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def stationary(self, grid: Grid, metric: MetricField) -> StationaryState:
        b = _get(self.problem_block, "stationary", "problem")
        path = "problem.stationary"
        ub = trace(grid, space_field(grid, _get(b, "u_boundary", path), f"{path}.u_boundary"))
        mb = trace(grid, space_field(grid, _get(b, "m_boundary", path), f"{path}.m_boundary"))
        if mb.min() < 0:
            raise ConfigError(f"{path}.m_boundary: density must be nonnegative")
        return solve_stationary(grid, metric, (ub, mb))

    def cost(self, grid: Grid, m0: np.ndarray) -> RunningCost:
        b = _get(self.problem_block, "cost", "problem", {})
        coeffs = {}
        for k, expr in b.items():
            if not str(k).isdigit() or int(k) < 2:
                raise ConfigError(f"problem.cost.{k}: keys are integer orders >= 2")
            coeffs[int(k)] = space_field(grid, expr, f"problem.cost.{k}")
        return RunningCost(m0, coeffs)

    def perturbations(self, grid: Grid) -> list[PerturbationSpec]:
        items = _get(self.problem_block, "perturbations", "problem", [])
        if not isinstance(items, list):
            raise ConfigError("problem.perturbations: expected a list")
        # amplitudes default to the measurement step of the reconstruction block
        default_eps = self.raw.get("reconstruction", {}).get("eps", 1.0)
        out = []
        for i, p in enumerate(items):
            path = f"problem.perturbations[{i}]"
            g = spacetime_field(grid, _get(p, "g", path, 0.0), f"{path}.g")
            h = spacetime_field(grid, _get(p, "h", path, 0.0), f"{path}.h")
            eps = _number(_get(p, "eps", path, default_eps), f"{path}.eps")
            out.append(PerturbationSpec(g, h, eps, i))
        return out

    def settings(self) -> SolverSettings:
        b = self.problem_block.get("solver", {})
        try:
            return SolverSettings(**b)
        except TypeError as exc:
            raise ConfigError(f"problem.solver: {exc}") from exc

    def problem(self) -> MFGProblem:
        grid = self.grid()
        metric = self.metric(grid)
        state = self.stationary(grid, metric)
        return MFGProblem(grid, metric, self.cost(grid, state.m0), state, tuple(self.perturbations(grid)))

    def reconstruction(self) -> tuple[ReconstructionConfig, dict]:
        b = dict(self.raw.get("reconstruction", {}))
        extra = {k: b.pop(k) for k in ("eps", "multiples", "truth") if k in b}
        for k in ("frequencies", "rhos"):
            if k in b:
                b[k] = tuple(b[k])
        try:
            return ReconstructionConfig(**b), extra
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"reconstruction: {exc}") from exc

    def probe(self) -> dict:
        return dict(self.raw.get("probe", {}))

    def with_overrides(self, **run) -> ExperimentConfig:
        raw = copy.deepcopy(self.raw)
        raw.setdefault("run", {}).update({k: v for k, v in run.items() if v is not None})
        return ExperimentConfig(raw, self.source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg = ExperimentConfig(raw, str(path))
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    """Cheap structural checks that do not run any solver."""
    grid = cfg.grid()
    for key in ("metric", "stationary"):
        _get(cfg.problem_block, key, "problem")
    cfg.metric(grid)
    cfg.perturbations(grid)
    cfg.settings()
    cfg.reconstruction()[0].check_lattice(grid)


REFERENCE = {
    "problem": {
        "grid": {"dim": 1, "n_cells": 129, "n_time": 128, "T": 1.0},
        "metric": {"g": "identity", "kappa": "1 + 0.5*sin(2*pi*x)"},
        "stationary": {"u_boundary": "0.6*x", "m_boundary": "1 - 0.3*x"},
        "cost": {"2": "sin(pi*x)", "3": "cos(pi*x)"},
        "perturbations": [
            {"g": "sin(pi*t)*(1 - x)"},
            {"g": "sin(pi*t)*x"},
            {"g": "sin(2*pi*t)*(1 - x)"},
            {"g": "sin(2*pi*t)*x"},
            {"h": "sin(pi*t)*(1 - x)"},
            {"h": "sin(pi*t)*x"},
            {"h": "sin(2*pi*t)*(1 - x) + sin(pi*t)*x"},
        ],
        "solver": {"theta": 0.5, "tol_fp": 1e-13},
    },
    "reconstruction": {"mode": "variational", "eps": 0.02, "max_order": 3},
    "probe": {"rhos": [4, 8, 16], "zeta": [1.0], "tau": 2.0},
    "run": {"seed": 0, "jobs": 1},
}


def reference_config() -> ExperimentConfig:
    return ExperimentConfig(copy.deepcopy(REFERENCE), "<reference>")
