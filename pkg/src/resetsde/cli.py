"""Configuration-driven runs: simulate, solve, cross-validate, serialize.

One JSON document describes a run: a named scenario (or an inline affine
model), the method (mc / pde / both), discretization controls, and output
destinations.  Identical configurations with identical seeds reproduce every
output file byte for byte, for any thread count.
"""

from __future__ import annotations

import argparse
import difflib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from resetsde import fpk
from resetsde.model import (
    AffineField,
    AffineMap,
    Mode,
    ModelSpec,
    PolyDomain,
    ResetEdge,
    SurfaceTarget,
    TerminalTarget,
    VectorFieldSet,
    build_model,
)
from resetsde.scenarios import SCENARIOS, load_scenario
from resetsde.simulate import GaussianInitial, ensemble
from resetsde.validate import ValidationReport, compare_mc_pde, flux_continuity_residual, mass_balance


class ParseError(ValueError):
    """Malformed JSON, reported with line and column."""


class SchemaError(ValueError):
    """A config key or value violates the schema."""


_TOP_LEVEL_KEYS = {
    "scenario": "named scenario (one of: " + ", ".join(sorted(SCENARIOS)) + ")",
    "scenario_options": "object forwarded to the scenario builder (e.g. params)",
    "model": "inline affine model description (alternative to scenario)",
    "initial": "inline initial law {mode, mean, std} (required with model)",
    "method": "mc | pde | both (default both)",
    "horizon": "final time T > 0 (default 1.0)",
    "dt": "Monte-Carlo time step (default 1e-3)",
    "pde_dt_fraction": "PDE step as a fraction of the stability bound (default 0.9)",
    "resolution": "cells per axis on the first mode's box (default per scenario)",
    "output_times": "list of times in [0, horizon] (default [horizon])",
    "ensemble_size": "number of Monte-Carlo paths (default 10000)",
    "base_seed": "master seed for per-path streams (default 0)",
    "zeno_cap": "max jumps per path (default 10^4 per unit horizon)",
    "threads": "worker threads for the ensemble (default 1)",
    "output_dir": "directory for artifacts (default 'out')",
    "tolerances": "object {l1, terminal, mass} for the validation verdict",
}

_KEY_ALIASES = {
    "dx": "resolution",
    "delta_x": "resolution",
    "cells": "resolution",
    "n": "ensemble_size",
    "n_paths": "ensemble_size",
    "seed": "base_seed",
    "t_end": "horizon",
    "times": "output_times",
}

_DEFAULT_TOLERANCES = {"l1": 0.1, "terminal": 0.05, "mass": 1e-8}


@dataclass
class RunConfig:
    scenario: str | None
    scenario_options: dict
    inline_model: dict | None
    inline_initial: dict | None
    method: str
    horizon: float
    dt: float
    pde_dt_fraction: float
    resolution: int | None
    output_times: list
    ensemble_size: int
    base_seed: int
    zeno_cap: int | None
    threads: int
    output_dir: str
    tolerances: dict = field(default_factory=dict)


def _suggest(key: str) -> str:
    if key in _KEY_ALIASES:
        return f"; did you mean {_KEY_ALIASES[key]!r}?"
    close = difflib.get_close_matches(key, _TOP_LEVEL_KEYS, n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


def load_config(path) -> RunConfig:
    """Parse and validate a JSON run configuration."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from None
    if not isinstance(raw, dict):
        raise SchemaError("the configuration must be a JSON object")

    for key in raw:
        if key not in _TOP_LEVEL_KEYS:
            raise SchemaError(f"unknown key {key!r}{_suggest(key)}")

    scenario = raw.get("scenario")
    inline_model = raw.get("model")
    if (scenario is None) == (inline_model is None):
        raise SchemaError("exactly one of 'scenario' or 'model' is required")
    if scenario is not None and scenario not in SCENARIOS:
        raise SchemaError(
            f"unknown scenario {scenario!r}; available: {', '.join(sorted(SCENARIOS))}"
        )
    if inline_model is not None and raw.get("initial") is None:
        raise SchemaError("'initial' is required with an inline model")

    method = raw.get("method", "both")
    if method not in ("mc", "pde", "both"):
        raise SchemaError(f"method must be mc, pde or both, got {method!r}")

    horizon = float(raw.get("horizon", 1.0))
    if horizon <= 0:
        raise SchemaError("horizon must be positive")
    dt = float(raw.get("dt", 1e-3))
    if dt <= 0:
        raise SchemaError("dt must be positive")
    pde_fraction = float(raw.get("pde_dt_fraction", 0.9))
    if not 0 < pde_fraction <= 1.0:
        raise SchemaError("pde_dt_fraction must lie in (0, 1]")

    resolution = raw.get("resolution")
    if resolution is not None:
        if not isinstance(resolution, int) or resolution < 4:
            raise SchemaError("resolution must be an integer >= 4")

    output_times = [float(v) for v in raw.get("output_times", [horizon])]
    if not output_times or any(t < 0 or t > horizon for t in output_times):
        raise SchemaError("output_times must be a nonempty subset of [0, horizon]")

    ensemble_size = int(raw.get("ensemble_size", 10_000))
    if method in ("mc", "both") and ensemble_size < 1:
        raise SchemaError("ensemble_size must be >= 1 when the method includes mc")

    zeno_cap = raw.get("zeno_cap")
    if zeno_cap is not None:
        zeno_cap = int(zeno_cap)
        if zeno_cap < 1:
            raise SchemaError("zeno_cap must be >= 1")

    threads = int(raw.get("threads", 1))
    if threads < 1:
        raise SchemaError("threads must be >= 1")

    tolerances = dict(_DEFAULT_TOLERANCES)
    for key, value in raw.get("tolerances", {}).items():
        if key not in tolerances:
            raise SchemaError(f"unknown tolerance {key!r}; known: {', '.join(tolerances)}")
        tolerances[key] = float(value)

    return RunConfig(
        scenario=scenario,
        scenario_options=raw.get("scenario_options", {}),
        inline_model=inline_model,
        inline_initial=raw.get("initial"),
        method=method,
        horizon=horizon,
        dt=dt,
        pde_dt_fraction=pde_fraction,
        resolution=resolution,
        output_times=sorted(output_times),
        ensemble_size=ensemble_size,
        base_seed=int(raw.get("base_seed", 0)),
        zeno_cap=zeno_cap,
        threads=threads,
        output_dir=str(raw.get("output_dir", "out")),
        tolerances=tolerances,
    )


# ---------------------------------------------------------------------------
# inline model parsing


def _affine_from(obj, what) -> AffineField:
    try:
        return AffineField(obj["matrix"], obj["offset"])
    except (KeyError, TypeError):
        raise SchemaError(f"{what} needs 'matrix' and 'offset'") from None


def _parse_inline_model(doc: dict):
    d = int(doc.get("dimension", 1))
    modes = []
    for i, mspec in enumerate(doc.get("modes", [])):
        if "box" in mspec:
            lo, hi = mspec["box"]
            domain = PolyDomain(
                *_box_faces(np.asarray(lo, float), np.asarray(hi, float)),
                interior_point=0.5 * (np.asarray(lo, float) + np.asarray(hi, float)),
                box=(np.asarray(lo, float), np.asarray(hi, float)),
            )
        else:
            hs = mspec.get("halfspaces")
            if hs is None:
                raise SchemaError(f"mode {i} needs 'box' or 'halfspaces'")
            domain = PolyDomain(
                [h["normal"] for h in hs],
                [h["offset"] for h in hs],
                interior_point=mspec["interior_point"],
                box=tuple(np.asarray(b, float) for b in mspec["box_hull"]) if "box_hull" in mspec else None,
            )
        drift = _affine_from(mspec["drift"], f"mode {i} drift")
        diffusion = tuple(
            _affine_from(a, f"mode {i} diffusion {r}") for r, a in enumerate(mspec["diffusion"])
        )
        modes.append(Mode(domain, VectorFieldSet(drift, diffusion)))

    edges = []
    for j, espec in enumerate(doc.get("reset_edges", [])):
        source_mode = int(espec["source_mode"])
        source_face = int(espec["source_face"])
        if "terminal" in espec:
            target = TerminalTarget(str(espec["terminal"]))
        elif "target_mode" in espec:
            amap = AffineMap(espec["map"]["matrix"], espec["map"]["offset"])
            target = SurfaceTarget(int(espec["target_mode"]), amap)
        else:
            raise SchemaError(f"reset edge {j} needs 'terminal' or 'target_mode'")
        edges.append(ResetEdge(source_mode, source_face, target))

    spec = ModelSpec(
        d,
        modes,
        edges,
        terminal_states=[str(s) for s in doc.get("terminal_states", [])],
        characteristic_faces=[tuple(fc) for fc in doc.get("characteristic_faces", [])],
    )
    return build_model(spec)


def _box_faces(lo, hi):
    d = lo.size
    normals, offsets = [], []
    for axis in range(d):
        e = np.zeros(d)
        e[axis] = 1.0
        normals.append((-e).tolist())
        offsets.append(-float(lo[axis]))
        normals.append(e.tolist())
        offsets.append(float(hi[axis]))
    return normals, offsets


class _ProductGaussianCells:
    """Separable normal density evaluated at cell centers (any dimension)."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=float).reshape(-1)
        self.std = np.broadcast_to(np.asarray(std, dtype=float), self.mean.shape)

    def __call__(self, points):
        z = (points - self.mean) / self.std
        norm = np.prod(self.std) * (2 * np.pi) ** (self.mean.size / 2.0)
        return np.exp(-0.5 * np.sum(z * z, axis=-1)) / norm


def _bundle_from_config(config: RunConfig) -> dict:
    if config.scenario is not None:
        return load_scenario(config.scenario, config.scenario_options)
    model = _parse_inline_model(config.inline_model)
    init = config.inline_initial
    law = GaussianInitial(int(init["mode"]), init["mean"], init["std"])
    cells = [None] * len(model.modes)
    cells[int(init["mode"])] = _ProductGaussianCells(init["mean"], init["std"])
    lo, hi = model.modes[0].domain.box
    span = float(hi[0] - lo[0])
    return {
        "model": model,
        "initial_law": law,
        "initial_cells": cells,
        "resolution": lambda dx: [
            tuple(
                int(round((m.domain.box[1][k] - m.domain.box[0][k]) / dx))
                for k in range(model.dimension)
            )
            for m in model.modes
        ],
        "default_dx": span / 128,
    }


# ---------------------------------------------------------------------------
# serialization


def _format_float(x: float) -> str:
    return f"{x:.17g}"


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _write_csv(path: Path, header: list, rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_float(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _density_payload(grid, states):
    return {
        "times": [s.t for s in states],
        "modes": [
            {
                "cells": [list(mg.shape) for mg in grid.mode_grids],
                "lo": [mg.lo.tolist() for mg in grid.mode_grids],
                "hi": [mg.hi.tolist() for mg in grid.mode_grids],
            }
        ][0],
        "density": [[arr.reshape(-1).tolist() for arr in s.p] for s in states],
        "terminal_mass": [dict(sorted(s.q.items())) for s in states],
    }


def _measure_payload(grid, measure):
    out = {"times": measure.times.tolist(), "size": measure.size, "per_time": []}
    for k in range(measure.times.size):
        entry = {
            "mode_counts": [c.shape[0] for c in measure.mode_clouds[k]],
            "terminal_counts": dict(sorted(measure.terminal_counts[k].items())),
            "zeno_count": int(measure.zeno_counts[k]),
        }
        if grid is not None:
            histograms = []
            for q, mg in enumerate(grid.mode_grids):
                cloud = measure.mode_clouds[k][q]
                edges = [mg.faces(axis) for axis in range(mg.dimension)]
                counts, _ = np.histogramdd(cloud, bins=edges)
                histograms.append(counts.reshape(-1).astype(int).tolist())
            entry["mode_histograms"] = histograms
        out["per_time"].append(entry)
    return out


# ---------------------------------------------------------------------------
# orchestration


def run(config: RunConfig) -> int:
    """Execute a configured run; returns the process exit status."""
    bundle = _bundle_from_config(config)
    model = bundle["model"]
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)

    lo, hi = model.modes[0].domain.box
    span = float(hi[0] - lo[0])
    n_cells = config.resolution
    if n_cells is None:
        n_cells = int(round(span / bundle["default_dx"]))
    dx = span / n_cells
    try:
        grid = fpk.build_grid(model, bundle["resolution"](dx))
    except fpk.SolverError:
        if config.method != "mc":
            raise
        grid = None  # MC-only runs tolerate grid-incompatible geometry

    pde_states = None
    if config.method in ("pde", "both"):
        density = fpk.project_density(grid, bundle["initial_cells"])
        pde_dt = fpk.stable_dt(grid, config.pde_dt_fraction)
        pde_states = []
        current = density
        t_now = 0.0
        for t_target in config.output_times:
            gap = t_target - t_now
            steps = int(np.ceil(gap / pde_dt - 1e-12)) if gap > 0 else 0
            if steps:
                effective = gap / steps
                current = fpk.evolve(model, grid, current, effective, steps)
            else:
                current = current.copy()
            current.t = t_target
            t_now = t_target
            pde_states.append(current)
        _write_json(outdir / "pde_density.json", _density_payload(grid, pde_states))
        rows = [
            [s.t] + [s.q.get(name, 0.0) for name in model.terminal_states]
            for s in pde_states
        ]
        _write_csv(
            outdir / "pde_terminal_mass.csv",
            ["time"] + [f"q_{name}" for name in model.terminal_states],
            rows,
        )

    measure = None
    if config.method in ("mc", "both"):
        measure = ensemble(
            model,
            bundle["initial_law"],
            config.ensemble_size,
            config.horizon,
            config.dt,
            config.output_times,
            config.base_seed,
            zeno_cap=config.zeno_cap,
            n_workers=config.threads,
        )
        _write_json(outdir / "mc_measure.json", _measure_payload(grid, measure))
        rows = []
        for k, t_k in enumerate(measure.times):
            rows.append(
                [float(t_k)]
                + [
                    measure.terminal_counts[k].get(name, 0) / measure.size
                    for name in model.terminal_states
                ]
                + [float(measure.zeno_counts[k]) / measure.size]
            )
        _write_csv(
            outdir / "mc_terminal_mass.csv",
            ["time"] + [f"q_{name}" for name in model.terminal_states] + ["zeno_fraction"],
            rows,
        )

    status = 0
    if config.method == "both":
        report = ValidationReport()
        tol = config.tolerances
        for k, state in enumerate(pde_states):
            t_k = config.output_times[k]
            report.add(
                f"mass_balance[t={t_k:g}]",
                mass_balance(grid, state) - 1.0,
                tol["mass"],
                {"resolution": n_cells, "pde_dt_fraction": config.pde_dt_fraction},
            )
            l1, dq = compare_mc_pde(grid, measure, state, t_k)
            report.add_bounded(
                f"l1_mc_pde[t={t_k:g}]",
                l1,
                tol["l1"],
                {"seed": config.base_seed, "ensemble_size": config.ensemble_size, "dt": config.dt},
            )
            report.add_bounded(
                f"terminal_gap[t={t_k:g}]",
                dq,
                tol["terminal"],
                {"seed": config.base_seed, "ensemble_size": config.ensemble_size},
            )
        if grid.surface_tables:
            report.add_bounded(
                "flux_continuity_residual[final]",
                flux_continuity_residual(model, grid, pde_states[-1]),
                float("inf"),
                {"resolution": n_cells},
            )
        _write_json(outdir / "report.json", report.to_dict())
        if not report.all_passed:
            status = 2
    return status


def _schema_text() -> str:
    lines = ["Configuration schema (one JSON object):", ""]
    for key, doc in _TOP_LEVEL_KEYS.items():
        lines.append(f"  {key:18s} {doc}")
    lines += [
        "",
        "Inline model schema: {dimension, modes: [{box | halfspaces+interior_point,",
        "  drift: {matrix, offset}, diffusion: [{matrix, offset}, ...]}],",
        "  reset_edges: [{source_mode, source_face, terminal | target_mode+map}],",
        "  terminal_states: [...], characteristic_faces: [[mode, face], ...]}",
        "",
        "Exit status: 0 success, 2 validation failure, 1 error.",
    ]
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="resetsde",
        description="Simulate and solve diffusions with boundary-hitting resets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "validate"):
        cmd = sub.add_parser(name, help=f"{name} a configured experiment")
        cmd.add_argument("config", help="path to the JSON configuration")
        cmd.add_argument("--seed", type=int, default=None, help="override base_seed")
        cmd.add_argument("--resolution", type=int, default=None, help="override grid cells")
        cmd.add_argument("--dt", type=float, default=None, help="override the MC time step")
        cmd.add_argument("--threads", type=int, default=None, help="override worker threads")
    sub.add_parser("schema", help="print the configuration schema")

    args = parser.parse_args(argv)
    if args.command == "schema":
        print(_schema_text())
        return 0

    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.base_seed = args.seed
        if args.resolution is not None:
            config.resolution = args.resolution
        if args.dt is not None:
            config.dt = args.dt
        if args.threads is not None:
            config.threads = args.threads
        if args.command == "validate":
            config.method = "both"
        return run(config)
    except (ParseError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
