"""Command line front end.

Each subcommand loads a problem configuration (or, for
``reproduce-example``, builds the canonical separating instance), runs
one library operation, writes CSV tables and JSON reports plus a run
manifest into ``--out``, and exits with a three-way status:

* 0  the checked property holds,
* 1  the input was valid but the check or solve failed,
* 2  the input itself was rejected.

Outputs are byte-deterministic for fixed inputs; the manifest is the
one exception since it records wall time.  Printed numbers use 17
significant digits so they round-trip exactly.
"""

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import comparison as cmp
from . import example as exm
from . import expr as ex
from . import viscosity as vc
from .assumptions import SamplerSpec, audit_H1, audit_H2
from .core import (ConfigError, Grid, GridFunction, load_problem, read_csv,
                   sample, write_csv)
from .obstacle import SearchParams, evaluate_slice_values
from .solver import (SolverError, extract_regions, interior_mask, solve_hjb,
                     solve_qvi)


def f17(value):
    """Format one number with 17 significant digits."""
    return f"{float(value):.17g}"


# ------------------------------------------------------------- manifest ----

@dataclass(frozen=True)
class RunManifest:
    """Provenance record written next to every command's artifacts."""

    command: str
    config_hash: str
    overrides: tuple
    artifacts: tuple
    wall_time_s: float
    passed: bool
    summary: str

    def to_dict(self):
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "overrides": list(self.overrides),
            "artifacts": list(self.artifacts),
            "wall_time_s": self.wall_time_s,
            "passed": self.passed,
            "summary": self.summary,
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)


class _Session:
    """Collects artifacts for one command run and writes the manifest."""

    def __init__(self, command, out_dir, config_hash, overrides):
        self.command = command
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.overrides = tuple(overrides)
        self.artifacts = []
        self.start = time.perf_counter()

    def path(self, name):
        self.artifacts.append(name)
        return self.out / name

    def write_text(self, name, text):
        path = self.path(name)
        path.write_text(text if text.endswith("\n") else text + "\n")

    def write_json(self, name, payload):
        self.write_text(name, json.dumps(payload, indent=2))

    def finish(self, passed, summary):
        manifest = RunManifest(
            command=self.command,
            config_hash=self.config_hash,
            overrides=self.overrides,
            artifacts=tuple(self.artifacts),
            wall_time_s=time.perf_counter() - self.start,
            passed=bool(passed),
            summary=summary,
        )
        (self.out / "manifest.json").write_text(manifest.to_json() + "\n")
        print(summary)
        return 0 if passed else 1


# ----------------------------------------------------------- config glue ----

def _collect_overrides(args):
    overrides = []
    if getattr(args, "grid_nt", None) is not None:
        overrides.append(f"grid.t_nodes={args.grid_nt}")
    if getattr(args, "grid_nx", None) is not None:
        overrides.append(f"grid.x_nodes={args.grid_nx}")
    overrides.extend(getattr(args, "set", []) or [])
    return overrides


def _load_config(path, overrides):
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path!r}: {err}") from err
    return load_problem(text, overrides)


def _sampler_for(cfg):
    return SamplerSpec(x_min=cfg.grid.x_min, x_max=cfg.grid.x_max,
                       grid=cfg.grid)


def _sample_expression(cfg, source, flag):
    names = {"t"} | {f"x{d + 1}" for d in range(cfg.problem.n)}
    try:
        node = ex.parse(source, names)
    except ex.ExprError as err:
        raise ConfigError(f"bad {flag} expression: {err}") from err
    return sample(node, cfg.grid)


def _solution_on_grid(cfg, args, suffix=""):
    """Grid function from --solution CSV, --analytic expr, or a fresh solve."""
    solution = getattr(args, "solution" + suffix, None)
    analytic = getattr(args, "analytic" + suffix, None)
    flag = "--solution" + suffix.replace("_", "-")
    if solution and analytic:
        raise ConfigError(f"pass either {flag} or --analytic{suffix}, not both")
    if solution:
        return read_csv(cfg.grid, solution), f"solution file {solution}"
    if analytic:
        return (_sample_expression(cfg, analytic,
                                   "--analytic" + suffix.replace("_", "-")),
                "analytic expression")
    if suffix:
        return None, ""
    result = solve_qvi(cfg.problem, cfg.grid, constants=cfg.constants)
    return result.V, "fresh solve"


def _tolerance_unit(grid):
    return grid.dt + float(sum(grid.dx))


# ------------------------------------------------------------- commands ----

def cmd_check(args):
    overrides = _collect_overrides(args)
    cfg = _load_config(args.config, overrides)
    run = _Session("check", args.out, cfg.config_hash, overrides)
    spec = _sampler_for(cfg)
    hamiltonian = audit_H1(cfg.problem, cfg.constants, spec)
    structure = audit_H2(cfg.problem, cfg.constants, spec)
    passed = hamiltonian.passed and structure.passed
    run.write_json("check.json", {
        "passed": passed,
        "hamiltonian": hamiltonian.to_dict(),
        "structure": structure.to_dict(),
    })
    for report in (hamiltonian, structure):
        for check in report.checks:
            status = "pass" if check.passed else "FAIL"
            print(f"{status}  {check.name}: worst margin "
                  f"{f17(check.worst_margin)} over {check.points_tested} points")
    return run.finish(passed, f"check: {'PASS' if passed else 'FAIL'}")


def cmd_solve(args):
    overrides = _collect_overrides(args)
    cfg = _load_config(args.config, overrides)
    run = _Session("solve", args.out, cfg.config_hash, overrides)
    if args.no_obstacle:
        result = solve_hjb(cfg.problem, cfg.grid, constants=cfg.constants)
    else:
        result = solve_qvi(cfg.problem, cfg.grid, constants=cfg.constants)

    tol = args.tol if args.tol is not None else 10.0 * _tolerance_unit(cfg.grid)
    mask = interior_mask(cfg.grid, result.scheme)
    interior = np.abs(result.residual.values[mask])
    fraction = float((interior <= tol).mean()) if interior.size else 1.0
    worst = float(interior.max()) if interior.size else 0.0
    passed = fraction >= 0.99

    write_csv(result.V, run.path("solution.csv"))
    write_csv(result.residual, run.path("residual.csv"))
    payload = {
        "passed": passed,
        "tolerance": tol,
        "interior_fraction_within_tolerance": fraction,
        "max_interior_residual": worst,
        "value_summary": result.V.summary(),
        "flags": list(result.flags),
        "max_fixed_point_sweeps": int(result.iterations.max()),
        "dissipation": list(result.scheme.dissipation),
    }
    if result.obstacle_gap is not None:
        write_csv(result.obstacle_gap, run.path("obstacle_gap.csv"))
        regions = extract_regions(result)
        payload["intervention_fraction"] = regions.fraction
        payload["intervention_nodes"] = regions.n_intervention
    run.write_json("solve.json", payload)
    print(f"residual within {f17(tol)} on {f17(fraction)} of interior nodes")
    if "intervention_fraction" in payload:
        print(f"intervention fraction {f17(payload['intervention_fraction'])}")
    return run.finish(passed, f"solve: {'PASS' if passed else 'FAIL'}")


_VARIANTS = {
    "hjb-sub": vc.check_hjb_subsolution,
    "hjb-super": vc.check_hjb_supersolution,
    "qvi-sub": vc.check_qvi_subsolution,
    "qvi-super-classical": vc.check_qvi_supersolution_classical,
    "qvi-super-modified": vc.check_qvi_supersolution_modified,
}


def cmd_viscosity(args):
    overrides = _collect_overrides(args)
    cfg = _load_config(args.config, overrides)
    run = _Session("viscosity", args.out, cfg.config_hash, overrides)
    V, source = _solution_on_grid(cfg, args)
    checker = _VARIANTS[args.variant]
    spec = None
    if args.tol is not None:
        spec = vc.ProbeSpec(tol_factor=args.tol)
    report = checker(V, cfg.problem, spec)
    run.write_text("viscosity.json", report.to_json())
    vc.write_violations_csv(report, run.path("violations.csv"))
    counts = (len(report.violations), len(report.constraint_violations),
              len(report.terminal_violations))
    print(f"checked {source} as {report.variant}: "
          f"{counts[0]} probe, {counts[1]} constraint, "
          f"{counts[2]} terminal violations")
    for v in report.constraint_violations[:5]:
        print(f"  constraint violation at t={f17(v.t)}, "
              f"x=({', '.join(f17(c) for c in v.x)}), margin {f17(v.margin)}")
    for v in report.violations[:5]:
        print(f"  probe violation at t={f17(v.t)}, "
              f"x=({', '.join(f17(c) for c in v.x)}), margin {f17(v.margin)}")
    return run.finish(report.passed,
                      f"viscosity {args.variant}: "
                      f"{'PASS' if report.passed else 'FAIL'}")


def cmd_compare(args):
    overrides = _collect_overrides(args)
    cfg = _load_config(args.config, overrides)
    cfg_hat = _load_config(args.config_hat, overrides)
    if cfg_hat.grid != cfg.grid:
        raise ConfigError("compared configs must declare identical grids")
    run = _Session("compare", args.out,
                   cfg.config_hash + ":" + cfg_hat.config_hash, overrides)
    report = cmp.compare_solutions(cfg.problem, cfg_hat.problem, cfg.grid,
                                   constants=cfg.constants,
                                   sampler_spec=_sampler_for(cfg),
                                   override=True)
    tol = args.tol if args.tol is not None else report.tolerance
    passed = report.ordered and report.max_difference <= tol
    run.write_text("compare.json", report.to_json())
    difference = report.V.values - report.V_hat.values
    write_csv(GridFunction(cfg.grid, difference), run.path("difference.csv"))
    print(f"max interior difference {f17(report.max_difference)} "
          f"(tolerance {f17(tol)})")
    if not report.ordered:
        print("data order audit failed; difference measured anyway")
    return run.finish(passed, f"compare: {'PASS' if passed else 'FAIL'}")


def cmd_doubling(args):
    overrides = _collect_overrides(args)
    cfg = _load_config(args.config, overrides)
    run = _Session("doubling", args.out, cfg.config_hash, overrides)
    V, source = _solution_on_grid(cfg, args)
    V_hat, hat_source = _solution_on_grid(cfg, args, suffix="_hat")
    if V_hat is None:
        V_hat, hat_source = V, "the same function"
    params = None
    if args.theta is not None:
        params = cmp.DoublingParams(theta=args.theta)
    levels = None
    if args.levels:
        try:
            levels = tuple(float(part) for part in args.levels.split(","))
        except ValueError:
            raise ConfigError(
                f"--levels must be comma-separated numbers, got {args.levels!r}"
            ) from None
    diag = cmp.doubling_maximize(V, V_hat, params=params, levels=levels)
    passed = (diag.certificate_ok and diag.gaps_nonincreasing()
              and all(lev.residual_certified <= 0.0 for lev in diag.levels))
    run.write_text("doubling.json", diag.to_json())
    cmp.write_trend_csv(diag, run.path("trend.csv"))
    print(f"doubling on {source} vs {hat_source}: {len(diag.levels)} levels, "
          f"{diag.space_points} space points per slice")
    for lev in diag.levels:
        print(f"  eps={f17(lev.epsilon)} t_gap={f17(lev.t_gap)} "
              f"x_gap={f17(lev.x_gap)} residual={f17(lev.residual_symmetry)}")
    return run.finish(passed, f"doubling: {'PASS' if passed else 'FAIL'}")


def cmd_example(args):
    instance = exm.build_instance(t0=args.t0, l0=args.l0)
    nt = args.grid_nt if args.grid_nt is not None else 201
    try:
        nx = int(args.grid_nx) if args.grid_nx is not None else 701
    except ValueError:
        raise ConfigError(
            f"--grid-nx must be a single integer here, got {args.grid_nx!r}"
        ) from None
    key = f"reproduce-example l0={instance.l0!r} t0={instance.t0!r} nt={nt} nx={nx}"
    run = _Session("reproduce-example", args.out,
                   hashlib.sha256(key.encode()).hexdigest(), ())
    # box must reach the jump target or the clipped search hides the dip
    x_hi = max(5.5, instance.x0 + instance.xi2 + 1.0)
    grid = Grid(instance.T, nt, (-1.5,), (x_hi,), (nx,))
    search = SearchParams(xi_max=max(5.0, instance.xi2 + 1.0),
                          refine_levels=6)
    spec = None
    if args.tol is not None:
        spec = vc.ProbeSpec(tol_factor=args.tol)
    report = exm.verify_separation(instance, grid, spec=spec, search=search)

    # measurement box: x0 on a node, right edge past the jump target
    reach = instance.x0 + instance.xi2 + 0.5
    x_max = -1.0 + 0.01 * math.ceil((reach + 1.0) / 0.01)
    nodes = int(round((x_max + 1.0) / 0.01)) + 1
    measured = exm.measure_obstacle_gap(instance, -1.0, x_max, nodes)

    problem = instance.problem()
    V = exm.sample_value_function(instance, grid)
    k0 = int(round(instance.t0 / grid.dt))
    n_vals, _, _ = evaluate_slice_values(grid, V.values[k0],
                                         float(grid.t[k0]), problem.ell,
                                         problem.cone, search)
    slice_path = run.path("anchor_slice.csv")
    with open(slice_path, "w") as fh:
        fh.write("x1,obstacle_minus_value\n")
        for x, val in zip(grid.axes[0], n_vals - V.values[k0]):
            fh.write(f"{x:.17g},{val:.17g}\n")

    payload = {
        "l0": instance.l0,
        "xi1": instance.xi1,
        "xi2": instance.xi2,
        "obstacle_at_anchor": instance.value_at_anchor + instance.gap,
        "value_at_anchor": instance.value_at_anchor,
        "gap": instance.gap,
        "delta": instance.delta,
        "classical": "PASS" if report.classical.passed else "FAIL",
        "modified": "PASS" if report.modified.passed else "FAIL",
        "separated": report.separated,
        "notes": report.notes,
        "gap_measured": measured["measured"],
        "gap_difference": measured["difference"],
        "instance": instance.to_dict(),
    }
    run.write_json("example.json", payload)
    run.write_text("separation.json", report.to_json())

    print(f"l0 {f17(instance.l0)}: xi1 {f17(instance.xi1)}, "
          f"xi2 {f17(instance.xi2)}, gap {f17(instance.gap)}, "
          f"delta {f17(instance.delta)}")
    print(f"classical {payload['classical']}, modified {payload['modified']}")
    if report.notes:
        print(f"note: {report.notes}")
    return run.finish(report.separated,
                      "reproduce-example: "
                      f"{'PASS' if report.separated else 'FAIL'}")


# --------------------------------------------------------------- parser ----

def _add_common(sub, config=True):
    if config:
        sub.add_argument("config", help="problem configuration file")
    sub.add_argument("--set", action="append", default=[],
                     metavar="SECTION.KEY=VALUE",
                     help="override one config value after the file is parsed")
    sub.add_argument("--grid-nt", type=int, default=None,
                     help="override grid.t_nodes")
    sub.add_argument("--grid-nx", default=None, metavar="N[,M]",
                     help="override grid.x_nodes")
    sub.add_argument("--tol", type=float, default=None,
                     help="acceptance tolerance override")
    sub.add_argument("--out", default=".", metavar="DIR",
                     help="directory for artifacts (default: current)")


def _add_solution_source(sub):
    sub.add_argument("--solution", default=None, metavar="FILE",
                     help="grid function CSV to check")
    sub.add_argument("--analytic", default=None, metavar="EXPR",
                     help="closed-form expression in t, x1[, x2] to check")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qvilab",
        description="grid laboratory for impulse-control value functions")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="audit structural hypotheses")
    _add_common(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("solve", help="solve the constrained equation")
    _add_common(p)
    p.add_argument("--no-obstacle", action="store_true",
                   help="solve the unconstrained equation instead")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("viscosity", help="probe one solution notion")
    _add_common(p)
    _add_solution_source(p)
    p.add_argument("--variant", required=True, choices=sorted(_VARIANTS),
                   help="which notion to check")
    p.set_defaults(func=cmd_viscosity)

    p = sub.add_parser("compare", help="measure order between two problems")
    _add_common(p)
    p.add_argument("config_hat",
                   help="configuration whose data dominates the first "
                        "(overrides apply to both configs)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("doubling", help="run the pair-maximization sweep")
    _add_common(p)
    _add_solution_source(p)
    p.add_argument("--solution-hat", default=None, metavar="FILE",
                   help="second grid function (default: reuse the first)")
    p.add_argument("--analytic-hat", default=None, metavar="EXPR",
                   help="second closed form (default: reuse the first)")
    p.add_argument("--theta", type=float, default=None,
                   help="confinement weight for the pair functional")
    p.add_argument("--levels", default=None, metavar="E1,E2,...",
                   help="comma-separated penalty levels (eps = delta)")
    p.set_defaults(func=cmd_doubling)

    p = sub.add_parser("reproduce-example",
                       help="rebuild the separating instance and verify it")
    _add_common(p, config=False)
    p.add_argument("--l0", type=float, default=0.05,
                   help="base impulse cost (default 0.05)")
    p.add_argument("--t0", type=float, default=0.5,
                   help="anchor time (default 0.5; keep it on 0.01 steps)")
    p.set_defaults(func=cmd_example)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ex.ExprError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SolverError as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
