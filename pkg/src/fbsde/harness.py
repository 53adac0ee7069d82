"""Single solves, convergence studies, rate fits, reports and the ``fbsde`` CLI."""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from fbsde.cn_solver import SchemeParams, SolutionLayers, TimeGrid, solve
from fbsde.errors import ConfigurationError, FbsdeError, RateUndefinedError
from fbsde.grid_interp import build_grid
from fbsde.ito_taylor import euler_forward, weak2_forward
from fbsde.model import PROBLEMS, exact_yz, get_problem, make_gbm_problem
from fbsde.quadrature import HermiteRule, cond_expect, gauss_hermite

CSV_COLUMNS = ("N", "delta", "err_y0", "err_z0", "err_y_max", "err_z_max", "picard_max", "wall_ms")
SCHEMES = ("cn", "euler", "theta")
_EPS = np.finfo(float).eps


@dataclass
class ExperimentConfig:
    problem: str = "sin1d"
    scheme: str = "cn"
    theta: tuple = (0.5, 0.5, 0.5, -0.5)
    steps: tuple = (9, 17, 33, 65)
    gh_order: int = 8
    grid_nodes: Optional[int] = None
    radius_k: float = 8.0
    degree: int = 6
    picard_tol: float = 1e-12
    picard_max: int = 50
    horizon: float = 1.0
    out: Optional[str] = None
    fmt: str = "table"

    def __post_init__(self):
        self.steps = tuple(int(n) for n in self.steps)
        self.theta = tuple(float(v) for v in self.theta)
        if self.problem not in PROBLEMS:
            known = ", ".join(sorted(PROBLEMS))
            raise ConfigurationError(f"unknown problem {self.problem!r}; registered: {known}")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if len(self.theta) != 4:
            raise ConfigurationError("theta needs four values")
        if not self.steps:
            raise ConfigurationError("at least one step count is required")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ConfigurationError("step counts must be strictly increasing")
        if self.fmt not in ("csv", "table"):
            raise ConfigurationError("format must be csv or table")
        self.scheme_params()

    def scheme_params(self) -> SchemeParams:
        kw = dict(picard_tol=self.picard_tol, picard_max=self.picard_max)
        if self.scheme == "cn":
            return SchemeParams.cn(**kw)
        if self.scheme == "euler":
            return SchemeParams.euler(**kw)
        return SchemeParams(*self.theta, **kw)


@dataclass
class RunResult:
    N: int
    delta: float
    y0: float
    z0: np.ndarray
    y_exact: float
    z_exact: np.ndarray
    err_y0: float
    err_z0: float
    err_y_max: float
    err_z_max: float
    picard_max: int
    wall_ms: float
    boundary_hits: int
    approximate_derivatives: bool
    layers: Optional[SolutionLayers] = field(default=None, repr=False)

    @property
    def floor_y(self) -> bool:
        return self.err_y0 <= 10.0 * _EPS * abs(self.y_exact)

    @property
    def floor_z(self) -> bool:
        return self.err_z0 <= 10.0 * _EPS * float(np.abs(self.z_exact).max())


def solve_config(config: ExperimentConfig, N: int, keep_layers: bool = False) -> RunResult:
    prob, sol = get_problem(config.problem, config.horizon)
    rule = gauss_hermite(config.gh_order)
    tgrid = TimeGrid.from_steps(N, config.horizon)
    start = time.perf_counter()
    sgrid = build_grid(
        prob,
        tgrid.delta,
        config.radius_k,
        gh_order=config.gh_order,
        degree=config.degree,
        nodes=config.grid_nodes,
    )
    layers = solve(prob, tgrid, sgrid, rule, config.scheme_params(), degree=config.degree, solution=sol)
    wall_ms = (time.perf_counter() - start) * 1e3

    y0 = layers.y_at(0, prob.x0)
    z0 = np.atleast_1d(layers.z_at(0, prob.x0))
    y_ex, z_ex = exact_yz(sol, prob, 0.0, prob.x0)
    g0 = layers.y_layers[0].grid.points()
    y_grid, z_grid = exact_yz(sol, prob, 0.0, g0)
    return RunResult(
        N=N,
        delta=tgrid.delta,
        y0=y0,
        z0=z0,
        y_exact=y_ex,
        z_exact=np.atleast_1d(z_ex),
        err_y0=abs(y0 - y_ex),
        err_z0=float(np.abs(z0 - z_ex).max()),
        err_y_max=float(np.abs(layers.y_layers[0].values - y_grid).max()),
        err_z_max=float(np.abs(layers.z_layers[0].values - z_grid).max()),
        picard_max=max(layers.picard_max),
        wall_ms=wall_ms,
        boundary_hits=sum(layers.boundary_hits),
        approximate_derivatives=layers.approximate_derivatives,
        layers=layers if keep_layers else None,
    )


def run_single(config: ExperimentConfig, out=None) -> RunResult:
    """Solve once at ``config.steps[0]`` and print values, exact values and errors."""
    res = solve_config(config, config.steps[0])
    if out is not None:
        out.write(format_single(config, res))
    return res


def format_single(config: ExperimentConfig, res: RunResult) -> str:
    def vec(v):
        return "[" + ", ".join(f"{x:.6g}" for x in np.atleast_1d(v)) + "]"

    lines = [
        f"problem {config.problem}  scheme {config.scheme}  N {res.N}  delta {res.delta:.6g}",
        f"Y0 {res.y0:.6g}  exact {res.y_exact:.6g}  err {res.err_y0:.6g}",
        f"Z0 {vec(res.z0)}  exact {vec(res.z_exact)}  err {res.err_z0:.6g}",
        f"max grid err  Y {res.err_y_max:.6g}  Z {res.err_z_max:.6g}",
        f"picard_max {res.picard_max}  boundary stencils {res.boundary_hits}  "
        f"wall {res.wall_ms:.6g} ms",
    ]
    if res.approximate_derivatives:
        lines.append("note: approximate-derivatives (finite differences)")
    return "\n".join(lines) + "\n"


def fit_rate(pairs: Sequence[tuple[float, float]]) -> float:
    """Least-squares slope of ``log(err)`` against ``log(delta)``."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ConfigurationError("a rate fit needs at least two (delta, err) pairs")
    for i, (d, e) in enumerate(pairs):
        if not e > 0:
            raise ConfigurationError(f"error at index {i} is not positive ({e!r})")
        if not d > 0:
            raise ConfigurationError(f"step at index {i} is not positive ({d!r})")
    x = np.log([p[0] for p in pairs])
    y = np.log([p[1] for p in pairs])
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


@dataclass
class ConvergenceReport:
    rows: list
    rate_y: float
    rate_z: float
    meta: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        buf = io.StringIO()
        write_csv_rows(buf, [row_values(r) for r in self.rows])
        return buf.getvalue()


def row_values(r: RunResult) -> dict:
    return {k: getattr(r, k) for k in CSV_COLUMNS}


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def write_csv_rows(stream, rows) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in CSV_COLUMNS])


def write_csv(report: ConvergenceReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report.csv_text())


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    ints = {"N", "picard_max"}
    return [{k: int(v) if k in ints else float(v) for k, v in r.items()} for r in rows]


def format_table(report: ConvergenceReport) -> str:
    """Whitespace-aligned table; ``#`` header lines keep it gnuplot-readable."""
    lines = ["# " + "  ".join(f"{c:>12}" for c in CSV_COLUMNS)]
    for r in report.rows:
        vals = row_values(r)
        cells = [f"{vals[c]:>12d}" if c in ("N", "picard_max") else f"{vals[c]:>12.6g}" for c in CSV_COLUMNS]
        flags = []
        if r.floor_y:
            flags.append("floor-y")
        if r.floor_z:
            flags.append("floor-z")
        lines.append("  " + "  ".join(cells) + ("  # " + ",".join(flags) if flags else ""))
    lines.append(f"# rate_y {report.rate_y:.4f}  rate_z {report.rate_z:.4f}")
    m = report.meta
    lines.append(
        f"# problem {m.get('problem')}  scheme {m.get('scheme')}  gh_order {m.get('gh_order')}  "
        f"degree {m.get('degree')}  radius_k {m.get('radius_k')}  grid_nodes {m.get('grid_nodes')}"
    )
    return "\n".join(lines) + "\n"


def run_convergence(config: ExperimentConfig, out=None) -> ConvergenceReport:
    """Solve at every step count, fit rates, optionally write CSV and print."""
    if len(config.steps) < 2:
        raise ConfigurationError("a convergence study needs at least two step counts")
    rows = [solve_config(config, N) for N in config.steps]
    usable_y = [(r.delta, r.err_y0) for r in rows if not r.floor_y]
    usable_z = [(r.delta, r.err_z0) for r in rows if not r.floor_z]
    if len(usable_y) < 2 or len(usable_z) < 2:
        raise RateUndefinedError(
            "fewer than two rows above the rounding floor; the rate is undefined. "
            "Use a problem whose solution the scheme does not reproduce exactly."
        )
    report = ConvergenceReport(
        rows=rows,
        rate_y=fit_rate(usable_y),
        rate_z=fit_rate(usable_z),
        meta={
            "problem": config.problem,
            "scheme": config.scheme,
            "theta": config.scheme_params().thetas,
            "gh_order": config.gh_order,
            "degree": config.degree,
            "radius_k": config.radius_k,
            "grid_nodes": config.grid_nodes,
        },
    )
    if config.out:
        write_csv(report, config.out)
    if out is not None:
        out.write(report.csv_text() if config.fmt == "csv" else format_table(report))
    return report


def forward_weak_errors(
    steps: Sequence[int],
    scheme: str = "weak2",
    mu: float = 0.05,
    s0: float = 0.2,
    T: float = 1.0,
    x0: float = 1.0,
    rule: Optional[HermiteRule] = None,
) -> list[dict]:
    """Weak errors of ``E[X_T]`` and ``E[X_T^2]`` for GBM on a uniform grid ``T/N``.

    One-step moments come from quadrature at ``x = 1``; both forward maps
    are linear in ``x`` for GBM, so ``E[X_T^k] = x0^k m_k^N`` exactly.
    """
    rule = gauss_hermite(8) if rule is None else rule
    prob, _ = make_gbm_problem(T, mu, s0, x0)
    out = []
    for N in steps:
        delta = T / N
        fwd = weak2_forward(prob, delta) if scheme == "weak2" else euler_forward(prob, delta)
        m1 = float(cond_expect(lambda x: x[:, 0], np.ones(1), 0.0, delta, rule, fwd))
        m2 = float(cond_expect(lambda x: x[:, 0] ** 2, np.ones(1), 0.0, delta, rule, fwd))
        e1 = x0 * math.exp(mu * T)
        e2 = x0**2 * math.exp((2 * mu + s0**2) * T)
        out.append(
            {
                "N": N,
                "delta": delta,
                "m1": m1,
                "m2": m2,
                "err_m1": abs(x0 * m1**N - e1),
                "err_m2": abs(x0**2 * m2**N - e2),
            }
        )
    return out


# --------------------------------------------------------------------------
# command line

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_RATE = 0, 2, 3, 4


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--problem", required=True, help="registered problem: " + ", ".join(sorted(PROBLEMS)))
    p.add_argument("--scheme", default="cn", help="cn | euler | theta")
    p.add_argument("--theta", type=_float_list, default=(0.5, 0.5, 0.5, -0.5))
    p.add_argument("--gh-order", type=int, default=8)
    p.add_argument("--grid-nodes", type=int, default=None)
    p.add_argument("--grid-radius-k", type=float, default=8.0)
    p.add_argument("--lagrange-degree", type=int, default=6)
    p.add_argument("--picard-tol", type=float, default=1e-12)
    p.add_argument("--picard-max", type=int, default=50)
    p.add_argument("--horizon", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbsde", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="single solve")
    _common(run)
    run.add_argument("--steps", type=int, required=True)
    conv = sub.add_parser("converge", help="convergence study with rate fit")
    _common(conv)
    conv.add_argument("--steps", type=_int_list, default=(9, 17, 33, 65))
    conv.add_argument("--out", default=None)
    conv.add_argument("--format", dest="fmt", default="table", choices=("csv", "table"))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ExperimentConfig(
            problem=args.problem,
            scheme=args.scheme,
            theta=args.theta,
            steps=(args.steps,) if args.command == "run" else args.steps,
            gh_order=args.gh_order,
            grid_nodes=args.grid_nodes,
            radius_k=args.grid_radius_k,
            degree=args.lagrange_degree,
            picard_tol=args.picard_tol,
            picard_max=args.picard_max,
            horizon=args.horizon,
            out=getattr(args, "out", None),
            fmt=getattr(args, "fmt", "table"),
        )
        if args.command == "run":
            run_single(config, out=sys.stdout)
        else:
            run_convergence(config, out=sys.stdout)
    except ConfigurationError as exc:
        print(f"fbsde: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RateUndefinedError as exc:
        print(f"fbsde: {exc}", file=sys.stderr)
        return EXIT_RATE
    except FbsdeError as exc:
        print(f"fbsde: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
