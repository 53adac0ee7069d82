"""Convergence study: CN against the Euler preset on the stock problems.

Writes one CSV per (problem, scheme) and prints the gnuplot-style tables.

    python scripts/convergence_study.py --problems sin1d atan1d --out results/
"""

import argparse
import pathlib
import sys

from fbsde.harness import ExperimentConfig, format_table, run_convergence


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--problems", nargs="+", default=["sin1d", "atan1d"])
    p.add_argument("--schemes", nargs="+", default=["cn", "euler"])
    p.add_argument("--steps", default="9,17,33,65")
    p.add_argument("--out", default=None, help="directory for CSV reports")
    args = p.parse_args(argv)

    steps = tuple(int(s) for s in args.steps.split(","))
    out_dir = pathlib.Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    summary = []
    for problem in args.problems:
        for scheme in args.schemes:
            csv_path = None if out_dir is None else str(out_dir / f"{problem}_{scheme}.csv")
            cfg = ExperimentConfig(problem=problem, scheme=scheme, steps=steps, out=csv_path)
            report = run_convergence(cfg)
            sys.stdout.write(format_table(report) + "\n")
            summary.append((problem, scheme, report.rate_y, report.rate_z))

    print("# problem   scheme   rate_y   rate_z")
    for problem, scheme, ry, rz in summary:
        print(f"  {problem:<9} {scheme:<7} {ry:7.3f}  {rz:7.3f}")


if __name__ == "__main__":
    main()
