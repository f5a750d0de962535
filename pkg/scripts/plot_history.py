#!/usr/bin/env python3
"""Plot a finished run: error curves plus the identified coefficient.

Usage:
    python3 scripts/plot_history.py configs/ex1-n64.ini [--out fig.png]

Reads history.csv and q_final.grid from the config's output directory.
The gradient-misfit panel gets a dashed line at the expected noise floor
of the synthetic data so stagnation height can be judged at a glance.
Requires matplotlib, which the library itself does not depend on.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    sys.exit("matplotlib is required: pip install matplotlib")

from coeffid import cli, problems


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", help="the INI file the run was started with")
    ap.add_argument("--out", help="output image (default <outdir>/history.png)")
    args = ap.parse_args()

    rc = cli.load_run_config(args.config)
    hist_path = rc.outdir / "history.csv"
    if not hist_path.is_file():
        sys.exit(f"{hist_path} not found; run `coeffid run -c {args.config}` first")
    with open(hist_path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        sys.exit(f"{hist_path} has no iterations")

    iters = [int(r["iter"]) for r in rows]
    rel = [float(r["rel_error"]) for r in rows if r["rel_error"]]
    mis = [float(r["grad_misfit"]) for r in rows if r["grad_misfit"]]

    floor = None
    if rc.obs_file is None and rc.delta > 0.0:
        spec = problems.ProblemSpec(example=rc.example, n=rc.n,
                                    delta=rc.delta, seed=rc.seed,
                                    f_const=rc.f_const)
        mesh, truth = problems.build_problem(spec)
        clean, _ = problems.generate_observation(mesh, truth, spec.f_const,
                                                 0.0, spec.seed)
        floor = problems.noise_floor(mesh, clean, rc.delta)

    fig, axes = plt.subplots(1, 3, figsize=(13, 4))

    ax = axes[0]
    if rel:
        ax.semilogy(iters[:len(rel)], rel, "o-", ms=3)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("relative coefficient error")
    ax.grid(True, alpha=0.3)

    ax = axes[1]
    if mis:
        ax.semilogy(iters[:len(mis)], mis, "o-", ms=3, color="tab:orange")
    if floor is not None:
        ax.axhline(floor, ls="--", color="gray", label="noise floor")
        ax.legend()
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("gradient misfit (h-norm)")
    ax.grid(True, alpha=0.3)

    ax = axes[2]
    grid_path = rc.outdir / "q_final.grid"
    if grid_path.is_file():
        n, q = problems.read_grid(grid_path)
        im = ax.imshow(q.reshape(n + 1, n + 1), origin="lower",
                       extent=(0, 1, 0, 1), cmap="viridis")
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title("identified coefficient")
    else:
        ax.axis("off")

    fig.tight_layout()
    out = Path(args.out) if args.out else rc.outdir / "history.png"
    fig.savefig(out, dpi=130)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
