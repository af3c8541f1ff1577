#!/usr/bin/env python3
"""Train selection rules at several deviation budgets and compare gap curves.

Produces one checkpoint per eps, then runs all the trained rules together
with gradient descent on the same held-out problems so the exported curves
share one pooled reference optimum.  Prints the mean gap at a few probe
depths; the full curves land in the output directory as CSV.
"""

import argparse
import pathlib

from devopt.harness import (
    ExperimentConfig,
    export_result,
    run_experiment,
    train_from_config,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    ap.add_argument("--eps", type=float, nargs="+", default=[0.5, 0.9, 0.999])
    ap.add_argument("--steps", type=int, default=2000, help="training steps per rule")
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--problems", type=int, default=10)
    ap.add_argument("--iters", type=int, default=1000)
    ap.add_argument("--outdir", default="results/budget_sweep")
    args = ap.parse_args()

    outdir = pathlib.Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    solvers = ["gd"]
    for eps in args.eps:
        ckpt = outdir / f"rule_eps{eps}_steps{args.steps}.ckpt"
        if not ckpt.exists():
            print(f"training eps={eps} for {args.steps} steps")
            config = ExperimentConfig(
                problem="huber_tv",
                size=args.size,
                eps=eps,
                train_steps=args.steps,
                checkpoint=str(ckpt),
            )
            train_from_config(
                config,
                progress=lambda s, m: print(f"  step {s}: mean loss {m:.5f}"),
            )
        solvers.append(f"learned:{ckpt}")

    config = ExperimentConfig(
        problem="huber_tv",
        size=args.size,
        iters=args.iters,
        problems=args.problems,
        solvers=tuple(solvers),
    )
    result = run_experiment(config)
    export_result(result, str(outdir))

    probes = [n for n in (10, 100, 1000) if n <= args.iters]
    print("solver, " + ", ".join(f"gap@{n}" for n in probes))
    for record in result.records:
        gaps = ", ".join(f"{record.mean_gap[n]:.4e}" for n in probes)
        print(f"{record.solver}, {gaps}")
    print(f"curves written to {outdir}")


if __name__ == "__main__":
    main()
