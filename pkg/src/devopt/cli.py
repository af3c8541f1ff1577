"""Command-line entry points.

Four subcommands, all driven by the same flat key=value config format:

    devopt run    <config>   solve, certify, and export curves
    devopt train  <config>   train a selection rule, write its checkpoint
    devopt verify <config>   run the certificate suite only (no files)
    devopt export <traces>   re-emit CSV/manifest from a saved traces.json

The output directory comes from the config's ``outdir`` key; the
``DEVOPT_OUTDIR`` environment variable overrides it (and nothing else).
"""

from __future__ import annotations

import argparse
import os
import sys

from devopt.harness import (
    export_result,
    load_traces,
    read_config,
    run_experiment,
    train_from_config,
)


def _outdir(config_outdir: str) -> str:
    return os.environ.get("DEVOPT_OUTDIR", config_outdir)


def _print_report(result) -> None:
    for record in result.records:
        final = record.mean_gap[-1] if record.gaps.shape[0] else float("nan")
        tag = "certified" if record.enforced else "no certificates"
        print(f"  {record.solver}: final mean gap {final:.6e}  [{tag}]")
        for seed, msg in record.diverged.items():
            print(f"    diverged on seed {seed}: {msg}")
    print(
        f"certificates: {result.total_checks} checks, "
        f"{result.total_failures} failures"
    )


def cmd_run(args) -> int:
    config = read_config(args.config)
    result = run_experiment(config)
    written = export_result(result, _outdir(config.outdir))
    _print_report(result)
    for path in written:
        print(f"wrote {path}")
    return 1 if result.total_failures else 0


def cmd_train(args) -> int:
    config = read_config(args.config)

    def progress(step, mean_loss):
        print(f"  step {step}/{config.train_steps}: mean loss {mean_loss:.6f}")

    rule, losses, path = train_from_config(config, progress=progress)
    print(f"trained {type(rule).__name__} ({losses.size} steps), wrote {path}")
    return 0


def cmd_verify(args) -> int:
    config = read_config(args.config)
    result = run_experiment(config)
    _print_report(result)
    if result.total_failures:
        print("FAIL: certificate violations found")
        return 1
    print("OK: all certificates hold")
    return 0


def cmd_export(args) -> int:
    result = load_traces(args.traces)
    written = export_result(result, _outdir(args.outdir), write_traces=False)
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="devopt",
        description="deviation-based optimization: experiments, training, certificates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("config", help="path to a key=value config file")
    p_run.set_defaults(func=cmd_run)

    p_train = sub.add_parser("train", help="train a selection rule, write a checkpoint")
    p_train.add_argument("config", help="path to a key=value config file")
    p_train.set_defaults(func=cmd_train)

    p_verify = sub.add_parser("verify", help="run the certificate suite only")
    p_verify.add_argument("config", help="path to a key=value config file")
    p_verify.set_defaults(func=cmd_verify)

    p_export = sub.add_parser("export", help="re-emit curves from a saved traces.json")
    p_export.add_argument("traces", help="path to traces.json from an earlier run")
    p_export.add_argument("--outdir", default="results", help="output directory")
    p_export.set_defaults(func=cmd_export)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
