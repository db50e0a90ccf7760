"""Command-line interface: ``fit``, ``simulate``, ``diagnose`` and ``heatmap``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 fit failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .diagnostics import check_chains
from .errors import DataError, FitFailure, MVPLNError, SpecError
from .heatmap import emit_heatmaps
from .pipeline import RunConfig, run_fit, run_sim
from .sampler import read_chain_dump
from .simgen import read_labels
from .tensor_io import load_counts

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FIT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _run_options(p: argparse.ArgumentParser) -> None:
    # defaults are None so that a config file can fill the gaps
    p.add_argument("--config", help="JSON file with any of the options below; flags override it")
    p.add_argument("--input", help="count CSV (unit_id then r*p count columns)")
    p.add_argument("--r", type=int, help="number of occasions")
    p.add_argument("--p", type=int, help="number of variables")
    p.add_argument("--g-min", type=int)
    p.add_argument("--g-max", type=int)
    p.add_argument("--init", choices=["kmeans", "random"])
    p.add_argument("--init-runs", type=int)
    p.add_argument("--chains", type=int, help="chains per latent matrix (default 3)")
    p.add_argument("--iters", type=int, help="initial iterations per chain (default 1000)")
    p.add_argument("--max-outer", type=int, help="cap on MCMC-EM iterations (default 200)")
    p.add_argument("--norm", help="tmm | total | none | file:PATH")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvplnmix", description="Clustering of three-way count data with MVPLN mixtures.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    fit = sub.add_parser("fit", help="fit G = g_min..g_max and select a model")
    _run_options(fit)

    sim = sub.add_parser("simulate", help="fit replicate datasets drawn from a preset")
    _run_options(sim)
    sim.add_argument("--preset", choices=["sim1", "sim2", "sim3"])
    sim.add_argument("--n", type=int, help="units per replicate (default 1000)")
    sim.add_argument("--replicates", type=int)

    diag = sub.add_parser("diagnose", help="chain diagnostics for a chain-dump CSV")
    diag.add_argument("dump", help="chain dump written by the sampler")
    diag.add_argument("--out", help="write the JSON report here instead of stdout")

    heat = sub.add_parser("heatmap", help="one SVG heatmap per cluster")
    heat.add_argument("--input", required=True)
    heat.add_argument("--r", type=int, required=True)
    heat.add_argument("--p", type=int, required=True)
    heat.add_argument("--labels", required=True, help="labels CSV (unit_id, label)")
    heat.add_argument("--out", required=True, help="output directory")
    return parser


_RUN_KEYS = (
    "input", "r", "p", "g_min", "g_max", "init", "init_runs", "chains", "iters", "max_outer",
    "norm", "seed", "out", "jobs", "preset", "n", "replicates",
)


def resolve_config(args: argparse.Namespace, **defaults) -> RunConfig:
    values: dict = dict(defaults)
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
    for key in _RUN_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    try:
        return RunConfig.from_dict(values)
    except (TypeError, SpecError) as exc:
        raise UsageError(str(exc)) from None


def _cmd_fit(args) -> int:
    config = resolve_config(args)
    table, _ = run_fit(config)
    print(table.format())
    return EXIT_OK


def _cmd_simulate(args) -> int:
    config = resolve_config(args, norm="none")
    summary = run_sim(config)
    print(f"{'criterion':<10} selected G (average ARI, standard deviation)")
    for c, row in summary["criteria"].items():
        print(f"{c.upper():<10} {row['display']}")
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    try:
        draws = read_chain_dump(args.dump)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    diag = check_chains(draws)
    report = {
        "psrf": [float(x) for x in diag.psrf],
        "ess": [float(x) for x in diag.ess],
        "passed": diag.passed,
        "chains": int(draws.shape[0]),
        "draws_per_chain": int(draws.shape[1]),
    }
    text = json.dumps(report, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK if diag.passed else EXIT_FIT


def _cmd_heatmap(args) -> int:
    tensor = load_counts(args.input, args.r, args.p)
    ids, labels = read_labels(args.labels)
    if list(ids) != list(tensor.unit_ids):
        index = {u: j for j, u in enumerate(ids)}
        missing = [u for u in tensor.unit_ids if u not in index]
        if missing:
            raise DataError(f"labels file lacks unit {missing[0]!r}")
        labels = np.array([labels[index[u]] for u in tensor.unit_ids])
    for path in emit_heatmaps(tensor, labels, args.out):
        print(path)
    return EXIT_OK


COMMANDS = {
    "fit": _cmd_fit,
    "simulate": _cmd_simulate,
    "diagnose": _cmd_diagnose,
    "heatmap": _cmd_heatmap,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SpecError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitFailure, MVPLNError) as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
