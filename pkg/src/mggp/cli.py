"""Command line entry point: ``mggp {preprocess,train,predict,report,selftest}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation. Log verbosity comes from the ``MGGP_LOG_LEVEL`` environment
variable (default WARNING).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .data import DataError
from .evolve import RunConfig
from .experiment import (ExperimentSpec, InvariantViolation, cmd_predict, cmd_preprocess,
                         cmd_report, cmd_train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with 'experiment' and 'run' sections")
    p.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    p.add_argument("--preset", type=int, choices=(1, 2, 3))
    p.add_argument("--drop-column", help="column removed first in preset 2")
    p.add_argument("--threshold", type=float, help="|r| cut-off for correlation filtering (default 0.9)")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--train", nargs="+", metavar="CSV", help="training flight files (concatenated)")
    p.add_argument("--validation", metavar="CSV", help="held-out validation file")
    p.add_argument("--target", help="target column name")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mggp", description="Multi-gene GP symbolic regression experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("preprocess", "clean, filter, split and normalize the data"),
                        ("train", "run repetitions of the multi-run search")):
        _experiment_flags(sub.add_parser(name, help=help_))
    p = sub.add_parser("predict", help="apply an exported model to a CSV")
    p.add_argument("model", help="model export (.txt or .json)")
    p.add_argument("data", help="CSV with the retained columns")
    p.add_argument("params", help="normalization.json from preprocess")
    p.add_argument("--out", help="output CSV (default stdout)")
    p.add_argument("--normalized", action="store_true", help="data is already normalized")
    p = sub.add_parser("report", help="formula listing, frequency table and plot data")
    p.add_argument("run_dir")
    p.add_argument("--no-charts", action="store_true")
    p = sub.add_parser("selftest", help="run built-in oracle and invariant checks")
    p.add_argument("--seed", type=int, default=0)
    return parser


def load_spec(args) -> ExperimentSpec:
    exp: dict = {}
    run: dict = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        exp = dict(doc.get("experiment", {}))
        run = dict(doc.get("run", {}))
        extra = set(doc) - {"experiment", "run"}
        if extra:
            raise UsageError(f"unknown config sections: {sorted(extra)}")
    overrides = {
        "seed": args.seed, "preset": args.preset, "drop_column": args.drop_column,
        "threshold": args.threshold, "repetitions": args.repetitions,
        "output_dir": args.out, "train_files": args.train,
        "validation_file": args.validation, "target_name": args.target,
    }
    for k, v in overrides.items():
        if v is not None:
            exp[k] = v
    fields = {f.name for f in dataclasses.fields(ExperimentSpec)} - {"config"}
    unknown = set(exp) - fields
    if unknown:
        raise UsageError(f"unknown experiment keys: {sorted(unknown)}")
    try:
        config = RunConfig.from_dict(run)
        spec = ExperimentSpec(**exp, config=config)
        spec.validate()
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    return spec


# --------------------------------------------------------------------------
# selftest

def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Quick oracle checks; each entry is (name, passed, detail)."""
    from .data import Dataset, split
    from .evolve import (RunConfig as RC, evolve_run, make_rng, pareto_front,
                         Individual, dominates)
    from .expr import (GrowthConfig, FunctionSet, evaluate, iter_nodes, parse_infix,
                       random_tree, to_infix)
    from .model import compute_metrics, fit_weights

    rng = np.random.default_rng(seed)
    results = []
    growth = GrowthConfig(n_vars=4, max_depth=5, function_set=FunctionSet.with_cos())

    def subtree_sizes(root):
        return sum(sum(1 for _ in iter_nodes(n)) for _, n, _ in iter_nodes(root))

    trees = [random_tree(growth, rng) for _ in range(200)]
    bad = sum(t.complexity != subtree_sizes(t.root) for t in trees)
    results.append(("complexity oracle", bad == 0, f"{bad} mismatches / 200"))

    mism = 0
    for t in trees:
        row = rng.uniform(0.5, 2.0, 4)
        a, b = evaluate(t, row), evaluate(parse_infix(to_infix(t, None)), row)
        if not (a == b or (math.isnan(a) and math.isnan(b))):
            mism += 1
    results.append(("print/parse round trip", mism == 0, f"{mism} mismatches / 200"))

    pm = compute_metrics([1.0, 2.0, 3.0], [2.0, 2.0, 2.0])
    ok = abs(pm.mae - 2 / 3) < 1e-12 and abs(pm.mse - 2 / 3) < 1e-12 and abs(pm.r2) < 1e-12
    results.append(("metrics worked example", ok, repr(pm)))

    X = rng.normal(size=(200, 3))
    yv = rng.normal(size=200)
    genes = [parse_infix("x1"), parse_infix("(x2*x3)"), parse_infix("exp(x1)")]
    m = fit_weights(genes, X, yv)
    A = np.column_stack([np.ones(200), X[:, 0], X[:, 1] * X[:, 2], np.exp(X[:, 0])])
    ref = np.linalg.solve(A.T @ A, A.T @ yv)
    err = float(np.max(np.abs(m.coefficients - ref)))
    results.append(("least squares vs normal equations", err <= 1e-8, f"max |d| = {err:.2e}"))

    pop = [Individual((), None, float(rng.integers(0, 20)), int(rng.integers(1, 20)))
           for _ in range(250)]
    front = pareto_front(pop)
    brute = [p for p in pop if not any(dominates((q.fitness, q.complexity), (p.fitness, p.complexity))
                                       for q in pop)]
    results.append(("pareto oracle", [id(p) for p in front] == [id(p) for p in brute],
                    f"front {len(front)} vs brute {len(brute)}"))

    Xs = rng.uniform(-2, 2, (300, 4))
    ys = 1 + 2 * Xs[:, 0] + 0.5 * Xs[:, 1] ** 2
    train, test = split(Dataset.from_arrays(Xs, ys), 0.8, rng)
    cfg = RC(population_size=60, generations=15, tournament_size=8, seed=seed)
    violations = []

    def check(gen, p):
        for ind in p:
            if not 1 <= len(ind.genes) <= cfg.max_genes or any(g.depth > cfg.max_tree_depth for g in ind.genes):
                violations.append(gen)

    res = evolve_run(cfg, train, test, make_rng(seed), check)
    best = [r.best_rmse for r in res.log]
    mono = all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    results.append(("closure and elitism", mono and not violations,
                    f"{len(res.log)} generations, final best rmse {best[-1]:.3g}"))
    return results


# --------------------------------------------------------------------------

def main(argv=None) -> int:
    level = os.environ.get("MGGP_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "preprocess":
            res = cmd_preprocess(load_spec(args))
            print(f"retained {res.report.retained_count} of {res.report.original_count} columns "
                  f"({res.train.n_inputs} inputs + target)")
        elif args.command == "train":
            spec = load_spec(args)
            cmd_train(spec)
            print((spec.out / "summary.txt").read_text(encoding="utf-8"), end="")
        elif args.command == "predict":
            text = cmd_predict(args.model, args.data, args.params, args.out, args.normalized)
            if args.out is None:
                sys.stdout.write(text)
        elif args.command == "report":
            out = cmd_report(args.run_dir, charts=not args.no_charts)
            print(out["frequency"].to_text(), end="")
        elif args.command == "selftest":
            results = run_selftest(args.seed)
            for name, ok, detail in results:
                print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
            if not all(ok for _, ok, _ in results):
                return EXIT_INVARIANT
    except UsageError as e:
        print(f"mggp: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, ValueError) as e:
        print(f"mggp: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantViolation, AssertionError) as e:
        print(f"mggp: invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
