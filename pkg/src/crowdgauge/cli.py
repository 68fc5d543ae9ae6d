"""Command-line interface.

Subcommands: `evaluate` (binary error-rate intervals), `evaluate-kary`
(response-probability matrix intervals for worker triples), `simulate`
(synthetic coverage/size experiments), and `prune` (majority-vote spammer
removal). Exit codes: 0 success (possibly with per-worker failure records),
1 usage error, 2 input parse error, 3 estimator hard failure.
"""

from __future__ import annotations

import argparse
import ast
import json
import math
import os
import sys
from itertools import combinations
from pathlib import Path
from typing import Callable

from .binary import evaluate_all
from .dataset import (
    GoldLabels,
    ResponseDataset,
    load_gold,
    load_responses,
    prune_spammers,
    reduce_arity,
    write_responses_csv,
)
from .errors import (
    ConvergenceError,
    CrowdGaugeError,
    EmptyDatasetError,
    EstimationFailure,
    GoldLabelError,
    InsufficientConnectivityError,
    InsufficientOverlapError,
    LabelDomainError,
    ResponseConflictError,
    ResponseParseError,
    SingularMatrixError,
    UnknownWorkerError,
)
from .kary import build_counts, kary_confidence_intervals, JACOBIAN_EPS_DEFAULT
from .simulate import (
    CONFIDENCE_GRID,
    DENSITY_GRID,
    ExperimentResult,
    SimConfig,
    compare_weighting,
    result_to_csv,
    result_to_json,
    run_coverage_experiment,
    run_size_experiment,
)

_PARSE_ERRORS = (ResponseParseError, ResponseConflictError, EmptyDatasetError,
                 LabelDomainError, GoldLabelError, UnknownWorkerError)
_ESTIMATOR_ERRORS = (InsufficientConnectivityError, InsufficientOverlapError,
                     EstimationFailure, SingularMatrixError, ConvergenceError)


class UsageError(Exception):
    """Bad flags or arguments; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); route through our codes
        raise UsageError(message)


def _round9(x: float) -> float:
    return float(format(float(x), ".9g"))


def _atomic_write(path: Path, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _read_input(path_str: str) -> tuple[str, str]:
    """Return (text, inferred format) for an input path."""
    path = Path(path_str)
    fmt = "json" if path.suffix.lower() == ".json" else "csv"
    try:
        return path.read_text(encoding="utf-8"), fmt
    except OSError as exc:
        raise UsageError(f"cannot read {path_str}: {exc}") from exc


def _load_dataset(args) -> ResponseDataset:
    text, inferred = _read_input(args.input)
    fmt = getattr(args, "format", None) or inferred
    ds = load_responses(text, fmt)
    if getattr(args, "map", None):
        ds = reduce_arity(ds, parse_label_map(args.map))
    return ds


def _check_confidence(value: float) -> float:
    if not 0.0 < value < 1.0:
        raise UsageError(f"--confidence must lie in (0, 1), got {value}")
    return value


# -- label-map expressions ---------------------------------------------------

_ALLOWED_BINOPS = {ast.Add, ast.Sub, ast.Mult, ast.Div, ast.FloorDiv, ast.Mod}
_ALLOWED_CALLS = {"floor": math.floor, "ceil": math.ceil, "round": round,
                  "abs": abs, "min": min, "max": max}
_VARIADIC_CALLS = {"min", "max"}


def _call_arity_ok(name: str, nargs: int) -> bool:
    return nargs >= 2 if name in _VARIADIC_CALLS else nargs == 1


def parse_label_map(expr: str) -> Callable[[int], int]:
    """Compile a label-map expression like "g->floor((g-1)/2)+1".

    The left side names the label variable; the right side may use integer
    and float literals, + - * / // %, unary minus, parentheses,
    floor/ceil/round/abs of one argument, and min/max of two or more. The
    result must be integral for every applied label.
    """
    head, sep, body = expr.partition("->")
    if not sep:
        raise UsageError(f"label map {expr!r} must look like 'g->expression'")
    var = head.strip()
    if not var.isidentifier():
        raise UsageError(f"label-map variable {var!r} is not an identifier")
    try:
        tree = ast.parse(body.strip(), mode="eval")
    except SyntaxError as exc:
        raise UsageError(f"invalid label-map expression: {exc}") from exc

    def validate(node: ast.AST) -> None:
        if isinstance(node, ast.Expression):
            validate(node.body)
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            pass
        elif isinstance(node, ast.Name):
            if node.id != var:
                raise UsageError(f"unknown name {node.id!r} in label map")
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            validate(node.operand)
        elif isinstance(node, ast.BinOp) and type(node.op) in _ALLOWED_BINOPS:
            validate(node.left)
            validate(node.right)
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in _ALLOWED_CALLS \
                and _call_arity_ok(node.func.id, len(node.args)) \
                and not node.keywords:
            for arg in node.args:
                validate(arg)
        else:
            raise UsageError(
                f"unsupported construct in label map: {ast.dump(node)}")

    validate(tree)

    def evaluate(node: ast.AST, value: int):
        if isinstance(node, ast.Expression):
            return evaluate(node.body, value)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return node.value
        if isinstance(node, ast.Name):
            if node.id != var:
                raise UsageError(f"unknown name {node.id!r} in label map")
            return value
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            operand = evaluate(node.operand, value)
            return -operand if isinstance(node.op, ast.USub) else operand
        if isinstance(node, ast.BinOp) and type(node.op) in _ALLOWED_BINOPS:
            left = evaluate(node.left, value)
            right = evaluate(node.right, value)
            ops = {ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b,
                   ast.Mult: lambda a, b: a * b, ast.Div: lambda a, b: a / b,
                   ast.FloorDiv: lambda a, b: a // b, ast.Mod: lambda a, b: a % b}
            try:
                return ops[type(node.op)](left, right)
            except ZeroDivisionError:
                raise UsageError("label map divides by zero") from None
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in _ALLOWED_CALLS \
                and _call_arity_ok(node.func.id, len(node.args)) \
                and not node.keywords:
            return _ALLOWED_CALLS[node.func.id](
                *(evaluate(arg, value) for arg in node.args))
        raise UsageError(f"unsupported construct in label map: {ast.dump(node)}")

    def mapper(label: int) -> int:
        result = evaluate(tree, label)
        if isinstance(result, float):
            if not result.is_integer():
                raise LabelDomainError(
                    f"label map sends {label} to non-integer {result}")
            result = int(result)
        return int(result)

    return mapper


# -- evaluate ----------------------------------------------------------------


def _proxy_error_rate(ds: ResponseDataset, worker: str, gold: GoldLabels
                      ) -> float | None:
    w = ds.worker_index(worker)
    disagreements = 0
    graded = 0
    for task, label in gold.labels.items():
        response = ds.matrix[w, ds.task_index(task)]
        if response:
            graded += 1
            disagreements += int(response != label)
    if graded == 0:
        return None
    return disagreements / graded


def cmd_evaluate(args) -> int:
    ds = _load_dataset(args)
    if ds.arity != 2:
        raise UsageError(
            f"evaluate expects binary responses, got arity {ds.arity}; "
            "collapse labels first with --map")
    confidence = _check_confidence(args.confidence)
    gold = None
    if args.gold:
        gold = load_gold(_read_input(args.gold)[0])
        gold.validate_for(ds)
    reports = evaluate_all(ds, confidence, args.weighting, args.min_overlap)
    records = []
    for report in reports:
        record: dict[str, object] = {
            "worker": report.worker,
            "failed": report.failed,
            "confidence": confidence,
            "triples_used": report.triples_used,
            "triples_failed": report.triples_failed,
            "method": report.method,
        }
        if report.failed:
            record["reason"] = report.interval.reason
        else:
            record["estimate"] = _round9(report.interval.estimate)
            record["lower"] = _round9(report.interval.lower)
            record["upper"] = _round9(report.interval.upper)
            record["weights"] = [_round9(w) for w in report.weights]
            if report.clamped:
                record["clamped"] = True
            if report.weight_fallback:
                record["weight_fallback"] = True
        if gold is not None:
            proxy = _proxy_error_rate(ds, report.worker, gold)
            record["proxy_error_rate"] = None if proxy is None else _round9(proxy)
            record["covered"] = (None if proxy is None or report.failed
                                 else report.interval.covers(proxy))
        records.append(record)
    _atomic_write(Path(args.output), json.dumps(records, indent=2) + "\n")
    failed = sum(1 for r in records if r["failed"])
    print(f"wrote {args.output}: {len(records)} workers, {failed} failed")
    return 0


# -- evaluate-kary -----------------------------------------------------------


def _interval_cell(ci) -> dict[str, float]:
    return {"estimate": _round9(ci.estimate),
            "lower": _round9(ci.lower),
            "upper": _round9(ci.upper)}


def cmd_evaluate_kary(args) -> int:
    ds = _load_dataset(args)
    confidence = _check_confidence(args.confidence)
    if args.epsilon <= 0:
        raise UsageError(f"--epsilon must be positive, got {args.epsilon}")
    if args.workers:
        ids = [w.strip() for w in args.workers.split(",")]
        if len(ids) != 3 or len(set(ids)) != 3:
            raise UsageError("--workers needs exactly three distinct ids")
        for w in ids:
            ds.worker_index(w)  # raises UnknownWorkerError -> exit 2
        triples = [tuple(ids)]
    elif args.auto_triples is not None:
        if args.auto_triples < 1:
            raise UsageError("--auto-triples needs a threshold of at least 1")
        view = ds.stats_view
        triples = [t for t in combinations(ds.workers, 3)
                   if view.c3(*t) >= args.auto_triples]
        if not triples:
            raise InsufficientConnectivityError(
                f"no worker triple shares {args.auto_triples} or more tasks")
    else:
        raise UsageError("one of --workers or --auto-triples is required")
    records = []
    for triple in triples:
        counts = build_counts(ds, triple)
        record: dict[str, object] = {"workers": list(triple)}
        try:
            report = kary_confidence_intervals(counts, confidence, args.epsilon)
        except InsufficientOverlapError as exc:
            record.update(failed=True, reason=str(exc))
            records.append(record)
            continue
        record["failed"] = report.failed
        if report.failed:
            record["reason"] = report.reason
        else:
            record["selectivity"] = [_round9(s) for s in report.selectivity]
            record["matrices"] = [
                {"worker": triple[w],
                 "rows": [[_interval_cell(ci) for ci in row]
                          for row in report.intervals[w]]}
                for w in range(3)]
            diag = report.diagnostics
            record["diagnostics"] = {
                "slice_failures": [list(f) for f in diag.slice_failures],
                "max_imag": _round9(diag.max_imag),
                "rows_permuted": diag.rows_permuted,
                "rows_sign_fixed": diag.rows_sign_fixed,
                "clamped": diag.clamped,
            }
        records.append(record)
    payload = {"arity": ds.arity, "confidence": confidence, "triples": records}
    _atomic_write(Path(args.output), json.dumps(payload, indent=2) + "\n")
    failed = sum(1 for r in records if r.get("failed"))
    print(f"wrote {args.output}: {len(records)} triples, {failed} failed")
    return 0


# -- simulate ----------------------------------------------------------------

_EXPERIMENTS = ("coverage", "size-vs-density", "weight-comparison",
                "kary-coverage", "kary-size")

_EXPERIMENT_DEFAULTS: dict[str, dict[str, object]] = {
    "coverage": {"n": 100, "m": 7, "d": 0.8, "reps": 500, "arity": 2},
    "size-vs-density": {"n": 300, "m": 7, "d": 0.8, "reps": 500, "arity": 2,
                        "confidence": 0.8},
    "weight-comparison": {"n": 100, "m": 7, "d": "ramp", "reps": 500, "arity": 2},
    "kary-coverage": {"n": 1000, "m": 3, "d": 1.0, "reps": 500, "arity": 2},
    "kary-size": {"n": 500, "m": 3, "d": 0.8, "reps": 150, "arity": 3,
                  "confidence": 0.8},
}


def _parse_density(raw) -> float | str:
    if raw is None or raw == "ramp":
        return raw
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise UsageError(f"--d must be a number or 'ramp', got {raw!r}") from None


def cmd_simulate(args) -> int:
    defaults = _EXPERIMENT_DEFAULTS[args.experiment]
    n = args.n if args.n is not None else defaults["n"]
    m = args.m if args.m is not None else defaults["m"]
    density = _parse_density(args.d if args.d is not None else defaults["d"])
    if args.reps is not None:
        reps = args.reps
    elif args.fast:
        reps = 100
    else:
        reps = defaults["reps"]
    arity = args.arity if args.arity is not None else defaults["arity"]
    confidence = args.confidence if args.confidence is not None \
        else defaults.get("confidence")
    if confidence is not None:
        _check_confidence(confidence)
    kary = args.experiment.startswith("kary")
    fixture = f"arity{arity}" if kary else None
    grid = (confidence,) if confidence is not None else CONFIDENCE_GRID
    try:
        cfg = SimConfig(n=int(n), m=int(m), arity=int(arity),
                        confidence_grid=grid, density=density,
                        replications=int(reps), seed=int(args.seed),
                        weighting=args.weighting, fixture=fixture)
        if args.experiment in ("coverage", "kary-coverage"):
            result = run_coverage_experiment(cfg)
        elif args.experiment == "size-vs-density":
            result = run_size_experiment(cfg, densities=DENSITY_GRID)
        elif args.experiment == "kary-size":
            result = run_size_experiment(cfg, arities=(2, 3, 4))
        else:
            result = compare_weighting(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _write_result(result, Path(args.output))
    print(f"wrote {args.output}: {len(result.rows)} rows "
          f"({result.experiment}, seed {args.seed})")
    return 0


def _write_result(result: ExperimentResult, path: Path) -> None:
    suffix = path.suffix.lower()
    if suffix == ".json":
        _atomic_write(path, result_to_json(result))
    elif suffix == ".csv":
        _atomic_write(path, result_to_csv(result))
    else:
        raise UsageError(f"--output must end in .csv or .json, got {path.name!r}")


# -- prune -------------------------------------------------------------------


def cmd_prune(args) -> int:
    ds = _load_dataset(args)
    if ds.arity != 2:
        raise UsageError(
            f"prune expects binary responses, got arity {ds.arity}; "
            "collapse labels first with --map")
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError(f"--threshold must lie in [0, 1], got {args.threshold}")
    pruned, removed = prune_spammers(ds, args.threshold)
    _atomic_write(Path(args.output), write_responses_csv(pruned))
    removed_path = Path(args.removed) if args.removed \
        else Path(args.output + ".removed.json")
    payload = [{"worker": r.worker,
                "disagreement_rate": _round9(r.disagreement_rate)}
               for r in removed]
    _atomic_write(removed_path, json.dumps(payload, indent=2) + "\n")
    print(f"wrote {args.output}: kept {pruned.num_workers} of {ds.num_workers} "
          f"workers, removed {len(removed)}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crowdgauge",
                     description="Error-rate and response-probability intervals "
                                 "for crowd workers, from agreement alone.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", required=True, help="response file (CSV or JSON)")
    common.add_argument("--output", required=True, help="output file path")
    common.add_argument("--format", choices=("csv", "json"),
                        help="input format (default: by file extension)")
    common.add_argument("--map", help="label-map expression, e.g. 'g->floor((g-1)/2)+1'")

    p_eval = sub.add_parser("evaluate", parents=[common],
                            help="per-worker binary error-rate intervals")
    p_eval.add_argument("--confidence", type=float, default=0.95)
    p_eval.add_argument("--weighting", choices=("uniform", "optimal"),
                        default="optimal")
    p_eval.add_argument("--min-overlap", type=int, default=1,
                        help="minimum shared tasks per pair when forming triples")
    p_eval.add_argument("--gold", help="gold-label CSV for proxy error rates")
    p_eval.set_defaults(func=cmd_evaluate)

    p_kary = sub.add_parser("evaluate-kary", parents=[common],
                            help="response-probability matrix intervals for triples")
    p_kary.add_argument("--confidence", type=float, default=0.95)
    p_kary.add_argument("--workers", help="three comma-separated worker ids")
    p_kary.add_argument("--auto-triples", type=int, default=None, metavar="T",
                        help="evaluate every triple sharing at least T tasks")
    p_kary.add_argument("--epsilon", type=float, default=JACOBIAN_EPS_DEFAULT,
                        help="finite-difference step for the Jacobian")
    p_kary.set_defaults(func=cmd_evaluate_kary)

    p_sim = sub.add_parser("simulate", help="synthetic interval-quality experiments")
    p_sim.add_argument("experiment", choices=_EXPERIMENTS)
    p_sim.add_argument("--output", required=True,
                       help="result path (.csv or .json)")
    p_sim.add_argument("--n", type=int, help="tasks per replication")
    p_sim.add_argument("--m", type=int, help="workers per replication")
    p_sim.add_argument("--d", help="attempt density (number or 'ramp')")
    p_sim.add_argument("--reps", type=int, help="replications")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--confidence", type=float,
                       help="single confidence level (size experiments)")
    p_sim.add_argument("--arity", type=int, help="task arity (k-ary experiments)")
    p_sim.add_argument("--weighting", choices=("uniform", "optimal"),
                       default="optimal")
    p_sim.add_argument("--fast", action="store_true",
                       help="cut replications to 100 unless --reps is given")
    p_sim.set_defaults(func=cmd_simulate)

    p_prune = sub.add_parser("prune", parents=[common],
                             help="remove majority-vote spammers (binary)")
    p_prune.add_argument("--threshold", type=float, default=0.4,
                         help="disagreement rate above which a worker is dropped")
    p_prune.add_argument("--removed",
                         help="path for the removal JSON "
                              "(default: OUTPUT.removed.json)")
    p_prune.set_defaults(func=cmd_prune)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _PARSE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _ESTIMATOR_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CrowdGaugeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
