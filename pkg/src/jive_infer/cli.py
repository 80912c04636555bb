"""Command-line front end.

Commands: ``test`` (statistics on a CSV dataset), ``simulate`` (size tables),
``power`` (power curves) and ``validate`` (input checks). Exit codes are 0 on
success, 1 on internal or numerical failure and 2 on user or spec errors;
errors are written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    Schema,
    load_dataset,
    restriction_from_json,
    validate_assumption1,
)
from .errors import JiveInferError, ParseError, UsageError, UserInputError
from .estimators import ObjectiveMoments, estimate_restricted, estimate_unrestricted
from .inference import Family, Reference, ar_test, full_vector_tests, linear_restriction_tests
from .kernels import Method, build_kernels
from .simulation import (
    ALL_METHODS,
    SIZE_FAMILIES,
    TABLE_PRESETS,
    RejectionTable,
    default_grid,
    run_power_curve,
    run_size_experiment,
    spec_from_mapping,
)
from .variance import VarianceMode

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2
ALL_FAMILIES = tuple(f for f in Family if f is not Family.AR)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _json_arg(text: str, what: str):
    """Inline JSON or the path of a JSON file."""
    text = text.strip()
    if text[:1] in "{[":
        source = text
    else:
        path = Path(text)
        if not path.exists():
            raise UsageError(f"{what} file not found: {text}")
        source = path.read_text()
    try:
        return json.loads(source)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{what} is not valid JSON: {exc.msg}", row=exc.lineno,
                         column=exc.colno) from None


def _csv_list(text: str | None, parse, default):
    if text is None:
        return tuple(default)
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError("empty list")
    try:
        return tuple(parse(t) for t in items)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _floats(text: str, what: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"{what} must be comma-separated numbers, got {text!r}") from None


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.4f}" if abs(x) < 1e4 else f"{x:.4e}"


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _warn_json(messages):
    for m in messages:
        sys.stderr.write(json.dumps({"warning": m}) + "\n")


# --------------------------------------------------------------------------
# test

def _load(args):
    if not args.data:
        raise UsageError("--data is required")
    if not args.schema:
        raise UsageError("--schema is required")
    schema = Schema.from_mapping(_json_arg(args.schema, "schema"))
    return load_dataset(args.data, schema)


def _hypothesis(args, g):
    if (args.null is None) == (args.restriction is None):
        raise UsageError("give exactly one of --null and --restriction")
    if args.null is not None:
        beta0 = np.array(_floats(args.null, "--null"))
        if beta0.shape != (g,):
            raise UsageError(f"--null needs {g} values, got {beta0.size}")
        return beta0, None
    R = restriction_from_json(_json_arg(args.restriction, "restriction"))
    if R.A.shape[1] != g:
        raise UsageError(f"restriction has {R.A.shape[1]} columns, model has {g}")
    return None, R


def _families(args):
    fams = _csv_list(args.families, Family.parse, ALL_FAMILIES)
    fams = tuple(f for f in fams if f is not Family.AR)
    if args.reference is not None:
        ref = Reference.parse(args.reference)
        fams = tuple(f for f in fams if f.default_reference is ref)
        if not fams:
            raise UsageError(f"no requested family is referred to {ref.value}")
    return fams


def _test_method(kern, data, beta0, R, fams, mode, one_sided):
    y, X = data.y, data.X
    entry = {"method": kern.method.value, "reports": [], "failures": {}}
    try:
        mom = ObjectiveMoments(kern, y, X)
        est = estimate_unrestricted(kern, y, X, moments=mom)
    except JiveInferError as exc:
        entry["failures"]["estimation"] = f"{type(exc).__name__}: {exc}"
        return entry
    entry["beta_hat"] = [float(b) for b in est.beta_hat]
    failures: dict = {}
    if R is None:
        reps = full_vector_tests(kern, y, X, beta0, fams, mode, moments=mom,
                                 unrestricted=est, failures=failures)
    else:
        try:
            rest = estimate_restricted(kern, y, X, R, moments=mom)
        except JiveInferError as exc:
            entry["failures"]["restricted estimation"] = f"{type(exc).__name__}: {exc}"
            return entry
        entry["beta_tilde"] = [float(b) for b in rest.beta_tilde]
        reps = linear_restriction_tests(kern, y, X, R, fams, mode, moments=mom,
                                        unrestricted=est, restricted=rest,
                                        failures=failures)
    entry["reports"] = [r.to_json() for r in reps]
    if R is None and not kern.is_ratio:
        for am in ("naive", "crossfit"):
            try:
                rep = ar_test(kern, data, beta0, am, one_sided=one_sided)
            except JiveInferError as exc:
                failures[f"AR_{am}"] = exc
                continue
            entry["reports"].append(rep.to_json())
    entry["failures"].update({(k.value if isinstance(k, Family) else k):
                              f"{type(v).__name__}: {v}" for k, v in failures.items()})
    return entry


def _test_table(result) -> str:
    lines = [f"hypothesis: {result['hypothesis']}  ({result['null']})",
             f"n={result['n']} g={result['g']} k={result['k']} "
             f"variance={result['variance_mode']}", ""]
    for e in result["methods"]:
        est = e.get("beta_hat")
        lines.append(f"{e['method']}: beta_hat = "
                     + ("[" + ", ".join(_fmt(b) for b in est) + "]" if est else "failed"))
        if "beta_tilde" in e:
            lines.append(" " * len(e["method"]) + "  beta_tilde = ["
                         + ", ".join(_fmt(b) for b in e["beta_tilde"]) + "]")
        if e["reports"]:
            lines.append(f"  {'family':<8}{'mode':<10}{'statistic':>12}  {'reference':<12}"
                         f"{'p-value':>8}")
            for r in e["reports"]:
                lines.append(f"  {r['family']:<8}{r['variance_mode']:<10}"
                             f"{_fmt(r['statistic']):>12}  {r['reference']:<12}"
                             f"{_fmt(r['p_value']):>8}")
        for f, msg in e["failures"].items():
            lines.append(f"  {f}: failed ({msg})")
        lines.append("")
    return "\n".join(lines)


def _test_csv(result) -> str:
    import csv
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "family", "variance_mode", "statistic", "reference", "df",
                "weights", "p_value"])
    for e in result["methods"]:
        for r in e["reports"]:
            w.writerow([e["method"], r["family"], r["variance_mode"], repr(r["statistic"]),
                        r["reference"], r.get("df", ""),
                        " ".join(repr(x) for x in r.get("weights", [])),
                        repr(r["p_value"])])
    return buf.getvalue()


def cmd_test(args) -> int:
    data = _load(args)
    beta0, R = _hypothesis(args, data.g)
    methods = _csv_list(args.methods, Method.parse, ALL_METHODS)
    fams = _families(args)
    mode = VarianceMode.parse(args.variance)
    kernels = build_kernels(data.Z, methods)
    result = {
        "hypothesis": "full_vector" if R is None else "linear_restriction",
        "null": ([float(b) for b in beta0] if R is None else R.to_json()),
        "n": data.n, "g": data.g, "k": data.k,
        "variance_mode": mode.value,
        "methods": [_test_method(kernels[m], data, beta0, R, fams, mode,
                                 args.ar_one_sided) for m in methods],
    }
    fmt = args.format
    text = (json.dumps(result, indent=2, sort_keys=True) if fmt == "json"
            else _test_csv(result) if fmt == "csv" else _test_table(result))
    _emit(text, args.out)
    if args.out and fmt != "table":
        sys.stdout.write(_test_table(result) + "\n")
    failed = [e["method"] for e in result["methods"] if "beta_hat" not in e]
    if len(failed) == len(result["methods"]):
        raise _AllFailed("estimation failed for every method",
                         {e["method"]: e["failures"] for e in result["methods"]})
    return EXIT_OK


class _AllFailed(JiveInferError):
    def __init__(self, message, details):
        super().__init__(message)
        self.details = details


# --------------------------------------------------------------------------
# simulate / power

def _design_specs(args, experiment):
    if args.table:
        if experiment.get("dgp") or args.dgp:
            raise UsageError("--table cannot be combined with a design")
        try:
            return list(TABLE_PRESETS[args.table.lower()])
        except KeyError:
            raise UsageError(f"unknown table preset {args.table!r}") from None
    design = dict(experiment.get("design", {}))
    if args.dgp:
        design["dgp"] = args.dgp
    for key in ("n", "alpha", "r"):
        value = getattr(args, key)
        if value is not None:
            design[key] = value
    if "dgp" not in design:
        raise UsageError("give --table, --dgp or an experiment spec with a design")
    return [spec_from_mapping(design)]


def _experiment(args):
    exp = _json_arg(args.spec, "experiment spec") if args.spec else {}
    if not isinstance(exp, dict):
        raise UsageError("experiment spec must be a JSON object")
    known = {"design", "methods", "families", "variance_modes", "reps", "nominal", "seed",
             "grid", "ar_one_sided"}
    extra = set(exp) - known
    if extra:
        raise UsageError(f"unknown experiment spec keys: {sorted(extra)}")

    def pick(flag, key, default):
        return flag if flag is not None else exp.get(key, default)

    methods = (_csv_list(args.methods, Method.parse, ALL_METHODS) if args.methods
               else tuple(Method.parse(m) for m in exp.get("methods", ALL_METHODS)))
    families = (_csv_list(args.families, Family.parse, SIZE_FAMILIES) if args.families
                else tuple(Family.parse(f) for f in exp.get("families", SIZE_FAMILIES)))
    if args.variance:
        modes = _csv_list(args.variance, VarianceMode.parse, ())
    else:
        modes = tuple(VarianceMode.parse(v) for v in exp.get("variance_modes", ["plugin"]))
    return exp, dict(
        methods=methods,
        families=tuple(f for f in families if f is not Family.AR),
        variance_modes=modes,
        reps=pick(args.reps, "reps", None),
        nominal=float(pick(args.nominal, "nominal", 0.05)),
        seed=int(pick(args.seed, "seed", 0)),
        ar_one_sided=bool(args.ar_one_sided or exp.get("ar_one_sided", False)),
    )


def _check_common(opts):
    if not isinstance(opts["reps"], int) or opts["reps"] < 1:
        raise UsageError("--reps must be at least 1")
    if not 0.0 < opts["nominal"] < 1.0:
        raise UsageError("--nominal must lie in (0, 1)")


def _render(table: RejectionTable, fmt: str, modes) -> str:
    if fmt == "csv":
        return table.to_csv()
    if fmt == "json":
        return table.to_json()
    blocks = []
    for m in modes:
        if len(modes) > 1:
            blocks.append(f"variance mode: {m.value}")
        blocks.append(table.format_table(variance_mode=m.value))
        blocks.append("")
    return "\n".join(blocks)


def _finish_sim(args, table, modes) -> int:
    _emit(_render(table, args.format, modes), args.out)
    if args.out and args.format != "table":
        sys.stdout.write(_render(table, "table", modes) + "\n")
    _warn_json(table.warnings)
    return EXIT_OK


def cmd_simulate(args) -> int:
    exp, opts = _experiment(args)
    if opts["reps"] is None:
        opts["reps"] = 5000
    _check_common(opts)
    specs = _design_specs(args, exp)
    table = RejectionTable()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for spec in specs:
            table.extend(run_size_experiment(
                spec, opts["methods"], opts["families"], opts["reps"], opts["nominal"],
                opts["seed"], args.workers, variance_modes=opts["variance_modes"],
                ar_one_sided=opts["ar_one_sided"]))
    return _finish_sim(args, table, opts["variance_modes"])


def cmd_power(args) -> int:
    exp, opts = _experiment(args)
    if opts["reps"] is None:
        opts["reps"] = 1000
    _check_common(opts)
    specs = _design_specs(args, exp)
    table = RejectionTable()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for spec in specs:
            if args.grid:
                grid = _floats(args.grid, "--grid")
            elif "grid" in exp:
                grid = tuple(float(x) for x in exp["grid"])
            else:
                grid = default_grid(spec)
            if not grid:
                raise UsageError("power grid is empty")
            table.extend(run_power_curve(
                spec, grid, opts["methods"], opts["families"], opts["reps"],
                opts["nominal"], opts["seed"], args.workers,
                variance_modes=opts["variance_modes"], ar_one_sided=opts["ar_one_sided"]))
    if args.emit_gnuplot:
        Path(args.emit_gnuplot).write_text(table.to_gnuplot())
    return _finish_sim(args, table, opts["variance_modes"])


# --------------------------------------------------------------------------
# validate

def cmd_validate(args) -> int:
    if args.spec or args.table or args.dgp:
        exp, opts = _experiment(args)
        specs = _design_specs(args, exp)
        out = {"designs": [{"dgp": s.name, "n": s.n, "alpha": s.alpha, "r": s.r,
                            "k": s.k, "g": s.g} for s in specs],
               "methods": [m.value for m in opts["methods"]],
               "families": [f.value for f in opts["families"]],
               "variance_modes": [v.value for v in opts["variance_modes"]],
               "valid": True}
    else:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            data = _load(args)
            kernels = build_kernels(data.Z, [Method.HLIM])
            lev = validate_assumption1(kernels[Method.HLIM].P_diag, args.threshold)
        out = {"n": data.n, "g": data.g, "k": data.k,
               "max_leverage": lev.max_leverage, "leverage_threshold": lev.threshold,
               "flagged_observations": list(lev.flagged),
               "warnings": [str(w.message) for w in caught],
               "valid": True}
        if args.null is not None or args.restriction is not None:
            beta0, R = _hypothesis(args, data.g)
            out["null"] = [float(b) for b in beta0] if R is None else R.to_json()
    _emit(json.dumps(out, indent=2, sort_keys=True), args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jive-infer",
                description="Jackknife IV inference with many weak instruments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(q):
        q.add_argument("--methods", help="comma list of SJIVE,HLIM,JIVE1,JIVE2")
        q.add_argument("--families", help="comma list, e.g. D,LM,W1,W1star")
        q.add_argument("--out", help="write the output here instead of stdout")
        q.add_argument("--format", choices=("table", "csv", "json"), default="table")
        q.add_argument("--ar-one-sided", action="store_true",
                       help="one-sided (upper tail) AR p-values")

    def data_args(q):
        q.add_argument("--data", help="dataset CSV with a header row")
        q.add_argument("--schema", help="column roles, JSON file or inline JSON")
        q.add_argument("--null", help="full null vector, comma separated")
        q.add_argument("--restriction", help='{"A": [[...]], "a": [...]}, file or inline')

    def sim_args(q):
        q.add_argument("--spec", help="experiment spec, JSON file or inline JSON")
        q.add_argument("--table", help="preset: dgp1 or dgp2")
        q.add_argument("--dgp", choices=("dgp1", "dgp2"))
        q.add_argument("--n", type=int)
        q.add_argument("--alpha", type=float)
        q.add_argument("--r", type=float)
        q.add_argument("--variance", help="comma list of plugin,crossfit")
        q.add_argument("--reps", type=int)
        q.add_argument("--nominal", type=float)
        q.add_argument("--seed", type=int)
        q.add_argument("--workers", type=int,
                       help="worker processes (default: JIVE_INFER_THREADS or 1)")

    t = sub.add_parser("test", help="run tests on a dataset")
    data_args(t)
    common(t)
    t.add_argument("--variance", choices=("plugin", "crossfit"), default="plugin")
    t.add_argument("--reference", choices=("chibar", "chisq"),
                   help="keep only families referred to this law")
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", help="size experiment")
    sim_args(s)
    common(s)
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("power", help="power curve")
    sim_args(w)
    common(w)
    w.add_argument("--grid", help="comma-separated null values")
    w.add_argument("--emit-gnuplot", help="write long-format power grids to this file")
    w.set_defaults(func=cmd_power)

    v = sub.add_parser("validate", help="check a dataset or an experiment spec")
    data_args(v)
    sim_args(v)
    common(v)
    v.add_argument("--threshold", type=float, default=0.99,
                   help="leverage threshold for the projection diagonal")
    v.set_defaults(func=cmd_validate)
    return p


def _error_json(exc) -> dict:
    out = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("row", "column", "columns", "factor", "index", "details"):
        val = getattr(exc, attr, None)
        if val not in (None, []):
            out[attr] = val
    return out


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required: test, simulate, power or validate")
        return args.func(args)
    except UserInputError as exc:
        sys.stderr.write(json.dumps(_error_json(exc), sort_keys=True) + "\n")
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        sys.stderr.write(json.dumps(_error_json(exc), sort_keys=True, default=str) + "\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
