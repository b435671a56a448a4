"""Command-line front end.

Exit codes: 0 success, 2 invalid input, 3 computation failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import testfns
from .chain import ChainState, simulate, tv_distance
from .diffusion import Provenance, ou_spec
from .model import ModelParams, Regime, exact_dist, solve_m0
from .rates import limit_spec, run_experiment
from .report import SECTIONS, ReportConfig, curve_csv, dumps, experiment_to_dict, full_report
from .reporting import jsonable
from .stein import GridConfig, SteinSolveError, solve_stein

log = logging.getLogger("cwstein")

EXIT_OK, EXIT_VALIDATION, EXIT_COMPUTATION, EXIT_IO = 0, 2, 3, 4

AUDITS = {
    "all": SECTIONS,
    "tails": ("tails",),
    "moments": ("moments",),
    "expansions": ("expansions",),
    "stein": ("stein", "closure"),
}


class ValidationError(ValueError):
    pass


class OutputError(OSError):
    pass


def parse_n_grid(text: str) -> tuple[int, ...]:
    """``"256,512,1024"`` or ``"min:max:ratio"`` (geometric, both ends inclusive)."""
    text = text.strip()
    try:
        if ":" in text:
            lo, hi, ratio = text.split(":")
            lo, hi, ratio = int(lo), int(hi), float(ratio)
            if lo < 1 or hi < lo or ratio <= 1:
                raise ValueError
            out, n = [], float(lo)
            while n <= hi * (1 + 1e-12):
                out.append(int(round(n)))
                n *= ratio
            grid = tuple(out)
        else:
            grid = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad n-grid {text!r}; use a comma list or min:max:ratio") from None
    if not grid or any(n < 1 for n in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise argparse.ArgumentTypeError(f"n-grid {text!r} must be positive and strictly increasing")
    return grid


def _fn_name(name: str) -> str:
    if name not in testfns.ALL_FUNCTIONS:
        raise argparse.ArgumentTypeError(
            f"unknown test function {name!r}; choose from {', '.join(sorted(testfns.ALL_FUNCTIONS))}"
        )
    return name


def _threads_default() -> int:
    env = os.environ.get("THREADS")
    if env:
        try:
            v = int(env)
        except ValueError:
            raise ValidationError(f"THREADS must be an integer, got {env!r}") from None
        if v < 1:
            raise ValidationError("THREADS must be >= 1")
        return v
    return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys mirror the flags (flags win)")
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"), default=None)
    common.add_argument("--threads", type=int, default=None, help="worker threads (env THREADS; flag wins)")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--beta", type=float, default=None)
    model.add_argument("--h", type=float, default=None)

    p = argparse.ArgumentParser(prog="cwstein", description="Curie-Weiss chain, diffusion limits and Stein rates")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("fixed-point", parents=[common, model], help="magnetization fixed point")

    sp = sub.add_parser("exact-dist", parents=[common, model], help="exact magnetization law")
    sp.add_argument("--n", type=int, default=None)

    sp = sub.add_parser("simulate", parents=[common, model], help="run the chain and compare with the exact law")
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--initial", type=int, default=None, help="starting up-spin count")

    sp = sub.add_parser("stein-solve", parents=[common, model], help="solve the Stein equation on a grid")
    sp.add_argument("--regime", choices=("auto", "critical", "supercritical", "ou"), default=None)
    sp.add_argument("--fn", type=_fn_name, default=None)
    sp.add_argument("--source", choices=[p.value for p in (Provenance.EXTRACTED, Provenance.PRINTED)], default=None)
    sp.add_argument("--tol", type=float, default=None)
    sp.add_argument("--dx", type=float, default=None)

    sp = sub.add_parser("rate-sweep", parents=[common, model], help="Delta(n) curve and fitted slope")
    sp.add_argument("--n-grid", type=parse_n_grid, default=None)
    sp.add_argument("--fn", type=_fn_name, default=None)
    sp.add_argument("--source", choices=[p.value for p in (Provenance.EXTRACTED, Provenance.PRINTED)], default=None)
    sp.add_argument("--gap", action="store_true", default=None, help="also compute generator gaps")
    sp.add_argument("--seed", type=int, default=None, help="accepted for uniformity; the sweep is exact")

    sp = sub.add_parser("audit", parents=[common, model], help="run audits and emit the report")
    sp.add_argument("which", choices=tuple(AUDITS))
    sp.add_argument("--n", type=int, default=None, help="restrict size-indexed audits to one n")
    sp.add_argument("--n-grid", type=parse_n_grid, default=None)
    sp.add_argument("--tol", type=float, default=None)
    sp.add_argument("--seed", type=int, default=None, help="accepted for uniformity; audits are exact")
    sp.add_argument("--strict", action="store_true", default=None, help="exit 3 if any audit fails")
    return p


DEFAULTS = {
    "beta": None,
    "h": 0.0,
    "n": None,
    "steps": 100_000,
    "seed": 0,
    "initial": None,
    "regime": "auto",
    "fn": "tanh",
    "source": "extracted",
    "tol": 1e-7,
    "dx": 1.0 / 64,
    "n_grid": tuple(2**j for j in range(8, 17)),
    "gap": False,
    "strict": False,
    "format": None,
}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional JSON config and flags (flags win)."""
    opts = dict(DEFAULTS)
    cfg_file = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg_file = json.load(fh)
        except OSError as exc:
            raise OutputError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(cfg_file, dict):
            raise ValidationError("config file must hold a JSON object")
        cfg_file = {k.replace("-", "_"): v for k, v in cfg_file.items()}
        if isinstance(cfg_file.get("n_grid"), str):
            try:
                cfg_file["n_grid"] = parse_n_grid(cfg_file["n_grid"])
            except argparse.ArgumentTypeError as exc:
                raise ValidationError(str(exc)) from None
        opts.update({k: v for k, v in cfg_file.items() if k in DEFAULTS or k == "threads"})
    for k, v in vars(args).items():
        if v is not None:
            opts[k] = v
    opts["report_overrides"] = {k: v for k, v in cfg_file.items() if k not in DEFAULTS and k != "threads"}
    if opts.get("threads") is None:
        opts["threads"] = _threads_default()
    if opts["threads"] < 1:
        raise ValidationError("--threads must be >= 1")
    if opts["tol"] is not None and not opts["tol"] > 0:
        raise ValidationError("--tol must be positive")
    return opts


def _require_params(opts, need_n: bool = True) -> ModelParams:
    if opts["beta"] is None:
        raise ValidationError("--beta is required")
    if need_n and opts["n"] is None:
        raise ValidationError("--n is required")
    try:
        return ModelParams(opts["n"] if need_n else 1, float(opts["beta"]), float(opts["h"]))
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _regime(beta: float, h: float) -> Regime:
    try:
        return Regime.classify(beta, h)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _write(opts, text: str):
    out = opts.get("out")
    if not out:
        sys.stdout.write(text)
        return
    try:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OutputError(f"cannot write {out}: {exc}") from exc


def _table(rows: list[dict], columns: Sequence[str], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(jsonable(rows), indent=2, allow_nan=False) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def cmd_fixed_point(opts) -> int:
    params = _require_params(opts, need_n=False)
    m0 = solve_m0(params.beta, params.h)
    resid = abs(m0 - math.tanh(params.beta * (m0 + params.h)))
    rows = [{"beta": params.beta, "h": params.h, "m0": m0, "residual": resid}]
    if (opts["format"] or "text") == "text" and not opts.get("out"):
        print(f"m0 = {m0!r}\nresidual = {resid:.3e}")
    else:
        _write(opts, _table(rows, ("beta", "h", "m0", "residual"), opts["format"] or "csv"))
    return EXIT_OK


def cmd_exact_dist(opts) -> int:
    params = _require_params(opts)
    dist = exact_dist(params)
    rows = [{"k": int(k), "m": float(m), "probability": float(p)} for k, m, p in zip(dist.k, dist.m, dist.probs)]
    _write(opts, _table(rows, ("k", "m", "probability"), opts["format"] or "csv"))
    return EXIT_OK


def cmd_simulate(opts) -> int:
    params = _require_params(opts)
    if opts["steps"] < 0:
        raise ValidationError("--steps must be >= 0")
    init = opts["initial"]
    if init is not None and not 0 <= init <= params.n:
        raise ValidationError(f"--initial must lie in [0, {params.n}]")
    summary = simulate(params, opts["steps"], opts["seed"], initial=None if init is None else ChainState(init, params.n))
    exact = exact_dist(params).probs
    freq = summary.frequencies
    rows = [
        {"k": k, "m": (2 * k - params.n) / params.n, "count": int(c), "frequency": float(f), "exact": float(p)}
        for k, (c, f, p) in enumerate(zip(summary.counts, freq, exact))
    ]
    _write(opts, _table(rows, ("k", "m", "count", "frequency", "exact"), opts["format"] or "csv"))
    print(f"tv_distance = {tv_distance(freq, exact):.6g}", file=sys.stderr)
    return EXIT_OK


def _stein_spec(opts):
    regime = opts["regime"]
    if regime == "ou":
        return ou_spec(2.0, -1.0, label="OU(a=2, b=-x)")
    if opts["beta"] is None:
        raise ValidationError("--beta is required unless --regime ou")
    params = _require_params(opts, need_n=False)
    beta, h = params.beta, params.h
    actual = _regime(beta, h)
    if regime != "auto" and Regime(regime) is not actual:
        raise ValidationError(f"(beta={beta}, h={h}) is {actual.value}, not {regime}")
    return limit_spec(beta, h, opts["source"])


def cmd_stein_solve(opts) -> int:
    spec = _stein_spec(opts)
    fn = testfns.get(opts["fn"])
    if not fn.bounded and opts["regime"] != "ou":
        raise ValidationError(
            f"test function {fn.name!r} is unbounded (allowed only with --regime ou); "
            f"bounded family: {', '.join(testfns.FAMILY)}"
        )
    if opts["dx"] <= 0:
        raise ValidationError("--dx must be positive")
    sol = solve_stein(spec, fn, GridConfig(dx=opts["dx"], tol=opts["tol"]), allow_unbounded=not fn.bounded)
    fppp = sol.f_triple_prime
    rows = [
        {
            "x": float(x),
            "f": float(sol.f[i]),
            "f_prime": float(sol.f_prime[i]),
            "f_double_prime": float(sol.f_double_prime[i]),
            "f_triple_prime": None if fppp is None else float(fppp[i]),
            "residual": None if math.isnan(sol.residual[i]) else float(sol.residual[i]),
        }
        for i, x in enumerate(sol.grid)
    ]
    cols = ("x", "f", "f_prime", "f_double_prime", "f_triple_prime", "residual")
    _write(opts, _table(rows, cols, opts["format"] or "csv"))
    print(f"{spec.label} / {fn.name}: E h(Y) = {sol.Eh_Y!r}, residual_max = {sol.residual_max:.3e}", file=sys.stderr)
    if fppp is None:
        print("f''' omitted: test function has no derivative", file=sys.stderr)
    return EXIT_OK


def cmd_rate_sweep(opts) -> int:
    if opts["beta"] is None:
        raise ValidationError("--beta is required")
    params = _require_params(opts, need_n=False)
    beta, h = params.beta, params.h
    _regime(beta, h)
    fn = testfns.get(opts["fn"])
    if not fn.bounded:
        raise ValidationError(f"test function {fn.name!r} is unbounded; bounded family: {', '.join(testfns.FAMILY)}")
    grid = tuple(opts["n_grid"])
    exp = run_experiment(beta, h, grid, [fn], gap_ns=grid if opts["gap"] else (), source=opts["source"],
                         threads=opts["threads"])
    curve = exp.curves[0]
    if (opts["format"] or "csv") == "json":
        _write(opts, json.dumps(jsonable(experiment_to_dict(exp)), indent=2, sort_keys=True, allow_nan=False) + "\n")
    else:
        _write(opts, curve_csv(curve.rows()))
    fit = curve.fit
    if fit.fitted:
        print(f"slope = {fit.slope:.6f} (95% band {fit.band[0]:.4f} .. {fit.band[1]:.4f}); "
              f"max Delta n^{exp.rate:g} = {fit.scaled_max:.6g} at n = {fit.argmax_n}", file=sys.stderr)
    else:
        print(f"warning: no fit ({fit.note})", file=sys.stderr)
    return EXIT_OK


def cmd_audit(opts) -> int:
    over = dict(opts["report_overrides"])
    over["sections"] = tuple(over.get("sections", AUDITS[opts["which"]]))
    over["threads"] = opts["threads"]
    over.setdefault("tol", opts["tol"])
    if opts["beta"] is not None:
        params = _require_params(opts, need_n=False)
        pair = (params.beta, params.h)
        critical = pair == (1.0, 0.0)
        if not critical:
            over.setdefault("critical_tail_n", ())
        over.setdefault("model_grid", (pair,))
        over.setdefault("moment_params", (pair,))
        if 0.0 <= pair[0] < 1.0:
            over.setdefault("expansion_params", (pair,))
        over.setdefault("stein_params", (pair,))
        over.setdefault("closure_params", (pair,))
        over.setdefault("experiments", ({"beta": pair[0], "h": pair[1]},))
        over.setdefault("variance_betas", (pair[0],) if pair[1] == 0.0 and pair[0] < 1 else ())
    if opts.get("n") is not None:
        n = (int(opts["n"]),)
        for key in ("stationarity_n", "tail_n", "moment_n", "critical_tail_n"):
            over.setdefault(key, n)
    if opts.get("n_grid") is not None and opts["n_grid"] != DEFAULTS["n_grid"]:
        over.setdefault("n_grid", tuple(opts["n_grid"]))
    try:
        cfg = ReportConfig.from_dict({k: list(v) if isinstance(v, tuple) else v for k, v in over.items()})
    except (TypeError, ValueError, KeyError) as exc:
        raise ValidationError(str(exc)) from None
    report = full_report(cfg)
    if (opts["format"] or "json") == "csv":
        _write(opts, _audit_csv(report))
    else:
        _write(opts, dumps(report))
    s = report["summary"]
    print(f"{s['passed']}/{s['audits']} audits passed" + (f"; failed: {', '.join(s['failed'])}" if s["failed"] else ""),
          file=sys.stderr)
    return EXIT_COMPUTATION if opts["strict"] and s["failed"] else EXIT_OK


def _audit_csv(report: dict) -> str:
    """One row per audit; for a single tail audit the per-t table instead."""
    audits = report["audits"]
    if len(audits) == 1 and audits[0]["name"] == "tail_general":
        return _table(audits[0]["rows"], ("t", "lhs", "rhs", "violated"), "csv")
    rows = [{"name": a["name"], "passed": a["passed"]} for a in audits]
    return _table(rows, ("name", "passed"), "csv")


COMMANDS = {
    "fixed-point": cmd_fixed_point,
    "exact-dist": cmd_exact_dist,
    "simulate": cmd_simulate,
    "stein-solve": cmd_stein_solve,
    "rate-sweep": cmd_rate_sweep,
    "audit": cmd_audit,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OutputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SteinSolveError, ArithmeticError, RuntimeError) as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
