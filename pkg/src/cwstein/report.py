"""Aggregate every audit and rate experiment into one JSON-ready document."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import testfns
from .chain import (
    critical_drift_audit,
    detailed_balance_error,
    diff_remainder_audit,
    kernel_matrix,
    remainder_audit,
    stationary_solve,
)
from .diffusion import Provenance
from .model import (
    ModelParams,
    Regime,
    brute_force_law,
    exact_dist,
    moment_audit,
    tail_audit_critical,
    tail_audit_general,
)
from .rates import (
    RateExperiment,
    binomial_gaussian_check,
    limit_spec,
    run_experiment,
    solve_stein,
    variance_crosscheck,
)
from .reporting import AuditReport, jsonable
from .stein import GridConfig, stein_audit

SCHEMA_VERSION = 1
SECTIONS = ("stationarity", "enumeration", "tails", "moments", "expansions", "stein", "closure", "rates", "variance")

_MODEL_GRID = ((1.0, 0.0), (0.5, 0.0), (0.8, 0.1), (0.2, -0.3))


def _tgrid(lo, hi, step):
    return tuple(round(lo + i * step, 10) for i in range(int(round((hi - lo) / step)) + 1))


@dataclass
class ReportConfig:
    """Every knob of :func:`full_report`; JSON config files map onto these fields."""

    sections: tuple = SECTIONS
    model_grid: tuple = _MODEL_GRID
    stationarity_n: tuple = (10, 50, 200)
    stationarity_tol: float = 1e-10
    enumeration_n: tuple = (1, 2, 4, 8, 12, 16)
    enumeration_tol: float = 1e-12
    tail_n: tuple = (20, 100, 1000)
    tail_t: tuple = _tgrid(0.0, 5.0, 0.1)
    critical_tail_n: tuple = (16, 64, 256, 1024)
    critical_tail_t: tuple = _tgrid(0.01, 1.0, 0.01)
    moment_params: tuple = ((1.0, 0.0), (0.5, 0.0), (0.8, 0.1), (0.0, 0.0))
    moment_n: tuple = (256, 1024, 4096)
    expansion_params: tuple = ((0.5, 0.0), (0.8, 0.1), (0.2, -0.3), (0.0, 0.0))
    critical_drift_tol: float = 0.05
    stein_params: tuple = ((1.0, 0.0), (0.0, 0.0), (0.2, 0.0), (0.5, 0.0), (0.8, 0.0), (0.8, 0.1))
    functions: tuple = tuple(testfns.FAMILY)
    tol: float = 1e-7
    closure_params: tuple = ((1.0, 0.0), (0.5, 0.0), (0.8, 0.1))
    closure_n: tuple = (2**10, 2**12)
    experiments: tuple = (
        {"beta": 1.0, "h": 0.0},
        {"beta": 0.2, "h": 0.0},
        {"beta": 0.5, "h": 0.0},
        {"beta": 0.8, "h": 0.0},
    )
    n_grid: tuple = tuple(2**j for j in range(8, 17))
    supercritical_slope_max: float = -0.45
    critical_slope_max: float = -0.2
    variance_betas: tuple = (0.0, 0.2, 0.5, 0.8)
    threads: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ReportConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        conv = {}
        for k, v in d.items():
            if isinstance(v, list):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            conv[k] = v
        cfg = cls(**conv)
        cfg.validate()
        return cfg

    def validate(self):
        bad = set(self.sections) - set(SECTIONS)
        if bad:
            raise ValueError(f"unknown sections {sorted(bad)}; choose from {list(SECTIONS)}")
        for name in self.functions:
            testfns.get(name)
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        ns = list(self.n_grid)
        if len(ns) < 2 or any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError("n_grid must be strictly increasing with at least 2 points")
        for beta, h in list(self.model_grid) + list(self.moment_params):
            ModelParams(1, beta, h)


def _functions(cfg: ReportConfig):
    return [testfns.get(name) for name in cfg.functions]


def _stationarity(cfg: ReportConfig) -> AuditReport:
    rows = []
    for n in cfg.stationarity_n:
        for beta, h in cfg.model_grid:
            params = ModelParams(n, beta, h)
            rep = stationary_solve(kernel_matrix(params))
            rows.append(
                {"n": n, "beta": beta, "h": h, "tv": rep.tv_distance, "detailed_balance": detailed_balance_error(params)}
            )
    worst = max(r["tv"] for r in rows)
    return AuditReport("stationarity", worst < cfg.stationarity_tol, {"max_tv": worst, "tol": cfg.stationarity_tol}, rows)


def _enumeration(cfg: ReportConfig) -> AuditReport:
    rows = []
    for n in cfg.enumeration_n:
        for beta, h in cfg.model_grid:
            params = ModelParams(n, beta, h)
            bf = brute_force_law(params)
            ex = exact_dist(params).probs
            rows.append({"n": n, "beta": beta, "h": h, "max_rel_err": float(np.max(np.abs(ex / bf - 1.0)))})
    worst = max(r["max_rel_err"] for r in rows)
    return AuditReport("enumeration", worst < cfg.enumeration_tol, {"max_rel_err": worst}, rows)


def _tails(cfg: ReportConfig) -> list[AuditReport]:
    out = []
    for n in cfg.tail_n:
        for beta, h in cfg.model_grid:
            out.append(tail_audit_general(ModelParams(n, beta, h), cfg.tail_t))
    for n in cfg.critical_tail_n:
        out.append(tail_audit_critical(n, cfg.critical_tail_t))
    return out


def _moments(cfg: ReportConfig) -> list[AuditReport]:
    return [moment_audit(beta, h, cfg.moment_n) for beta, h in cfg.moment_params]


def _expansions(cfg: ReportConfig) -> list[AuditReport]:
    out = [critical_drift_audit(rel_tol=cfg.critical_drift_tol)]
    for beta, h in cfg.expansion_params:
        out.append(remainder_audit(beta, h))
        out.append(diff_remainder_audit(beta, h))
    return out


def _stein(cfg: ReportConfig) -> AuditReport:
    specs = [limit_spec(beta, h) for beta, h in cfg.stein_params]
    return stein_audit(specs, _functions(cfg), GridConfig(tol=cfg.tol))


def _closure(cfg: ReportConfig) -> AuditReport:
    rows = []
    for beta, h in cfg.closure_params:
        exp = run_experiment(beta, h, cfg.closure_n, _functions(cfg), gap_ns=cfg.closure_n, threads=cfg.threads)
        for curve in exp.curves:
            for g in curve.gaps:
                rows.append(
                    {
                        "beta": beta,
                        "h": h,
                        "fn": curve.fn,
                        "n": g.n,
                        "generator_gap": g.gap,
                        "signed_delta": g.signed_delta,
                        "closure_error": g.closure_error,
                        "tolerance": g.tolerance,
                        "E1": g.E1,
                        "E2": g.E2,
                        "E3": g.E3,
                        "decomposition_error": g.decomposition_error,
                        "closed": g.closed,
                    }
                )
    ok = all(r["closed"] for r in rows)
    return AuditReport("stein_closure", ok, {"cases": len(rows), "max_closure_error": max(r["closure_error"] for r in rows)}, rows)


def experiment_to_dict(exp: RateExperiment) -> dict:
    curves = []
    for c in exp.curves:
        fit = c.fit
        curves.append(
            {
                "fn": c.fn,
                "rows": c.rows(),
                "signed_delta": [p.signed for p in c.points],
                "fit": asdict(fit),
            }
        )
    return {
        "regime": exp.regime.value,
        "beta": exp.beta,
        "h": exp.h,
        "source": exp.source,
        "rate": exp.rate,
        "n_grid": list(exp.n_grid),
        "curves": curves,
    }


def judge_experiment(exp: RateExperiment, cfg: ReportConfig) -> AuditReport:
    """Slope and scaled-maximum checks for every curve with a fit.

    Supercritical: slope at most ``supercritical_slope_max`` and
    ``Delta(n) n^(1/2)`` maximal at the smallest ``n``.  Critical: slope at
    most ``critical_slope_max`` and the scaled sequence not increasing at the
    end of the grid.  Curves without a fit (identically zero Delta, e.g. odd
    ``h`` under a symmetric law) are listed and not judged.
    """
    rows = []
    ok = True
    for c in exp.curves:
        fit = c.fit
        if not fit.fitted:
            rows.append({"fn": c.fn, "judged": False, "note": fit.note})
            continue
        if exp.regime is Regime.SUPERCRITICAL:
            slope_ok = fit.slope <= cfg.supercritical_slope_max
            scaled_ok = fit.argmax_n == exp.n_grid[0]
        else:
            slope_ok = fit.slope <= cfg.critical_slope_max
            sc = fit.scaled
            scaled_ok = sc[-1] <= max(sc[: max(1, len(sc) // 2)])
        ok &= slope_ok and scaled_ok
        rows.append(
            {
                "fn": c.fn,
                "judged": True,
                "slope": fit.slope,
                "slope_band": list(fit.band),
                "argmax_n": fit.argmax_n,
                "slope_ok": bool(slope_ok),
                "scaled_ok": bool(scaled_ok),
            }
        )
    return AuditReport(f"rates[beta={exp.beta:g},h={exp.h:g}]", bool(ok), {"regime": exp.regime.value}, rows)


def _rates(cfg: ReportConfig):
    audits, experiments = [], []
    for spec in cfg.experiments:
        beta, h = float(spec["beta"]), float(spec.get("h", 0.0))
        n_grid = tuple(spec.get("n_grid", cfg.n_grid))
        fns = [testfns.get(name) for name in spec.get("functions", cfg.functions)]
        exp = run_experiment(beta, h, n_grid, fns, threads=cfg.threads)
        audits.append(judge_experiment(exp, cfg))
        d = experiment_to_dict(exp)
        if exp.regime is Regime.SUPERCRITICAL:
            printed = run_experiment(beta, h, n_grid, fns, source=Provenance.PRINTED.value, threads=cfg.threads)
            d["printed_variant"] = experiment_to_dict(printed)
        experiments.append(d)
    if any(float(s["beta"]) == 0.0 for s in cfg.experiments):
        for name in cfg.functions:
            fn = testfns.get(name)
            chk = binomial_gaussian_check(fn, cfg.n_grid)
            audits.append(
                AuditReport(
                    f"binomial_gaussian[{name}]",
                    bool(chk["scaled_bounded"] and chk["max_pipeline_vs_direct"] < 1e-10),
                    {k: v for k, v in chk.items() if k != "rows"},
                    chk["rows"],
                )
            )
    return audits, experiments


def _variance(cfg: ReportConfig) -> list[AuditReport]:
    out = []
    for beta in cfg.variance_betas:
        res = variance_crosscheck(beta)
        out.append(AuditReport(f"variance[beta={beta:g}]", res["passed"], {k: v for k, v in res.items() if k != "variance"}))
    return out


def full_report(cfg: Optional[ReportConfig] = None) -> dict:
    """Run the configured sections; the result is deterministic for a fixed config."""
    cfg = cfg or ReportConfig()
    cfg.validate()
    audits: list[AuditReport] = []
    experiments: list[dict] = []
    for section in SECTIONS:
        if section not in cfg.sections:
            continue
        try:
            if section == "stationarity":
                audits.append(_stationarity(cfg))
            elif section == "enumeration":
                audits.append(_enumeration(cfg))
            elif section == "tails":
                audits.extend(_tails(cfg))
            elif section == "moments":
                audits.extend(_moments(cfg))
            elif section == "expansions":
                audits.extend(_expansions(cfg))
            elif section == "stein":
                audits.append(_stein(cfg))
            elif section == "closure":
                audits.append(_closure(cfg))
            elif section == "rates":
                a, e = _rates(cfg)
                audits.extend(a)
                experiments.extend(e)
            elif section == "variance":
                audits.extend(_variance(cfg))
        except Exception as exc:
            raise RuntimeError(f"section {section!r} failed: {exc}") from exc
    failed = [a.name for a in audits if not a.passed]
    # worker count is left out so the report does not depend on it
    echoed = {k: v for k, v in asdict(cfg).items() if k != "threads"}
    return {
        "schema_version": SCHEMA_VERSION,
        "config": jsonable(echoed),
        "notes": {
            "supercritical_limit": "OU with extrapolated drift; the printed-coefficient variant is reported under printed_variant",
        },
        "audits": [a.to_dict() for a in audits],
        "experiments": jsonable(experiments),
        "summary": {"audits": len(audits), "passed": len(audits) - len(failed), "failed": failed},
    }


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


CURVE_COLUMNS = ("n", "delta", "scaled_delta", "generator_gap")


def curve_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CURVE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in CURVE_COLUMNS})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)
