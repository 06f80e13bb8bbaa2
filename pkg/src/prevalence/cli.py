"""Command line entry point: ``prevalence <subcommand>``."""

from __future__ import annotations

import argparse
import datetime as dt
import json
import sys
import time
from pathlib import Path

from . import alerting, simlab
from .config import ConfigError, load_config
from .estimator import EstimationError
from .ingest import IngestError, read_jsonl
from .labeling import MissingLabelsError
from .pipeline import (
    GateFailedError,
    ScoreCoverageError,
    compare_score_versions,
    emit_dashboard_data,
    run_daily,
)
from .sampler import SamplingError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_GATE = 3
EXIT_INGEST = 4
EXIT_ESTIMATION = 5


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True, default=str))


def cmd_validate(args) -> int:
    cfg = load_config(args.config, check_paths=True, day=args.day)
    _print({"status": "ok", "policy_id": cfg.policy_id, "config_hash": cfg.config_hash})
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config, check_paths=True, day=args.day)
    if args.policy and args.policy != cfg.policy_id:
        raise ConfigError([f"policy {args.policy!r} does not match config policy_id {cfg.policy_id!r}"])
    result = run_daily(cfg, args.day, force=args.force)
    _print({
        "run_dir": str(result.run_dir),
        "reused": result.reused,
        "sample_id": result.manifest.get("sample_id"),
        "estimates": result.estimates,
        "alert": result.alert,
    })
    return EXIT_OK


def cmd_simulate(args) -> int:
    pop_spec = simlab.SimPopulationSpec(
        n=args.n, base_rate=args.base_rate, p_small=args.p_small, pareto_alpha=args.pareto_alpha,
        pareto_xm=args.pareto_xm, beta_neg=tuple(args.beta_neg), beta_pos=tuple(args.beta_pos),
        seed_pop=args.seed_pop,
    )
    exp = simlab.SimExperimentSpec(
        sample_sizes=tuple(args.sample_sizes), trials=args.trials, nu=args.nu, epsilon=args.epsilon,
        seed_mc=args.seed_mc, paired=args.paired,
    )
    start = time.perf_counter()
    pop = simlab.generate_population(pop_spec)

    def progress(m, scheme, cell):
        if not args.quiet:
            print(f"[{time.perf_counter() - start:7.1f}s] m={m} {scheme} W={cell.width:.6g}", file=sys.stderr)

    result = simlab.run_trials(pop, exp, progress)
    simlab.emit_figure_data(result, args.out)
    summary = {"true_theta": pop.true_theta, "figure_data": str(args.out),
               "lift": {str(m): simlab.positive_rate_lift(result, m).lift for m in exp.sample_sizes}}
    if args.ppswor_m:
        cmp = simlab.ppswor_comparison(pop, args.ppswor_m, args.ppswor_trials, exp.seed_mc, exp.nu, 1.0, exp.epsilon)
        summary["ppswor_comparison"] = {
            "m": args.ppswor_m,
            "ppswr_mean": float(cmp["ppswr"].mean()), "ppswr_sd": float(cmp["ppswr"].std(ddof=1)),
            "ppswor_mean": float(cmp["ppswor"].mean()), "ppswor_sd": float(cmp["ppswor"].std(ddof=1)),
        }
    if not args.quiet:
        for line in simlab.summarize(result):
            print(line, file=sys.stderr)
    _print(summary)
    return EXIT_OK


def _read_series(path: Path) -> alerting.DailySeries:
    rows = read_jsonl(path)
    rows = [r for r in rows if r.get("segment", "ALL") == "ALL" and "theta_hat" in r]
    rows.sort(key=lambda r: r["day"])
    return alerting.DailySeries.from_triples((r["day"], r["theta_hat"], r.get("variance")) for r in rows)


def cmd_alert(args) -> int:
    series = _read_series(Path(args.series))
    if args.autocorrelation:
        rhos = alerting.estimate_autocorrelation(series, args.window_days - 1)
        inflation = alerting.variance_inflation(rhos, args.window_days)
    else:
        inflation = 1.0
    plan = alerting.MdePlan(alpha=args.alpha, power=args.power, window_days=args.window_days,
                            baseline=args.baseline, sigma=args.sigma, inflation=inflation)
    end = dt.date.fromisoformat(args.end) if args.end else None
    decision = alerting.evaluate_alert(series, plan, end, args.gap_days, args.rule)
    rec = decision.to_record(args.policy)
    rec.update({"mde_abs": plan.mde_abs, "mde_rel": plan.mde_rel})
    _print(rec)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config, check_paths=True, day=args.day)
    report = compare_score_versions(cfg, args.day, args.scores_a, args.scores_b, args.z, args.include_uniform)
    _print(report.to_record())
    return EXIT_OK


def cmd_dashboard(args) -> int:
    rows = []
    for p in args.estimates:
        p = Path(p)
        files = sorted(p.rglob("estimates.jsonl")) if p.is_dir() else [p]
        for f in files:
            rows.extend(read_jsonl(f))
    ts, seg = emit_dashboard_data(rows, args.out)
    _print({"timeseries": str(ts), "segments": str(seg), "rows": len(rows)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prevalence", description="Prevalence measurement toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="validate a metric config")
    v.add_argument("config")
    v.add_argument("--day", help="resolve {day} in source paths")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="run one daily measurement")
    r.add_argument("config")
    r.add_argument("day", help="ISO date")
    r.add_argument("--policy", help="assert the config's policy_id")
    r.add_argument("--force", action="store_true", help="recompute even if the run exists")
    r.set_defaults(func=cmd_run)

    d = simlab.SimPopulationSpec()
    e = simlab.SimExperimentSpec()
    s = sub.add_parser("simulate", aliases=["simlab"], help="PPS vs ML-PPS Monte Carlo")
    s.add_argument("--n", type=int, default=d.n)
    s.add_argument("--base-rate", type=float, default=d.base_rate)
    s.add_argument("--p-small", type=float, default=d.p_small)
    s.add_argument("--pareto-alpha", type=float, default=d.pareto_alpha)
    s.add_argument("--pareto-xm", type=float, default=d.pareto_xm)
    s.add_argument("--beta-neg", type=float, nargs=2, default=list(d.beta_neg))
    s.add_argument("--beta-pos", type=float, nargs=2, default=list(d.beta_pos))
    s.add_argument("--seed-pop", type=int, default=d.seed_pop)
    s.add_argument("--sample-sizes", type=int, nargs="+", default=list(e.sample_sizes))
    s.add_argument("--trials", type=int, default=e.trials)
    s.add_argument("--nu", type=float, default=e.nu)
    s.add_argument("--epsilon", type=float, default=e.epsilon)
    s.add_argument("--seed-mc", type=int, default=e.seed_mc)
    s.add_argument("--paired", action="store_true", help="share draws across schemes within a trial")
    s.add_argument("--ppswor-m", type=int, default=0, help="also compare PPSWR vs PPSWOR at this m")
    s.add_argument("--ppswor-trials", type=int, default=200)
    s.add_argument("--out", default="figure_data.csv")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("alert", help="evaluate a weekly step-change alert")
    a.add_argument("series", help="JSONL of daily estimates (day, theta_hat, variance)")
    a.add_argument("--sigma", type=float, required=True, help="daily standard error")
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--power", type=float, default=0.8)
    a.add_argument("--window-days", type=int, default=7)
    a.add_argument("--gap-days", type=int, default=0)
    a.add_argument("--baseline", type=float)
    a.add_argument("--rule", choices=("mde", "critical"), default="mde")
    a.add_argument("--autocorrelation", action="store_true", help="inflate by estimated autocorrelation")
    a.add_argument("--end", help="ISO date ending the current window")
    a.add_argument("--policy")
    a.set_defaults(func=cmd_alert)

    c = sub.add_parser("compare-scores", help="score-version consistency check")
    c.add_argument("config")
    c.add_argument("day")
    c.add_argument("scores_a")
    c.add_argument("scores_b")
    c.add_argument("--z", type=float, default=1.96)
    c.add_argument("--include-uniform", action="store_true")
    c.set_defaults(func=cmd_compare)

    b = sub.add_parser("emit-dashboard", help="write plot-ready time series and segment pivots")
    b.add_argument("estimates", nargs="+", help="estimates.jsonl files or output directories")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_dashboard)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except GateFailedError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_GATE
    except (IngestError, ScoreCoverageError, MissingLabelsError, SamplingError) as exc:
        print(f"ingestion failed: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except (EstimationError, alerting.AlertingError) as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
