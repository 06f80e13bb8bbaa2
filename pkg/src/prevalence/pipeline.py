"""Daily measurement runs: ingest, sample, label, estimate, alert, persist.

Each run writes an append-only directory
``<output>/<policy_id>/<day>/<run_id>/`` where ``run_id`` hashes the config
and the input files.  The directory holds:

* ``sample.jsonl``     header line (design, threshold, totals, segment
                       denominators) followed by one line per draw with
                       weight, probabilities, segment breakdown and label
* ``estimates.jsonl``  one line per (segment, estimator kind)
* ``gold_report.json`` gold-set confusion matrix and metrics (if gated)
* ``alert.json``       weekly alert evaluation
* ``manifest.json``    config, versions, diagnostics and sha256 of every file above
* ``timing.json``      wall-clock timings (not part of the content hashes)

The directory is written under a temporary name and renamed into place.
Estimates can be recomputed from ``sample.jsonl`` and ``gold_report.json``
alone (see :func:`replay_run`).
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import math
import os
import shutil
import time
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import alerting
from .config import MetricConfig
from .estimator import (
    Design,
    EmptySegmentError,
    EstimationError,
    LabelerQuality,
    PrevalenceEstimate,
    hh_ratio,
    ht_hajek,
    rogan_gladen_correct,
    segment_estimate_known_denominator,
    segment_estimate_ratio,
)
from .ingest import IngestError, IngestReport, file_sha256, iter_impressions, read_jsonl, read_scores, read_truth, write_jsonl
from .labeling import (
    FileJoinProvider,
    GoldSetReport,
    LabeledSample,
    LabelProvider,
    MockRemoteProvider,
    SyntheticOracleProvider,
    evaluate_gold_set,
    label_sample,
    labeler_quality,
    quality_gate,
    read_gold_file,
)
from .sampler import (
    ALL_SEGMENTS,
    DAY_MEDIAN,
    ContentRecord,
    ExactSum,
    FixedImputation,
    Reservoir,
    SampleDraw,
    SamplingConfig,
    Scheme,
    compute_weight,
    day_median,
    ppswr_sample,
)

GLOBAL_KINDS = ("HH_ratio", "HT_hajek")


class GateFailedError(RuntimeError):
    def __init__(self, report: GoldSetReport, reasons: Sequence[str]):
        self.report = report
        self.reasons = list(reasons)
        super().__init__("quality gate failed: " + "; ".join(self.reasons))


class LineageConflictError(RuntimeError):
    pass


class ScoreCoverageError(ValueError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__(f"{len(self.missing)} units have no score: {self.missing[:10]}")


# ---------------------------------------------------------------------------
# sampling stage


@dataclass
class DaySample:
    draws: list[SampleDraw]
    scheme: Scheme
    threshold: float | None
    total_weight: float
    n_units: int
    total_impressions: int
    denominators: dict[str, int]
    imputed_score: float | None

    def header(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "threshold": self.threshold,
            "total_weight": self.total_weight,
            "n_units": self.n_units,
            "total_impressions": self.total_impressions,
            "denominators": dict(sorted(self.denominators.items())),
            "imputed_score": self.imputed_score,
        }


def resolve_fill(records: Iterable[ContentRecord], policy) -> float:
    if isinstance(policy, FixedImputation):
        return policy.value
    if policy == DAY_MEDIAN:
        return day_median(r.score for r in records)
    raise ValueError(f"unknown imputation policy {policy!r}")


def draw_sample(records: Iterable[ContentRecord], sampling: SamplingConfig, segments: Sequence[str],
                fill_score: float | None) -> DaySample:
    """Weight and sample a day's records, accumulating exact segment denominators.

    PPSWOR streams with ``O(m)`` sample state; PPSWR keeps the weight list.
    """
    denominators = {g: 0 for g in segments}
    n_units = 0
    total_imp = 0
    if sampling.scheme is Scheme.PPSWOR:
        res = Reservoir(capacity=sampling.sample_size, seed=sampling.seed)
        for rec in records:
            res.add(rec, compute_weight(rec, sampling, fill_score))
            n_units += 1
            total_imp += rec.impressions
            if rec.segment_impressions:
                for g in segments:
                    denominators[g] += rec.segment_impressions.get(g, 0)
        if n_units == 0:
            raise EstimationError("no in-frame units for the day")
        return DaySample(res.draws(), sampling.scheme, res.threshold, res.total_weight_seen,
                         n_units, total_imp, denominators, fill_score)
    population = []
    total = ExactSum()
    for rec in records:
        w = compute_weight(rec, sampling, fill_score)
        population.append((rec, w))
        total.add(w)
        n_units += 1
        total_imp += rec.impressions
        if rec.segment_impressions:
            for g in segments:
                denominators[g] += rec.segment_impressions.get(g, 0)
    if not population:
        raise EstimationError("no in-frame units for the day")
    draws = ppswr_sample(population, sampling.sample_size, sampling.seed)
    return DaySample(draws, sampling.scheme, None, total.value, n_units, total_imp, denominators, fill_score)


# ---------------------------------------------------------------------------
# estimation stage


@dataclass
class SegmentFailure:
    segment: str
    estimator_kind: str
    reason: str

    def to_record(self) -> dict:
        return {"segment": self.segment, "estimator_kind": self.estimator_kind, "status": self.reason}


def estimate_day(draws: Sequence[SampleDraw], scheme: Scheme, segments: Sequence[str],
                 denominators: Mapping[str, float], quality: LabelerQuality | None = None,
                 rg_mode: str = "none") -> list[PrevalenceEstimate | SegmentFailure]:
    """Global estimate plus ratio and known-denominator estimates per segment."""
    design = Design.PPSWR if scheme is Scheme.PPSWR else Design.PPSWOR
    out: list[PrevalenceEstimate | SegmentFailure] = []
    glob = hh_ratio(draws) if design is Design.PPSWR else ht_hajek(draws)
    if quality is not None and rg_mode in ("global", "per_segment"):
        glob = rogan_gladen_correct(glob, quality)
    out.append(glob)
    for g in segments:
        try:
            est = segment_estimate_ratio(draws, g, design)
            if quality is not None and rg_mode == "per_segment":
                est = rogan_gladen_correct(est, quality)
            out.append(est)
        except EmptySegmentError as exc:
            out.append(SegmentFailure(g, glob.estimator_kind.value, exc.code))
        d = denominators.get(g, 0)
        if d > 0:
            est = segment_estimate_known_denominator(draws, g, d, design)
            if quality is not None and rg_mode == "per_segment":
                est = rogan_gladen_correct(est, quality)
            out.append(est)
        else:
            out.append(SegmentFailure(g, "HT_known_denominator", "zero_denominator"))
    return out


def estimate_records(results, day: str, policy_id: str, sample_id: str, abstentions: int) -> list[dict]:
    rows = []
    for r in results:
        rec = r.to_record()
        if isinstance(r, PrevalenceEstimate) and "theta_labeler" in r.diagnostics:
            rec["theta_labeler"] = r.diagnostics["theta_labeler"]
        rec.update({"day": day, "policy_id": policy_id, "sample_id": sample_id, "abstentions": abstentions})
        rows.append(rec)
    return rows


# ---------------------------------------------------------------------------
# providers and gate


def build_provider(config: MetricConfig, day: str | None = None) -> LabelProvider:
    spec = config.labeler
    if spec.kind == "synthetic_oracle":
        return SyntheticOracleProvider(read_truth(config.source_path("truth", day)), spec.version_id)
    if spec.kind == "file_join":
        return FileJoinProvider.from_file(config.source_path("labels", day), spec.version_id)
    if spec.kind == "mock_remote":
        return MockRemoteProvider(
            read_truth(config.source_path("truth", day)),
            sensitivity=spec.sensitivity,
            false_positive_rate=spec.false_positive_rate,
            seed=spec.seed,
            latency_ms=spec.latency_ms,
            abstain_rate=spec.abstain_rate,
            version_id=spec.version_id,
        )
    raise ValueError(f"unknown labeler kind {spec.kind!r}")


def run_gate(config: MetricConfig, day: str | None = None) -> GoldSetReport | None:
    """Evaluate the gold set; raises GateFailedError when the gate is enabled and fails."""
    path = config.source_path("gold_set", day)
    if path is None:
        return None
    preds, truths = read_gold_file(path)
    report = evaluate_gold_set(preds, truths)
    gate = quality_gate(report, config.thresholds)
    report = GoldSetReport(report.tp, report.fp, report.tn, report.fn, gate.passed, gate.reasons)
    if config.quality_enabled and not gate.passed:
        raise GateFailedError(report, gate.reasons)
    return report


# ---------------------------------------------------------------------------
# daily run


@dataclass
class RunResult:
    run_dir: Path
    manifest: dict
    estimates: list[dict]
    alert: dict | None
    reused: bool = False


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _ingest(config: MetricConfig, day: str, scores: Mapping[str, float] | None, report: IngestReport):
    return iter_impressions(config.source_path("impressions", day), report, scores)


def _input_hashes(config: MetricConfig, day: str) -> dict[str, str]:
    out = {}
    for name in sorted(config.sources):
        p = config.source_path(name, day)
        if p is not None and p.exists():
            out[name] = file_sha256(p)
    return out


def load_history(config: MetricConfig, before: str) -> list[alerting.DailyPoint]:
    """Global daily estimates from earlier runs of this policy (one per day)."""
    root = config.output_dir / config.policy_id
    points = {}
    if not root.exists():
        return []
    for day_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if day_dir.name >= before:
            continue
        runs = sorted(p for p in day_dir.iterdir() if p.is_dir() and (p / "estimates.jsonl").exists())
        preferred = [r for r in runs if _read_json(r / "manifest.json").get("config_hash") == config.config_hash]
        for run in (preferred or runs)[:1]:
            for row in read_jsonl(run / "estimates.jsonl"):
                if row.get("segment") == ALL_SEGMENTS and row.get("estimator_kind") in GLOBAL_KINDS:
                    points[day_dir.name] = alerting.DailyPoint(
                        dt.date.fromisoformat(day_dir.name), row["theta_hat"], row.get("variance"))
    return [points[k] for k in sorted(points)]


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        return {}


def _alert_for(config: MetricConfig, day: str, glob: dict) -> dict:
    history = load_history(config, day)
    history.append(alerting.DailyPoint(dt.date.fromisoformat(day), glob["theta_hat"], glob.get("variance")))
    series = alerting.DailySeries(history)
    spec = config.alerting
    sigma = spec.sigma
    if sigma is None:
        sigma = math.sqrt(glob["variance"]) if glob.get("variance") is not None else 0.0
    plan = alerting.MdePlan(alpha=spec.alpha, power=spec.power, window_days=spec.window_days,
                            baseline=spec.baseline, sigma=sigma)
    decision = alerting.evaluate_alert(series, plan, dt.date.fromisoformat(day), spec.gap_days, spec.rule)
    rec = decision.to_record(config.policy_id)
    rec["mde_abs"] = plan.mde_abs
    rec["mde_rel"] = plan.mde_rel
    rec["sigma"] = sigma
    return rec


def run_daily(config: MetricConfig, day: str, force: bool = False) -> RunResult:
    """Run one (policy, day) measurement and persist its lineage.

    Re-running with the same config and inputs returns the existing run.
    """
    dt.date.fromisoformat(day)
    timing = {"started": time.time()}
    t0 = time.perf_counter()
    gold = run_gate(config, day)
    timing["gate_s"] = time.perf_counter() - t0

    inputs = _input_hashes(config, day)
    run_id = hashlib.sha256(_canon({"config": config.config_hash, "inputs": inputs}).encode()).hexdigest()[:16]
    run_dir = config.output_dir / config.policy_id / day / run_id
    if run_dir.exists() and not force:
        manifest = _read_json(run_dir / "manifest.json")
        if manifest.get("inputs") != inputs or manifest.get("config_hash") != config.config_hash:
            raise LineageConflictError(f"{run_dir} exists with different config or inputs")
        return RunResult(run_dir, manifest, read_jsonl(run_dir / "estimates.jsonl"),
                         _read_json(run_dir / "alert.json") or None, reused=True)

    scores = read_scores(config.source_path("scores", day)) if "scores" in config.sources else None
    t0 = time.perf_counter()
    fill = None
    policy = config.sampling.score_imputation
    if isinstance(policy, FixedImputation):
        fill = policy.value
    else:
        pre = IngestReport()
        present = [r.score for r in _ingest(config, day, scores, pre) if r.score is not None]
        fill = day_median(present) if len(present) < pre.records else None
    report = IngestReport()
    try:
        sample = draw_sample(_ingest(config, day, scores, report), config.sampling, config.segments, fill)
    except EstimationError:
        # an empty frame caused by bad input is an ingestion failure
        if not report.errors:
            raise
        sample = None
    if report.error_rate > config.max_error_rate or sample is None:
        raise IngestError(report, f"ingestion error rate {report.error_rate:.4g} exceeds "
                                  f"{config.max_error_rate} ({len(report.errors)} bad lines)")
    timing["sample_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    provider = build_provider(config, day)
    labeled = label_sample(sample.draws, provider)
    timing["label_s"] = time.perf_counter() - t0

    header = {
        "type": "header",
        "policy_id": config.policy_id,
        "day": day,
        "segments": list(config.segments),
        "rogan_gladen": config.rogan_gladen,
        "labeler": {"kind": labeled.provider_kind, "version_id": labeled.provider_version,
                    "prompt_id": config.labeler.prompt_id, "model_id": config.labeler.model_id},
        "abstentions": labeled.abstentions,
        **sample.header(),
    }
    draw_rows = [_draw_row(d) for d in labeled.draws]
    sample_text = "".join(_canon(r) + "\n" for r in [header, *draw_rows])
    sample_id = hashlib.sha256(sample_text.encode()).hexdigest()

    t0 = time.perf_counter()
    estimates = _estimate_from_lineage(header, labeled.draws, gold, sample_id)
    timing["estimate_s"] = time.perf_counter() - t0
    glob = estimates[0]
    alert = _alert_for(config, day, glob)

    tmp = run_dir.with_name(run_dir.name + f".tmp{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    (tmp / "sample.jsonl").write_text(sample_text, encoding="utf-8")
    write_jsonl(tmp / "estimates.jsonl", estimates)
    if gold is not None:
        (tmp / "gold_report.json").write_text(_canon(gold.to_record()) + "\n", encoding="utf-8")
    (tmp / "alert.json").write_text(_canon(alert) + "\n", encoding="utf-8")
    files = {p.name: file_sha256(p) for p in sorted(tmp.iterdir())}
    manifest = {
        "run_id": run_id,
        "policy_id": config.policy_id,
        "taxonomy": list(config.taxonomy),
        "day": day,
        "config_hash": config.config_hash,
        "config": config.raw,
        "inputs": inputs,
        "files": files,
        "sample_id": sample_id,
        "labeler": header["labeler"],
        "provider_metadata": labeled.metadata,
        "ingest": report.to_record(),
        "diagnostics": {
            "ci_width": glob["ci_high"] - glob["ci_low"],
            "ess": glob["ess"],
            "positive_rate": glob["sample_positive_rate"],
            "n_draws": glob["n_draws"],
            "abstentions": labeled.abstentions,
            "threshold": sample.threshold,
        },
        "gate": None if gold is None else gold.to_record(),
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    timing["finished"] = time.time()
    (tmp / "timing.json").write_text(json.dumps(timing, sort_keys=True) + "\n", encoding="utf-8")
    if run_dir.exists():
        shutil.rmtree(run_dir)
    tmp.rename(run_dir)
    return RunResult(run_dir, manifest, estimates, alert)


def _draw_row(d: SampleDraw) -> dict:
    return {
        "type": "draw",
        "content_id": d.content_id,
        "impressions": d.impressions,
        "segments": dict(sorted(d.segment_impressions.items())) if d.segment_impressions else None,
        "weight": d.weight,
        "draw_probability": d.draw_probability,
        "inclusion_probability": d.inclusion_probability,
        "label": d.label,
    }


def _estimate_from_lineage(header: Mapping, draws: Sequence[SampleDraw], gold: GoldSetReport | None,
                           sample_id: str) -> list[dict]:
    quality = None
    if header["rogan_gladen"] != "none":
        if gold is None:
            raise EstimationError("Rogan-Gladen correction requested without a gold-set report")
        quality = labeler_quality(gold)
    results = estimate_day(draws, Scheme(header["scheme"]), header["segments"], header["denominators"],
                           quality, header["rogan_gladen"])
    return estimate_records(results, header["day"], header["policy_id"], sample_id, header["abstentions"])


def load_lineage_sample(run_dir: str | Path) -> tuple[dict, list[SampleDraw], str]:
    text = (Path(run_dir) / "sample.jsonl").read_text(encoding="utf-8")
    rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    header, body = rows[0], rows[1:]
    draws = [
        SampleDraw(
            content_id=r["content_id"],
            impressions=r["impressions"],
            segment_impressions=r["segments"],
            draw_probability=r["draw_probability"],
            weight=r["weight"],
            inclusion_probability=r["inclusion_probability"],
            label=r["label"],
        )
        for r in body
    ]
    return header, draws, hashlib.sha256(text.encode()).hexdigest()


def replay_run(run_dir: str | Path) -> list[dict]:
    """Recompute a run's estimates from its persisted sample and gold report only."""
    run_dir = Path(run_dir)
    header, draws, sample_id = load_lineage_sample(run_dir)
    gold_rec = _read_json(run_dir / "gold_report.json")
    gold = GoldSetReport.from_record(gold_rec) if gold_rec else None
    return _estimate_from_lineage(header, draws, gold, sample_id)


# ---------------------------------------------------------------------------
# score-version consistency check


def measure(records: Iterable[ContentRecord], sampling: SamplingConfig, provider: LabelProvider,
            segments: Sequence[str] = (), fill_score: float | None = None) -> tuple[DaySample, LabeledSample, PrevalenceEstimate]:
    """In-memory sample, label and global estimate for one day."""
    records = list(records)
    if fill_score is None and any(r.score is None for r in records):
        fill_score = resolve_fill(records, sampling.score_imputation)
    sample = draw_sample(records, sampling, segments, fill_score)
    labeled = label_sample(sample.draws, provider)
    est = hh_ratio(labeled.draws) if sampling.scheme is Scheme.PPSWR else ht_hajek(labeled.draws)
    return sample, labeled, est


def _with_scores(records: Sequence[ContentRecord], scores: Mapping[str, float]) -> list[ContentRecord]:
    missing = [r.content_id for r in records if r.content_id not in scores]
    if missing:
        raise ScoreCoverageError(missing)
    return [replace(r, score=float(scores[r.content_id])) for r in records]


@dataclass
class ScoreComparison:
    theta_a: float
    theta_b: float
    variance_a: float
    variance_b: float
    ci_a: tuple[float, float]
    ci_b: tuple[float, float]
    z: float
    agree: bool
    sample_overlap: float
    uniform: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def ci_width_ratio(self) -> float:
        """CI width of version b relative to version a."""
        return (self.ci_b[1] - self.ci_b[0]) / (self.ci_a[1] - self.ci_a[0])

    def to_record(self) -> dict:
        return {
            "theta_a": self.theta_a, "theta_b": self.theta_b,
            "variance_a": self.variance_a, "variance_b": self.variance_b,
            "ci_a": list(self.ci_a), "ci_b": list(self.ci_b),
            "z": self.z, "agree": self.agree,
            "difference": self.theta_b - self.theta_a,
            "tolerance": self.z * math.sqrt(self.variance_a + self.variance_b),
            "ci_width_ratio": self.ci_width_ratio,
            "sample_overlap": self.sample_overlap,
            "uniform": self.uniform,
        }


def compare_scores(records: Sequence[ContentRecord], sampling: SamplingConfig, provider: LabelProvider,
                   scores_a: Mapping[str, float], scores_b: Mapping[str, float], z: float = 1.96,
                   include_uniform: bool = False) -> ScoreComparison:
    """Run the same day under two score versions and test agreement of the point estimates.

    Agreement means ``|theta_a - theta_b| <= z * sqrt(var_a + var_b)``.
    """
    _, lab_a, est_a = measure(_with_scores(records, scores_a), sampling, provider)
    _, lab_b, est_b = measure(_with_scores(records, scores_b), sampling, provider)
    tol = z * math.sqrt(est_a.variance + est_b.variance)
    ids_a = {d.content_id for d in lab_a.draws}
    ids_b = {d.content_id for d in lab_b.draws}
    overlap = len(ids_a & ids_b) / max(len(ids_a | ids_b), 1)
    uniform = None
    if include_uniform:
        flat = replace(sampling, gamma=0.0)
        _, _, est_u = measure(_with_scores(records, scores_a), flat, provider)
        uniform = {"theta": est_u.theta_hat, "variance": est_u.variance,
                   "ci": [est_u.ci_low, est_u.ci_high]}
    return ScoreComparison(
        est_a.theta_hat, est_b.theta_hat, est_a.variance, est_b.variance,
        (est_a.ci_low, est_a.ci_high), (est_b.ci_low, est_b.ci_high), z,
        abs(est_a.theta_hat - est_b.theta_hat) <= tol, overlap, uniform,
    )


def compare_score_versions(config: MetricConfig, day: str, score_source_a: str | Path, score_source_b: str | Path,
                           z: float = 1.96, include_uniform: bool = False) -> ScoreComparison:
    report = IngestReport()
    records = list(iter_impressions(config.source_path("impressions", day), report))
    provider = build_provider(config, day)
    return compare_scores(records, config.sampling, provider, read_scores(score_source_a),
                          read_scores(score_source_b), z, include_uniform)


# ---------------------------------------------------------------------------
# dashboard data


def emit_dashboard_data(estimates: Sequence[Mapping], path: str | Path,
                        series: alerting.DailySeries | None = None) -> tuple[Path, Path]:
    """Write ``timeseries.csv`` (global estimate per day with 7-day MA) and ``segments.csv``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    glob = sorted((e for e in estimates
                   if e.get("segment") == ALL_SEGMENTS and e.get("estimator_kind") in GLOBAL_KINDS),
                  key=lambda e: e["day"])
    if series is None:
        series = alerting.DailySeries([
            alerting.DailyPoint(dt.date.fromisoformat(e["day"]), e["theta_hat"], e.get("variance")) for e in glob
        ])
    ts_path = path / "timeseries.csv"
    with open(ts_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "theta_hat", "ci_low", "ci_high", "ess", "ma7"])
        for e in glob:
            try:
                ma = repr(alerting.moving_average_7(series, dt.date.fromisoformat(e["day"])))
            except alerting.SeriesGapError:
                ma = ""
            w.writerow([e["day"], repr(e["theta_hat"]), repr(e["ci_low"]), repr(e["ci_high"]), repr(e["ess"]), ma])
    seg_path = path / "segments.csv"
    with open(seg_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "segment", "estimator_kind", "theta_hat", "ci_low", "ci_high", "ess", "n_draws", "status"])
        for e in sorted(estimates, key=lambda e: (e["day"], e["segment"], e["estimator_kind"])):
            if "theta_hat" in e:
                w.writerow([e["day"], e["segment"], e["estimator_kind"], repr(e["theta_hat"]), repr(e["ci_low"]),
                            repr(e["ci_high"]), repr(e["ess"]), e["n_draws"], "ok"])
            else:
                w.writerow([e["day"], e["segment"], e["estimator_kind"], "", "", "", "", "", e.get("status", "")])
    return ts_path, seg_path
