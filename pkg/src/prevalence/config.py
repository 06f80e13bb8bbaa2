"""Metric configuration: loading, strict validation and content hashing.

A metric config is a JSON document with these top-level sections (all
required unless marked optional)::

    policy     {policy_id, taxonomy: [..]}
    sources    {impressions, scores?, truth?, labels?, gold_set?}
    sampling   {sample_size, nu, gamma, epsilon, scheme, seed, score_imputation}
    labeler    {kind, version_id, prompt_id?, model_id?, sensitivity?, false_positive_rate?,
                seed?, latency_ms?, abstain_rate?}
    quality    {enabled, thresholds: {min_accuracy?, min_precision?, min_recall?, min_f1?,
                max_false_positive_rate?, min_n?}}
    output     {directory, schema_version?}
    segments   [segment keys]                         (optional, default [])
    alerting   {alpha, power, window_days, gap_days, rule, sigma?, baseline?}   (optional)
    estimation {rogan_gladen: "none" | "global" | "per_segment"}              (optional)
    ingest     {max_error_rate}                                             (optional)

Source paths may contain ``{day}`` and are resolved relative to the config
file.  Unknown keys anywhere are rejected, and every problem is reported,
not just the first.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

from .labeling import QualityThresholds
from .sampler import DAY_MEDIAN, FixedImputation, SamplingConfig, Scheme

LABELER_KINDS = ("synthetic_oracle", "file_join", "mock_remote")
RG_MODES = ("none", "global", "per_segment")

_SCHEMA: dict[str, dict[str, tuple]] = {
    "policy": {"policy_id": (str,), "taxonomy": (list,)},
    "sources": {"impressions": (str,), "scores": (str,), "truth": (str,), "labels": (str,), "gold_set": (str,)},
    "sampling": {
        "sample_size": (int,), "nu": (int, float), "gamma": (int, float), "epsilon": (int, float),
        "scheme": (str,), "seed": (int,), "score_imputation": (str, dict),
    },
    "labeler": {
        "kind": (str,), "version_id": (str,), "prompt_id": (str,), "model_id": (str,),
        "sensitivity": (int, float), "false_positive_rate": (int, float), "seed": (int,),
        "latency_ms": (int, float), "abstain_rate": (int, float),
    },
    "quality": {"enabled": (bool,), "thresholds": (dict,)},
    "output": {"directory": (str,), "schema_version": (str, int)},
    "alerting": {
        "alpha": (int, float), "power": (int, float), "window_days": (int,), "gap_days": (int,),
        "rule": (str,), "sigma": (int, float), "baseline": (int, float),
    },
    "estimation": {"rogan_gladen": (str,)},
    "ingest": {"max_error_rate": (int, float)},
}
_REQUIRED_SECTIONS = ("policy", "sources", "sampling", "labeler", "quality", "output")
_REQUIRED_KEYS = {
    "policy": ("policy_id",),
    "sources": ("impressions",),
    "sampling": ("sample_size",),
    "labeler": ("kind", "version_id"),
    "quality": ("enabled",),
    "output": ("directory",),
}
_THRESHOLD_KEYS = {
    "min_accuracy", "min_precision", "min_recall", "min_f1", "max_false_positive_rate", "min_n",
}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid metric config:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class LabelerSpec:
    kind: str
    version_id: str
    prompt_id: str | None = None
    model_id: str | None = None
    sensitivity: float = 1.0
    false_positive_rate: float = 0.0
    seed: int = 0
    latency_ms: float = 0.0
    abstain_rate: float = 0.0


@dataclass(frozen=True)
class AlertingSpec:
    alpha: float = 0.05
    power: float = 0.8
    window_days: int = 7
    gap_days: int = 0
    rule: str = "mde"
    sigma: float | None = None
    baseline: float | None = None


@dataclass(frozen=True)
class MetricConfig:
    policy_id: str
    taxonomy: tuple[str, ...]
    sources: Mapping[str, str]
    sampling: SamplingConfig
    labeler: LabelerSpec
    quality_enabled: bool
    thresholds: QualityThresholds
    output_dir: Path
    segments: tuple[str, ...] = ()
    alerting: AlertingSpec = AlertingSpec()
    rogan_gladen: str = "none"
    max_error_rate: float = 0.0
    raw: Mapping = field(default_factory=dict, compare=False, repr=False)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)

    def source_path(self, name: str, day: str | None = None) -> Path | None:
        tmpl = self.sources.get(name)
        if tmpl is None:
            return None
        p = Path(tmpl.replace("{day}", day) if day is not None else tmpl)
        return p if p.is_absolute() else self.base_dir / p


def config_hash(raw: Mapping) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _check_types(section: str, body: Mapping, errors: list[str]) -> None:
    allowed = _SCHEMA[section]
    for key, value in body.items():
        if key not in allowed:
            errors.append(f"{section}.{key}: unknown key")
            continue
        types = allowed[key]
        if isinstance(value, bool) and bool not in types:
            errors.append(f"{section}.{key}: expected {'/'.join(t.__name__ for t in types)}, got bool")
        elif not isinstance(value, types):
            errors.append(f"{section}.{key}: expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")
    for key in _REQUIRED_KEYS.get(section, ()):
        if key not in body:
            errors.append(f"{section}.{key}: missing")


def _num(body: Mapping, key: str, default):
    v = body.get(key, default)
    return v if isinstance(v, (int, float)) and not isinstance(v, bool) else default


def validate_config(raw: Mapping, base_dir: str | Path = ".", check_paths: bool = True,
                    day: str | None = None) -> MetricConfig:
    """Validate a raw config mapping, aggregating all problems into one ConfigError."""
    errors: list[str] = []
    base_dir = Path(base_dir)
    if not isinstance(raw, Mapping):
        raise ConfigError(["config must be a JSON object"])
    allowed_top = set(_SCHEMA) | {"segments"}
    for key in raw:
        if key not in allowed_top:
            errors.append(f"{key}: unknown top-level key")
    for section in _REQUIRED_SECTIONS:
        if section not in raw:
            errors.append(f"{section}: missing section")
    sections = {}
    for section in _SCHEMA:
        body = raw.get(section, {})
        if not isinstance(body, Mapping):
            errors.append(f"{section}: must be an object")
            body = {}
        if section in raw:
            _check_types(section, body, errors)
        sections[section] = body

    policy = sections["policy"]
    taxonomy = policy.get("taxonomy", [])
    if isinstance(taxonomy, list) and not all(isinstance(t, str) for t in taxonomy):
        errors.append("policy.taxonomy: entries must be strings")
    if isinstance(policy.get("policy_id"), str) and not policy["policy_id"].strip():
        errors.append("policy.policy_id: must be non-empty")

    # sampling
    s = sections["sampling"]
    imputation = s.get("score_imputation", DAY_MEDIAN)
    imp_value: object = DAY_MEDIAN
    if isinstance(imputation, dict):
        if set(imputation) != {"fixed"} or not isinstance(imputation.get("fixed"), (int, float)):
            errors.append("sampling.score_imputation: expected 'day_median' or {\"fixed\": value}")
        elif not imputation["fixed"] > 0:
            errors.append("sampling.score_imputation.fixed: must be > 0")
        else:
            imp_value = FixedImputation(float(imputation["fixed"]))
    elif imputation != DAY_MEDIAN:
        errors.append("sampling.score_imputation: expected 'day_median' or {\"fixed\": value}")
    scheme = s.get("scheme", Scheme.PPSWOR.value)
    if scheme not in (Scheme.PPSWOR.value, Scheme.PPSWR.value):
        errors.append(f"sampling.scheme: must be PPSWOR or PPSWR, got {scheme!r}")
        scheme = Scheme.PPSWOR.value
    eps = _num(s, "epsilon", 1e-6)
    if not (math.isfinite(eps) and eps > 0):
        errors.append(f"sampling.epsilon: must be > 0 (the weight floor s^gamma + epsilon needs epsilon > 0), got {eps}")
    for key in ("nu", "gamma"):
        v = _num(s, key, 1.0)
        if not (math.isfinite(v) and v >= 0):
            errors.append(f"sampling.{key}: must be >= 0, got {v}")
    size = s.get("sample_size", 1)
    if isinstance(size, int) and not isinstance(size, bool) and size < 1:
        errors.append(f"sampling.sample_size: must be >= 1, got {size}")

    # labeler
    lab = sections["labeler"]
    kind = lab.get("kind")
    if kind is not None and kind not in LABELER_KINDS:
        errors.append(f"labeler.kind: must be one of {LABELER_KINDS}, got {kind!r}")
    for key in ("sensitivity", "false_positive_rate", "abstain_rate"):
        v = _num(lab, key, 0.0)
        if not 0.0 <= v <= 1.0:
            errors.append(f"labeler.{key}: must be in [0, 1]")
    src = sections["sources"]
    if kind in ("synthetic_oracle", "mock_remote") and "truth" not in src:
        errors.append(f"sources.truth: required by labeler kind {kind!r}")
    if kind == "file_join" and "labels" not in src:
        errors.append("sources.labels: required by labeler kind 'file_join'")

    # quality
    q = sections["quality"]
    thresholds = q.get("thresholds", {})
    if not isinstance(thresholds, dict):
        thresholds = {}
    for key, v in thresholds.items():
        if key not in _THRESHOLD_KEYS:
            errors.append(f"quality.thresholds.{key}: unknown key")
        elif not isinstance(v, (int, float)) or isinstance(v, bool):
            errors.append(f"quality.thresholds.{key}: must be a number")
        elif key != "min_n" and not 0.0 <= v <= 1.0:
            errors.append(f"quality.thresholds.{key}: must be in [0, 1]")
    if q.get("enabled") is True and "gold_set" not in src:
        errors.append("sources.gold_set: required when the quality gate is enabled")

    # segments
    segments = raw.get("segments", [])
    if not isinstance(segments, list) or not all(isinstance(g, str) and g for g in segments):
        errors.append("segments: must be a list of non-empty strings")
        segments = []
    elif len(set(segments)) != len(segments):
        errors.append("segments: duplicate keys")

    # alerting / estimation / ingest
    a = sections["alerting"]
    for key in ("alpha", "power"):
        v = _num(a, key, 0.05 if key == "alpha" else 0.8)
        if not 0 < v < 1:
            errors.append(f"alerting.{key}: must be in (0, 1)")
    if _num(a, "window_days", 7) < 1:
        errors.append("alerting.window_days: must be >= 1")
    if _num(a, "gap_days", 0) < 0:
        errors.append("alerting.gap_days: must be >= 0")
    if a.get("rule", "mde") not in ("mde", "critical"):
        errors.append("alerting.rule: must be 'mde' or 'critical'")
    if "sigma" in a and _num(a, "sigma", 0.0) < 0:
        errors.append("alerting.sigma: must be >= 0")
    rg = sections["estimation"].get("rogan_gladen", "none")
    if rg not in RG_MODES:
        errors.append(f"estimation.rogan_gladen: must be one of {RG_MODES}")
    if rg != "none" and "gold_set" not in src:
        errors.append("sources.gold_set: required for the Rogan-Gladen correction")
    mer = _num(sections["ingest"], "max_error_rate", 0.0)
    if not 0.0 <= mer <= 1.0:
        errors.append("ingest.max_error_rate: must be in [0, 1]")

    if check_paths:
        for name, tmpl in src.items():
            if not isinstance(tmpl, str):
                continue
            if day is None and "{day}" in tmpl:
                continue
            p = Path(tmpl.replace("{day}", day or ""))
            p = p if p.is_absolute() else base_dir / p
            if not p.exists():
                errors.append(f"sources.{name}: path not found: {p}")

    if errors:
        raise ConfigError(errors)

    sampling = SamplingConfig(
        sample_size=s["sample_size"],
        nu=float(s.get("nu", 1.0)),
        gamma=float(s.get("gamma", 1.0)),
        epsilon=float(eps),
        scheme=Scheme(scheme),
        seed=int(s.get("seed", 0)),
        score_imputation=imp_value,
    )
    out_dir = Path(sections["output"]["directory"])
    return MetricConfig(
        policy_id=policy["policy_id"],
        taxonomy=tuple(taxonomy),
        sources=dict(src),
        sampling=sampling,
        labeler=LabelerSpec(**lab),
        quality_enabled=bool(q["enabled"]),
        thresholds=QualityThresholds.from_mapping(thresholds),
        output_dir=out_dir if out_dir.is_absolute() else base_dir / out_dir,
        segments=tuple(segments),
        alerting=AlertingSpec(**a),
        rogan_gladen=rg,
        max_error_rate=float(mer),
        raw=copy.deepcopy(dict(raw)),
        base_dir=base_dir,
    )


def load_config(path: str | Path, check_paths: bool = True, day: str | None = None) -> MetricConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from None
    return validate_config(raw, base_dir=path.parent, check_paths=check_paths, day=day)
