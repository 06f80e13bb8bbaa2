"""Label providers and gold-set decision-quality checks.

Providers map content ids to a label in ``{0, 1}`` or ``None`` (abstain).
All of them are in-process so tests stay hermetic; ``MockRemoteProvider``
stands in for a remote model labeler with configurable error rates.
"""

from __future__ import annotations

import json
import math
import random
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .estimator import LabelerQuality
from .hashing import STREAM_LABELER, hashed_uniform
from .sampler import SampleDraw, with_label


class LabelingError(ValueError):
    pass


class MissingLabelsError(LabelingError):
    """Some sampled ids have no label in the delivered file."""

    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__(f"{len(self.missing)} sampled ids have no label: {self.missing[:10]}")


class LabelProvider:
    kind = "base"

    def __init__(self, version_id: str):
        self.version_id = version_id
        self.metadata: dict = {}

    def label(self, content_ids: Sequence[str]) -> dict[str, int | None]:
        raise NotImplementedError


class SyntheticOracleProvider(LabelProvider):
    """Labels straight from simulation ground truth."""

    kind = "synthetic_oracle"

    def __init__(self, truth: Mapping[str, int], version_id: str = "oracle"):
        super().__init__(version_id)
        self.truth = truth

    def label(self, content_ids):
        missing = [c for c in content_ids if c not in self.truth]
        if missing:
            raise MissingLabelsError(missing)
        return {c: int(self.truth[c]) for c in content_ids}


class FileJoinProvider(LabelProvider):
    """Labels joined from a delivered line-delimited label file.

    Each line is ``{"content_id", "label", "provider_version", "confidence"?}``
    with ``label`` null for an abstention.
    """

    kind = "file_join"

    def __init__(self, labels: Mapping[str, int | None], version_id: str = "file"):
        super().__init__(version_id)
        self.labels = labels

    @classmethod
    def from_file(cls, path: str | Path, version_id: str | None = None) -> FileJoinProvider:
        labels: dict[str, int | None] = {}
        versions = set()
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                row = json.loads(line)
                lab = row.get("label")
                if lab not in (0, 1, None):
                    raise LabelingError(f"{path}:{n}: label must be 0, 1 or null")
                labels[str(row["content_id"])] = lab
                if row.get("provider_version"):
                    versions.add(row["provider_version"])
        if version_id is None:
            version_id = ",".join(sorted(versions)) or "file"
        return cls(labels, version_id)

    def label(self, content_ids):
        missing = [c for c in content_ids if c not in self.labels]
        if missing:
            raise MissingLabelsError(missing)
        return {c: self.labels[c] for c in content_ids}


class MockRemoteProvider(LabelProvider):
    """Deterministic stand-in for a remote labeler.

    A true positive is reported as 1 with probability ``sensitivity``; a true
    negative is reported as 1 with probability ``false_positive_rate``.  The
    coin for each unit is a keyed hash of ``(seed, content_id)``, so labels
    do not depend on call order or batching.  Latency is simulated by
    accounting only (nothing sleeps).
    """

    kind = "mock_remote"

    def __init__(self, truth: Mapping[str, int], sensitivity: float = 1.0, false_positive_rate: float = 0.0,
                 seed: int = 0, latency_ms: float = 0.0, abstain_rate: float = 0.0,
                 version_id: str = "mock-remote"):
        super().__init__(version_id)
        if not (0 <= sensitivity <= 1 and 0 <= false_positive_rate <= 1 and 0 <= abstain_rate < 1):
            raise LabelingError("rates must be in [0, 1]")
        self.truth = truth
        self.sensitivity = sensitivity
        self.false_positive_rate = false_positive_rate
        self.seed = seed
        self.latency_ms = latency_ms
        self.abstain_rate = abstain_rate
        self.metadata = {"calls": 0, "simulated_latency_ms": 0.0}

    def label_one(self, content_id: str, truth: int) -> int | None:
        u = hashed_uniform(self.seed, content_id, STREAM_LABELER)
        if self.abstain_rate and u > 1.0 - self.abstain_rate:
            return None
        # rescale so the abstention slice does not bias the flip coin
        u = u / (1.0 - self.abstain_rate)
        p_one = self.sensitivity if truth else self.false_positive_rate
        return int(u <= p_one)

    def label(self, content_ids):
        missing = [c for c in content_ids if c not in self.truth]
        if missing:
            raise MissingLabelsError(missing)
        self.metadata["calls"] += 1
        self.metadata["simulated_latency_ms"] += self.latency_ms * len(content_ids)
        return {c: self.label_one(c, int(self.truth[c])) for c in content_ids}


@dataclass
class LabeledSample:
    draws: list[SampleDraw]
    provider_kind: str
    provider_version: str
    abstentions: int
    metadata: dict = field(default_factory=dict)

    @property
    def labeled(self) -> list[SampleDraw]:
        return [d for d in self.draws if d.label is not None]


def label_sample(draws: Sequence[SampleDraw], provider: LabelProvider) -> LabeledSample:
    """Attach a label (or abstention) to every draw.

    Repeated draws of the same unit (PPSWR) share one label.
    """
    ids = list(dict.fromkeys(d.content_id for d in draws))
    labels = provider.label(ids)
    out = [with_label(d, labels[d.content_id]) for d in draws]
    abst = sum(1 for d in out if d.label is None)
    return LabeledSample(out, provider.kind, provider.version_id, abst, dict(provider.metadata))


def validation_subsample(draws: Sequence[SampleDraw], k: int, seed: int, by: str = "uniform") -> list[SampleDraw]:
    """Pick ``k`` distinct sampled units for human validation.

    ``by='uniform'`` picks uniformly among distinct units; ``by='weight'``
    picks proportionally to the sampling weight.
    """
    units = list({d.content_id: d for d in draws}.values())
    k = min(k, len(units))
    rng = random.Random(seed)
    if by == "uniform":
        return rng.sample(units, k)
    if by == "weight":
        keys = sorted(units, key=lambda d: -math.log(1.0 - rng.random()) / d.weight)
        return keys[:k]
    raise LabelingError(f"unknown subsample scheme {by!r}")


# ---------------------------------------------------------------------------
# gold set


@dataclass(frozen=True)
class GoldSetReport:
    tp: int
    fp: int
    tn: int
    fn: int
    passed: bool | None = None
    reasons: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n

    @property
    def precision(self) -> float | None:
        d = self.tp + self.fp
        return self.tp / d if d else None

    @property
    def recall(self) -> float | None:
        """Sensitivity ``r``; ``None`` when the gold set has no positives."""
        d = self.tp + self.fn
        return self.tp / d if d else None

    sensitivity = recall

    @property
    def false_positive_rate(self) -> float | None:
        d = self.fp + self.tn
        return self.fp / d if d else None

    @property
    def f1(self) -> float | None:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    @staticmethod
    def _se(p: float | None, n: int) -> float | None:
        return None if p is None or n == 0 else math.sqrt(p * (1 - p) / n)

    @property
    def accuracy_se(self) -> float:
        return self._se(self.accuracy, self.n)

    @property
    def precision_se(self) -> float | None:
        return self._se(self.precision, self.tp + self.fp)

    @property
    def recall_se(self) -> float | None:
        return self._se(self.recall, self.tp + self.fn)

    @property
    def fpr_se(self) -> float | None:
        return self._se(self.false_positive_rate, self.fp + self.tn)

    def to_record(self) -> dict:
        return {
            "n": self.n, "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
            "f1": self.f1, "false_positive_rate": self.false_positive_rate,
            "accuracy_se": self.accuracy_se, "precision_se": self.precision_se,
            "recall_se": self.recall_se, "fpr_se": self.fpr_se,
            "pass": self.passed, "reasons": list(self.reasons),
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> GoldSetReport:
        return cls(rec["tp"], rec["fp"], rec["tn"], rec["fn"], rec.get("pass"), tuple(rec.get("reasons", ())))


@dataclass(frozen=True)
class QualityThresholds:
    """Minimum decision-quality bar. ``None`` disables a check."""

    min_accuracy: float | None = None
    min_precision: float | None = None
    min_recall: float | None = None
    min_f1: float | None = None
    max_false_positive_rate: float | None = None
    min_n: int = 1

    @classmethod
    def from_mapping(cls, m: Mapping) -> QualityThresholds:
        return cls(**m)


def evaluate_gold_set(predictions: Sequence[int], truths: Sequence[int],
                      thresholds: QualityThresholds | None = None) -> GoldSetReport:
    if len(predictions) != len(truths):
        raise LabelingError("predictions and truths differ in length")
    if not predictions:
        raise LabelingError("empty gold set")
    tp = fp = tn = fn = 0
    for p, t in zip(predictions, truths):
        if p not in (0, 1) or t not in (0, 1):
            raise LabelingError("gold-set values must be 0 or 1")
        if t:
            tp += p
            fn += 1 - p
        else:
            fp += p
            tn += 1 - p
    report = GoldSetReport(tp, fp, tn, fn)
    if thresholds is not None:
        gate = quality_gate(report, thresholds)
        report = GoldSetReport(tp, fp, tn, fn, gate.passed, gate.reasons)
    return report


def read_gold_file(path: str | Path) -> tuple[list[int], list[int]]:
    preds, truths = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                truths.append(int(row["truth"]))
                preds.append(int(row["prediction"]))
    return preds, truths


@dataclass(frozen=True)
class GateResult:
    passed: bool
    reasons: tuple[str, ...]


def quality_gate(report: GoldSetReport, thresholds: QualityThresholds) -> GateResult:
    """Deterministic pass/fail; every violated threshold is listed."""
    reasons = []
    if report.n < thresholds.min_n:
        reasons.append(f"n: {report.n} < {thresholds.min_n}")
    if report.recall is None:
        reasons.append("insufficient gold positives: recall undefined")
    if report.false_positive_rate is None and thresholds.max_false_positive_rate is not None:
        reasons.append("insufficient gold negatives: false_positive_rate undefined")
    checks: Iterable[tuple[str, float | None, float | None, bool]] = (
        ("accuracy", report.accuracy, thresholds.min_accuracy, True),
        ("precision", report.precision, thresholds.min_precision, True),
        ("recall", report.recall, thresholds.min_recall, True),
        ("f1", report.f1, thresholds.min_f1, True),
        ("false_positive_rate", report.false_positive_rate, thresholds.max_false_positive_rate, False),
    )
    for name, value, bound, is_min in checks:
        if bound is None:
            continue
        if value is None:
            if name not in ("recall", "false_positive_rate"):
                reasons.append(f"{name}: undefined")
            continue
        if is_min and value < bound:
            reasons.append(f"{name}: {value:.6g} < {bound}")
        elif not is_min and value > bound:
            reasons.append(f"{name}: {value:.6g} > {bound}")
    return GateResult(not reasons, tuple(reasons))


def labeler_quality(report: GoldSetReport) -> LabelerQuality:
    """``LabelerQuality`` (r, f and their standard errors) from a gold-set report."""
    if report.recall is None or report.false_positive_rate is None:
        raise LabelingError("gold set needs both positives and negatives to estimate (r, f)")
    return LabelerQuality(report.recall, report.false_positive_rate, report.recall_se, report.fpr_se)
