"""ML-assisted probability sampling over impression logs.

Two designs are supported:

* PPSWOR via a weighted reservoir (Efraimidis-Spirakis keys).  One pass,
  ``O(m)`` memory, order independent because each unit's uniform is a keyed
  hash of ``(seed, content_id)``.  Reservoirs built on disjoint shards merge
  into exactly the reservoir of the concatenated stream.
* PPSWR via multinomial draws from ``p_j = w_j / sum(w)``.  Needs the
  finished weight total, so it is two-pass over a materialized weight list.
"""

from __future__ import annotations

import enum
import heapq
import math
import statistics
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from .hashing import STREAM_RESERVOIR, hashed_uniform

DEFAULT_EPSILON = 1e-6


class SamplingError(ValueError):
    """Invalid input to a sampling operation."""


class DuplicateContentError(SamplingError):
    """The same content unit appeared twice in one day's stream."""


class Scheme(str, enum.Enum):
    PPSWOR = "PPSWOR"
    PPSWR = "PPSWR"


@dataclass(frozen=True)
class ContentRecord:
    """One content unit's impressions for a day.

    ``segment_impressions`` maps segment keys to impression counts and, when
    given, must add up to ``impressions``.  ``score`` is the auxiliary model
    risk score in (0, 1]; ``None`` means missing.
    """

    content_id: str
    impressions: int
    segment_impressions: Mapping[str, int] | None = None
    score: float | None = None

    def __post_init__(self):
        if self.impressions < 0:
            raise SamplingError(f"{self.content_id}: negative impressions")
        if self.segment_impressions is not None:
            if any(v < 0 for v in self.segment_impressions.values()):
                raise SamplingError(f"{self.content_id}: negative segment impressions")
            total = sum(self.segment_impressions.values())
            if total != self.impressions:
                raise SamplingError(
                    f"{self.content_id}: segment impressions sum to {total}, "
                    f"expected {self.impressions}"
                )
        if self.score is not None and not (0.0 < self.score <= 1.0):
            raise SamplingError(f"{self.content_id}: score {self.score} outside (0, 1]")


@dataclass(frozen=True)
class FixedImputation:
    value: float

    def __post_init__(self):
        if not self.value > 0:
            raise SamplingError("fixed imputation value must be > 0")


DAY_MEDIAN = "day_median"


@dataclass(frozen=True)
class SamplingConfig:
    sample_size: int
    nu: float = 1.0
    gamma: float = 1.0
    epsilon: float = DEFAULT_EPSILON
    scheme: Scheme = Scheme.PPSWOR
    seed: int = 0
    score_imputation: str | FixedImputation = DAY_MEDIAN

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        errors = self.problems()
        if errors:
            raise SamplingError("; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        if not (isinstance(self.sample_size, int) and self.sample_size >= 1):
            out.append("sample_size must be an integer >= 1")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            out.append("epsilon must be > 0 (weights C^nu * (s^gamma + epsilon) need a positive floor)")
        if not (math.isfinite(self.nu) and self.nu >= 0):
            out.append("nu must be >= 0")
        if not (math.isfinite(self.gamma) and self.gamma >= 0):
            out.append("gamma must be >= 0")
        if not (self.score_imputation == DAY_MEDIAN or isinstance(self.score_imputation, FixedImputation)):
            out.append("score_imputation must be 'day_median' or FixedImputation")
        return out


@dataclass
class SampleDraw:
    """A sampled unit with everything the estimator needs."""

    content_id: str
    impressions: int
    segment_impressions: Mapping[str, int] | None
    draw_probability: float
    weight: float
    inclusion_probability: float | None = None
    label: int | None = None

    def __post_init__(self):
        if not self.draw_probability > 0:
            raise SamplingError(f"{self.content_id}: draw probability must be > 0")

    def segment_x(self, segment: str) -> int:
        if segment == ALL_SEGMENTS:
            return self.impressions
        if self.segment_impressions is None:
            return 0
        return self.segment_impressions.get(segment, 0)


ALL_SEGMENTS = "ALL"


def compute_weight(record: ContentRecord, config: SamplingConfig, imputed_score: float | None = None) -> float:
    """Sampling weight ``C**nu * (s**gamma + epsilon)``.

    ``imputed_score`` is used only when the record has no score.
    """
    if record.impressions < 1:
        raise SamplingError(f"{record.content_id}: out of frame (no impressions)")
    s = record.score if record.score is not None else imputed_score
    if s is None or not s > 0:
        raise SamplingError(f"{record.content_id}: no usable score (got {s!r})")
    try:
        w = float(record.impressions) ** config.nu * (s**config.gamma + config.epsilon)
    except OverflowError:
        w = math.inf
    if not math.isfinite(w) or w <= 0:
        raise SamplingError(f"{record.content_id}: non-finite or non-positive weight {w!r}")
    return w


def compute_weights(impressions, scores, nu: float, gamma: float, epsilon: float) -> np.ndarray:
    """Vectorized :func:`compute_weight` for array populations."""
    c = np.asarray(impressions, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    with np.errstate(over="ignore"):
        w = c**nu * (s**gamma + epsilon)
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        bad = int(np.flatnonzero(~np.isfinite(w) | (w <= 0))[0])
        raise SamplingError(f"item {bad}: non-finite or non-positive weight {w[bad]!r}")
    return w


def day_median(scores: Iterable[float | None]) -> float:
    present = [s for s in scores if s is not None]
    if not present:
        raise SamplingError(
            "no scores present for the day; day_median imputation is undefined, "
            "configure a fixed imputation value instead"
        )
    return float(statistics.median(present))


def impute_score(records: Iterable[ContentRecord], policy: str | FixedImputation = DAY_MEDIAN) -> list[float]:
    """Per-record scores with missing values filled by the day's median or a fixed value."""
    records = list(records)
    if isinstance(policy, FixedImputation):
        fill = policy.value
    elif policy == DAY_MEDIAN:
        fill = day_median(r.score for r in records)
    else:
        raise SamplingError(f"unknown imputation policy {policy!r}")
    return [r.score if r.score is not None else fill for r in records]


def reservoir_key(weight: float, uniform: float) -> float:
    """Exponential-race key ``-ln(U) / w``; smaller keys win."""
    if not weight > 0:
        raise SamplingError("weight must be > 0")
    if not (0.0 < uniform <= 1.0):
        raise SamplingError(f"uniform {uniform!r} outside (0, 1]")
    return -math.log(uniform) / weight


def inclusion_probability(weight: float, threshold: float | None) -> float:
    """Poissonized PPSWOR inclusion probability ``1 - exp(-w * tau)``."""
    if threshold is None:
        raise SamplingError("reservoir never filled: threshold undefined, inclusion probability unavailable")
    if not weight > 0 or not threshold > 0:
        raise SamplingError("weight and threshold must be > 0")
    return -math.expm1(-weight * threshold)


class ExactSum:
    """Order-independent float accumulator.

    Keeps Shewchuk's non-overlapping partials, so the rounded value of the
    total does not depend on the order in which terms (or other
    accumulators) were added.
    """

    __slots__ = ("partials",)

    def __init__(self, partials: Sequence[float] = ()):
        self.partials: list[float] = []
        for x in partials:
            self.add(x)

    def add(self, x: float) -> None:
        i = 0
        for y in self.partials:
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo:
                self.partials[i] = lo
                i += 1
            x = hi
        self.partials[i:] = [x]

    def merge(self, other: ExactSum) -> ExactSum:
        out = ExactSum(self.partials)
        for p in other.partials:
            out.add(p)
        return out

    @property
    def value(self) -> float:
        return math.fsum(self.partials)


class _Entry:
    """Heap entry ordered so the *largest* (key, content_id) sits on top."""

    __slots__ = ("key", "content_id", "weight", "record")

    def __init__(self, key: float, content_id: str, weight: float, record: ContentRecord):
        self.key = key
        self.content_id = content_id
        self.weight = weight
        self.record = record

    def rank(self) -> tuple[float, str]:
        return (self.key, self.content_id)

    def __lt__(self, other: _Entry) -> bool:
        return self.rank() > other.rank()


@dataclass
class Reservoir:
    """Fixed-capacity PPSWOR reservoir keeping the ``capacity`` smallest keys.

    Ties on the key are broken by content id.  Duplicate detection covers
    the retained entries only; a complete check needs the set of all ids
    and is done by ingestion.
    """

    capacity: int
    seed: int = 0
    _heap: list[_Entry] = field(default_factory=list, repr=False)
    _ids: set[str] = field(default_factory=set, repr=False)
    _total: ExactSum = field(default_factory=ExactSum, repr=False)
    items_seen: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise SamplingError("reservoir capacity must be >= 1")

    def __len__(self) -> int:
        return len(self._heap)

    @property
    def full(self) -> bool:
        return len(self._heap) >= self.capacity

    @property
    def threshold(self) -> float | None:
        """The m-th smallest key; ``None`` until the reservoir is full."""
        return self._heap[0].key if self.full else None

    @property
    def total_weight_seen(self) -> float:
        return self._total.value

    def offer(self, record: ContentRecord, key: float, weight: float) -> bool:
        """Offer a unit with a precomputed key. Returns whether it was retained."""
        if not key >= 0:
            raise SamplingError(f"{record.content_id}: key must be >= 0")
        if record.content_id in self._ids:
            raise DuplicateContentError(f"duplicate content_id {record.content_id!r} in stream")
        self.items_seen += 1
        self._total.add(weight)
        entry = _Entry(key, record.content_id, weight, record)
        if not self.full:
            heapq.heappush(self._heap, entry)
            self._ids.add(record.content_id)
            return True
        top = self._heap[0]
        if entry.rank() < top.rank():
            heapq.heapreplace(self._heap, entry)
            self._ids.discard(top.content_id)
            self._ids.add(record.content_id)
            return True
        return False

    def add(self, record: ContentRecord, weight: float) -> bool:
        """Key a unit from its hashed uniform and offer it."""
        u = hashed_uniform(self.seed, record.content_id, STREAM_RESERVOIR)
        return self.offer(record, reservoir_key(weight, u), weight)

    def entries(self) -> list[_Entry]:
        """Retained entries in increasing key order."""
        return sorted(self._heap, key=_Entry.rank)

    def keys(self) -> list[tuple[float, str]]:
        return [e.rank() for e in self.entries()]

    def draws(self) -> list[SampleDraw]:
        """Retained units as sample draws.

        An underfull reservoir holds the whole population (a census), so
        every inclusion probability is 1.
        """
        total = self.total_weight_seen
        tau = self.threshold
        out = []
        for e in self.entries():
            pi = 1.0 if tau is None else inclusion_probability(e.weight, tau)
            out.append(
                SampleDraw(
                    content_id=e.content_id,
                    impressions=e.record.impressions,
                    segment_impressions=e.record.segment_impressions,
                    draw_probability=e.weight / total,
                    weight=e.weight,
                    inclusion_probability=pi,
                )
            )
        return out


def reservoir_offer(reservoir: Reservoir, record: ContentRecord, key: float, weight: float = 1.0) -> Reservoir:
    reservoir.offer(record, key, weight)
    return reservoir


def merge_reservoirs(a: Reservoir, b: Reservoir) -> Reservoir:
    """Reservoir of the union of two disjoint shards.

    Returns a new reservoir; the inputs are left untouched.
    """
    if a.capacity != b.capacity:
        raise SamplingError(f"capacity mismatch: {a.capacity} != {b.capacity}")
    if a.seed != b.seed:
        raise SamplingError(f"seed mismatch: {a.seed} != {b.seed}")
    shared = a._ids & b._ids
    if shared:
        raise DuplicateContentError(f"content ids present in both shards: {sorted(shared)[:5]}")
    merged = Reservoir(capacity=a.capacity, seed=a.seed)
    kept = heapq.nsmallest(a.capacity, a._heap + b._heap, key=_Entry.rank)
    merged._heap = list(kept)
    heapq.heapify(merged._heap)
    merged._ids = {e.content_id for e in kept}
    merged._total = a._total.merge(b._total)
    merged.items_seen = a.items_seen + b.items_seen
    return merged


def build_reservoir(records: Iterable[ContentRecord], config: SamplingConfig, scores: Iterable[float] | None = None) -> Reservoir:
    """One-pass PPSWOR over ``records``.

    ``scores`` supplies the imputed score per record (aligned); when omitted
    the record's own score is required.
    """
    res = Reservoir(capacity=config.sample_size, seed=config.seed)
    if scores is None:
        for rec in records:
            res.add(rec, compute_weight(rec, config))
    else:
        for rec, s in zip(records, scores, strict=True):
            res.add(rec, compute_weight(rec, config, s))
    return res


def ppswr_sample(population: Sequence[tuple[ContentRecord, float]], m: int, seed: int) -> list[SampleDraw]:
    """``m`` i.i.d. multinomial draws with ``p_j = w_j / sum(w)``."""
    if not population:
        raise SamplingError("empty population")
    if m < 1:
        raise SamplingError("m must be >= 1")
    weights = np.array([w for _, w in population], dtype=np.float64)
    if not np.all(weights > 0) or not np.all(np.isfinite(weights)):
        raise SamplingError("all weights must be finite and > 0")
    total = math.fsum(weights.tolist())
    cdf = np.cumsum(weights)
    rng = np.random.default_rng(seed)
    u = rng.random(m) * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(weights) - 1)
    out = []
    for i in idx.tolist():
        rec, w = population[i]
        out.append(
            SampleDraw(
                content_id=rec.content_id,
                impressions=rec.impressions,
                segment_impressions=rec.segment_impressions,
                draw_probability=w / total,
                weight=w,
            )
        )
    return out


def with_label(draw: SampleDraw, label: int | None) -> SampleDraw:
    return replace(draw, label=label)
