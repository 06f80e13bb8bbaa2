"""Design-based prevalence estimators.

All estimators are ratio or mean estimators over per-draw expansion
factors ``1/p_i`` where the sample has ``m`` draws and ``p_i`` is the draw
probability (PPSWR).  Without-replacement samples are handled by setting
``p_i = pi_i / m`` so that ``(1/m) * sum(z_i / p_i) = sum(z_i / pi_i)``
(Hajek form); the with-replacement variance is then a conservative
approximation and the estimate is flagged accordingly.

Sums go through :func:`math.fsum` because inverse probabilities can span
many orders of magnitude.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

from .sampler import ALL_SEGMENTS, SampleDraw

Z_95 = 1.96


class EstimationError(ValueError):
    """The estimate is undefined for the given sample."""


class EmptySegmentError(EstimationError):
    """No sampled impressions fall in the requested segment."""

    code = "insufficient_sample"


class EstimatorKind(str, enum.Enum):
    HH_RATIO = "HH_ratio"
    HT_KNOWN_DENOMINATOR = "HT_known_denominator"
    HT_HAJEK = "HT_hajek"


class Design(str, enum.Enum):
    PPSWR = "PPSWR"
    PPSWOR = "PPSWOR"


# flag names shared with the output records
FLAG_CLAMPED = "clamped"
FLAG_THETA_CLAMPED = "theta_clamped"
FLAG_NO_VARIANCE = "variance_unavailable"
FLAG_RG = "rg_corrected"
FLAG_RG_CLAMPED = "rg_clamped"
FLAG_WOR_APPROX = "wor_variance_approx"


@dataclass(frozen=True)
class PrevalenceEstimate:
    theta_hat: float
    variance: float | None
    ci_low: float
    ci_high: float
    ess: float
    sample_positive_rate: float
    n_draws: int
    estimator_kind: EstimatorKind
    segment: str = ALL_SEGMENTS
    numerator: float | None = None
    denominator: float | None = None
    raw_ci: tuple[float, float] | None = None
    flags: tuple[str, ...] = ()
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def half_width(self) -> float | None:
        return None if self.variance is None else Z_95 * math.sqrt(self.variance)

    def to_record(self) -> dict:
        return {
            "segment": self.segment,
            "estimator_kind": self.estimator_kind.value,
            "theta_hat": self.theta_hat,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "variance": self.variance,
            "ess": self.ess,
            "sample_positive_rate": self.sample_positive_rate,
            "n_draws": self.n_draws,
            "numerator": self.numerator,
            "denominator": self.denominator,
            "raw_ci": list(self.raw_ci) if self.raw_ci is not None else None,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class LabelerQuality:
    """Labeler sensitivity ``r`` and false positive rate ``f`` with standard errors."""

    sensitivity: float
    false_positive_rate: float
    sensitivity_se: float = 0.0
    fpr_se: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.sensitivity <= 1.0):
            raise EstimationError("sensitivity must be in (0, 1]")
        if not (0.0 <= self.false_positive_rate < 1.0):
            raise EstimationError("false positive rate must be in [0, 1)")
        if self.sensitivity <= self.false_positive_rate:
            raise EstimationError("sensitivity must exceed the false positive rate for the correction to exist")


# ---------------------------------------------------------------------------
# array-level core


def _labeled(draws: Sequence[SampleDraw]) -> list[SampleDraw]:
    out = [d for d in draws if d.label is not None]
    if not out:
        raise EstimationError("no labeled draws")
    return out


def _probabilities(draws: Sequence[SampleDraw], design: Design) -> list[float]:
    if design is Design.PPSWR:
        return [d.draw_probability for d in draws]
    m = len(draws)
    ps = []
    for d in draws:
        if d.inclusion_probability is None:
            raise EstimationError(
                f"{d.content_id}: inclusion probability missing; supply the reservoir threshold tau"
            )
        if not d.inclusion_probability > 0:
            raise EstimationError(f"{d.content_id}: inclusion probability must be > 0")
        ps.append(d.inclusion_probability / m)
    return ps


def hh_total(values: Sequence[float], probs: Sequence[float]) -> float:
    """Hansen-Hurwitz mean estimator ``(1/m) sum(v_i / p_i)`` of a population total."""
    m = len(values)
    return math.fsum(v / p for v, p in zip(values, probs)) / m


def ratio_theta(x: Sequence[float], z: Sequence[float], probs: Sequence[float]) -> tuple[float, float, float]:
    """``(theta, Z_hat, X_hat)`` for the HH ratio estimator."""
    x_hat = hh_total(x, probs)
    if not x_hat > 0:
        raise EstimationError("estimated impression total is zero; ratio undefined")
    z_hat = hh_total(z, probs)
    return z_hat / x_hat, z_hat, x_hat


def ratio_theta_arrays(x, z, probs) -> float:
    """Array fast path of :func:`ratio_theta` returning only theta."""
    x_hat = math.fsum((x / probs).tolist())
    if not x_hat > 0:
        raise EstimationError("estimated impression total is zero; ratio undefined")
    return math.fsum((z / probs).tolist()) / x_hat


def residuals(x: Sequence[float], z: Sequence[float], probs: Sequence[float], theta: float) -> list[float]:
    """Linearized residuals ``(z_i - theta * x_i) / p_i``."""
    return [(zi - theta * xi) / p for xi, zi, p in zip(x, z, probs)]


def _dispersion(values: Sequence[float]) -> float:
    m = len(values)
    mean = math.fsum(values) / m
    return math.fsum((v - mean) ** 2 for v in values)


def variance_taylor(x: Sequence[float], z: Sequence[float], probs: Sequence[float], theta: float) -> float:
    """Taylor-linearized variance of the ratio estimator.

    ``(1 / X_hat**2) * sum((r_i - r_bar)**2) / (m (m - 1))``.
    """
    m = len(x)
    if m < 2:
        raise EstimationError("variance needs at least 2 draws")
    x_hat = hh_total(x, probs)
    r = residuals(x, z, probs, theta)
    return _dispersion(r) / (m * (m - 1)) / (x_hat * x_hat)


def kish_ess(a: Sequence[float]) -> float:
    """Kish effective sample size ``(sum a)**2 / sum(a**2)``."""
    if not a:
        raise EstimationError("ESS needs at least one draw")
    s2 = math.fsum(v * v for v in a)
    if s2 == 0:
        raise EstimationError("all expansion weights are zero; ESS undefined")
    s = math.fsum(a)
    return s * s / s2


def confidence_interval(theta: float, variance: float, z: float = Z_95) -> tuple[tuple[float, float], tuple[float, float]]:
    """Return ``(reported, raw)`` intervals; the reported one is clamped to [0, 1]."""
    if variance < 0:
        raise EstimationError("variance must be >= 0")
    h = z * math.sqrt(variance)
    raw = (theta - h, theta + h)
    return (min(max(raw[0], 0.0), 1.0), min(max(raw[1], 0.0), 1.0)), raw


def _finish(
    *,
    theta: float,
    variance: float | None,
    a: Sequence[float],
    labels: Sequence[int],
    x: Sequence[float],
    kind: EstimatorKind,
    segment: str,
    numerator: float,
    denominator: float,
    flags: list[str],
) -> PrevalenceEstimate:
    active = [lab for lab, xi in zip(labels, x) if xi > 0]
    n = len(active)
    pos_rate = sum(active) / n if n else 0.0
    ess = kish_ess(a)
    if not 0.0 <= theta <= 1.0:
        flags.append(FLAG_THETA_CLAMPED)
        theta = min(max(theta, 0.0), 1.0)
    if variance is None:
        flags.append(FLAG_NO_VARIANCE)
        ci, raw = (0.0, 1.0), None
    else:
        ci, raw = confidence_interval(theta, variance)
        if ci != raw:
            flags.append(FLAG_CLAMPED)
    return PrevalenceEstimate(
        theta_hat=theta,
        variance=variance,
        ci_low=ci[0],
        ci_high=ci[1],
        ess=ess,
        sample_positive_rate=pos_rate,
        n_draws=n,
        estimator_kind=kind,
        segment=segment,
        numerator=numerator,
        denominator=denominator,
        raw_ci=raw,
        flags=tuple(flags),
    )


def _ratio_estimate(draws: Sequence[SampleDraw], segment: str, design: Design) -> PrevalenceEstimate:
    draws = _labeled(draws)
    probs = _probabilities(draws, design)
    x = [float(d.segment_x(segment)) for d in draws]
    labels = [d.label for d in draws]
    z = [xi * y for xi, y in zip(x, labels)]
    if not any(x):
        raise EmptySegmentError(f"segment {segment!r}: no sampled impressions")
    theta, z_hat, x_hat = ratio_theta(x, z, probs)
    variance = variance_taylor(x, z, probs, theta) if len(draws) >= 2 else None
    flags = []
    kind = EstimatorKind.HH_RATIO
    if design is Design.PPSWOR:
        kind = EstimatorKind.HT_HAJEK
        flags.append(FLAG_WOR_APPROX)
    a = [xi / p for xi, p in zip(x, probs)]
    return _finish(
        theta=theta, variance=variance, a=a, labels=labels, x=x, kind=kind,
        segment=segment, numerator=z_hat, denominator=x_hat, flags=flags,
    )


# ---------------------------------------------------------------------------
# public operations


def hh_ratio(draws: Sequence[SampleDraw]) -> PrevalenceEstimate:
    """Hansen-Hurwitz ratio estimate of exposure-weighted prevalence (PPSWR)."""
    return _ratio_estimate(draws, ALL_SEGMENTS, Design.PPSWR)


def ht_hajek(draws: Sequence[SampleDraw]) -> PrevalenceEstimate:
    """Hajek ratio estimate for a PPSWOR sample using inclusion probabilities."""
    return _ratio_estimate(draws, ALL_SEGMENTS, Design.PPSWOR)


def segment_estimate_ratio(draws: Sequence[SampleDraw], segment: str, design: Design = Design.PPSWR) -> PrevalenceEstimate:
    """Segment prevalence with a sample-based denominator."""
    return _ratio_estimate(draws, segment, design)


def segment_estimate_known_denominator(
    draws: Sequence[SampleDraw], segment: str, denominator: float, design: Design = Design.PPSWR
) -> PrevalenceEstimate:
    """Segment prevalence when the segment's impression total is known exactly.

    Only the numerator is estimated, so the variance is ``Var(N_hat) / D**2``.
    """
    if not denominator > 0:
        raise EstimationError(f"segment {segment!r}: denominator must be > 0")
    draws = _labeled(draws)
    probs = _probabilities(draws, design)
    x = [float(d.segment_x(segment)) for d in draws]
    labels = [d.label for d in draws]
    z = [xi * y for xi, y in zip(x, labels)]
    m = len(draws)
    n_hat = hh_total(z, probs)
    variance = None
    if m >= 2:
        u = [zi / p for zi, p in zip(z, probs)]
        variance = _dispersion(u) / (m * (m - 1)) / (denominator * denominator)
    a = [xi / p for xi, p in zip(x, probs)]
    if not any(a):
        # ESS of an empty segment is meaningless; report the numerator anyway
        a = [1.0 / p for p in probs]
    flags = [FLAG_WOR_APPROX] if design is Design.PPSWOR else []
    return _finish(
        theta=n_hat / denominator, variance=variance, a=a, labels=labels, x=x,
        kind=EstimatorKind.HT_KNOWN_DENOMINATOR, segment=segment,
        numerator=n_hat, denominator=float(denominator), flags=flags,
    )


def draw_residuals(draws: Sequence[SampleDraw], theta: float, design: Design = Design.PPSWR) -> list[float]:
    draws = _labeled(draws)
    probs = _probabilities(draws, design)
    x = [float(d.impressions) for d in draws]
    z = [xi * d.label for xi, d in zip(x, draws)]
    return residuals(x, z, probs, theta)


def draws_variance(draws: Sequence[SampleDraw], theta: float, design: Design = Design.PPSWR) -> float:
    draws = _labeled(draws)
    probs = _probabilities(draws, design)
    x = [float(d.impressions) for d in draws]
    z = [xi * d.label for xi, d in zip(x, draws)]
    return variance_taylor(x, z, probs, theta)


def draws_ess(draws: Sequence[SampleDraw], design: Design = Design.PPSWR) -> float:
    probs = _probabilities(draws, design)
    return kish_ess([d.impressions / p for d, p in zip(draws, probs)])


def rogan_gladen_correct(estimate: PrevalenceEstimate, quality: LabelerQuality) -> PrevalenceEstimate:
    """Correct a prevalence measured with an imperfect labeler.

    ``theta = (theta_L - f) / (r - f)``.  The variance is propagated by the
    delta method assuming the daily sample and the validation set that
    produced ``(r, f)`` are independent.
    """
    r, f = quality.sensitivity, quality.false_positive_rate
    if r <= f:
        raise EstimationError("sensitivity must exceed the false positive rate")
    tl = estimate.theta_hat
    d = r - f
    theta = (tl - f) / d
    flags = [fl for fl in estimate.flags if fl not in (FLAG_CLAMPED, FLAG_THETA_CLAMPED)]
    flags.append(FLAG_RG)
    if not 0.0 <= theta <= 1.0:
        flags.append(FLAG_RG_CLAMPED)
        theta = min(max(theta, 0.0), 1.0)
    variance = None
    if estimate.variance is not None:
        g_l = 1.0 / d
        g_r = -(tl - f) / (d * d)
        g_f = (tl - r) / (d * d)
        variance = (
            g_l * g_l * estimate.variance
            + g_r * g_r * quality.sensitivity_se**2
            + g_f * g_f * quality.fpr_se**2
        )
        ci, raw = confidence_interval(theta, variance)
        if ci != raw:
            flags.append(FLAG_CLAMPED)
    else:
        ci, raw = (0.0, 1.0), None
    return replace(
        estimate,
        theta_hat=theta,
        variance=variance,
        ci_low=ci[0],
        ci_high=ci[1],
        raw_ci=raw,
        flags=tuple(flags),
        diagnostics={**estimate.diagnostics, "theta_labeler": tl, "r": r, "f": f},
    )
