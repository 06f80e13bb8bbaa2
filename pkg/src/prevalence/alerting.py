"""Sensitivity, weekly minimum detectable effects and step-change alerts."""

from __future__ import annotations

import datetime as dt
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from statistics import NormalDist

from .estimator import Z_95, PrevalenceEstimate

WINDOW_DAYS = 7
MIN_HISTORY_DAYS = 28

_STD_NORMAL = NormalDist()


class AlertingError(ValueError):
    pass


class SeriesGapError(AlertingError):
    def __init__(self, missing: Sequence[dt.date]):
        self.missing = list(missing)
        super().__init__("missing days: " + ", ".join(d.isoformat() for d in self.missing))


def z_quantile(q: float) -> float:
    """Standard normal quantile.

    Uses the stdlib's implementation of Wichura's AS241 rational
    approximation (relative error around 1e-16).
    """
    if not 0.0 < q < 1.0:
        raise AlertingError(f"quantile level {q} outside (0, 1)")
    return _STD_NORMAL.inv_cdf(q)


@dataclass(frozen=True)
class DailyPoint:
    day: dt.date
    theta_hat: float
    variance: float | None = None


@dataclass
class DailySeries:
    """Daily estimates in strictly increasing day order; gaps are allowed."""

    points: list[DailyPoint] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.points, self.points[1:]):
            if not b.day > a.day:
                raise AlertingError(f"days must be strictly increasing ({a.day} then {b.day})")

    @classmethod
    def from_triples(cls, triples: Iterable[tuple]) -> DailySeries:
        pts = []
        for t in triples:
            day = t[0] if isinstance(t[0], dt.date) else dt.date.fromisoformat(t[0])
            pts.append(DailyPoint(day, float(t[1]), None if len(t) < 3 or t[2] is None else float(t[2])))
        return cls(pts)

    def by_day(self) -> dict[dt.date, DailyPoint]:
        return {p.day: p for p in self.points}

    @property
    def gaps(self) -> list[dt.date]:
        """Days missing between the first and last point."""
        if not self.points:
            return []
        have = self.by_day()
        out = []
        d = self.points[0].day
        while d < self.points[-1].day:
            if d not in have:
                out.append(d)
            d += dt.timedelta(days=1)
        return out

    def window(self, end: dt.date, days: int = WINDOW_DAYS) -> list[DailyPoint]:
        have = self.by_day()
        wanted = [end - dt.timedelta(days=k) for k in range(days - 1, -1, -1)]
        missing = [d for d in wanted if d not in have]
        if missing:
            raise SeriesGapError(missing)
        return [have[d] for d in wanted]


@dataclass(frozen=True)
class MdePlan:
    alpha: float = 0.05
    power: float = 0.8
    window_days: int = WINDOW_DAYS
    baseline: float | None = None
    sigma: float = 0.0
    inflation: float = 1.0
    mde_abs: float = field(init=False)
    mde_rel: float | None = field(init=False)

    def __post_init__(self):
        if not 0 < self.alpha < 1 or not 0 < self.power < 1:
            raise AlertingError("alpha and power must be in (0, 1)")
        if self.window_days < 1:
            raise AlertingError("window_days must be >= 1")
        mde = mde_absolute(self.sigma, self.alpha, self.power, self.window_days, self.inflation)
        object.__setattr__(self, "mde_abs", mde)
        rel = mde / self.baseline if self.baseline else None
        object.__setattr__(self, "mde_rel", rel)

    @property
    def critical_difference(self) -> float:
        """Two-sided level-alpha rejection threshold for a window-mean difference."""
        z_a = z_quantile(1 - self.alpha / 2)
        return z_a * math.sqrt(2 / self.window_days) * self.sigma * math.sqrt(self.inflation)


def sensitivity_half_width(estimate: PrevalenceEstimate | float) -> float:
    """95% CI half-width ``1.96 * sqrt(Var)``.  Accepts an estimate or a variance."""
    var = estimate.variance if isinstance(estimate, PrevalenceEstimate) else estimate
    if var is None:
        raise AlertingError("variance unavailable")
    return Z_95 * math.sqrt(var)


def sensitivity_from_ess(theta: float, ess: float) -> tuple[float, float | None]:
    """Back-of-envelope half-width from ESS.

    Returns ``(binomial, rare_event)``; the rare-event form
    ``1.96 * sqrt(theta / ESS)`` is only given when ``theta < 0.01``.
    """
    if not 0.0 <= theta <= 1.0:
        raise AlertingError("theta must be in [0, 1]")
    if not ess > 0:
        raise AlertingError("ess must be > 0")
    h = Z_95 * math.sqrt(theta * (1 - theta) / ess)
    rare = Z_95 * math.sqrt(theta / ess) if theta < 0.01 else None
    return h, rare


def moving_average(series: DailySeries, day: dt.date, days: int = WINDOW_DAYS) -> float:
    pts = series.window(day, days)
    return math.fsum(p.theta_hat for p in pts) / days


def moving_average_7(series: DailySeries, day: dt.date) -> float:
    return moving_average(series, day, WINDOW_DAYS)


def mde_absolute(sigma: float, alpha: float = 0.05, power: float = 0.8,
                 window_days: int = WINDOW_DAYS, inflation: float = 1.0) -> float:
    """Absolute MDE for comparing two independent window means of daily noise ``sigma``."""
    if sigma < 0:
        raise AlertingError("sigma must be >= 0")
    if not inflation > 0:
        raise AlertingError("inflation factor must be > 0")
    z = z_quantile(1 - alpha / 2) + z_quantile(power)
    return z * math.sqrt(2 / window_days) * sigma * math.sqrt(inflation)


def mde_relative_coefficient(alpha: float = 0.05, power: float = 0.8, window_days: int = WINDOW_DAYS) -> float:
    z_a = z_quantile(1 - alpha / 2)
    return (z_a + z_quantile(power)) / z_a * math.sqrt(2 / window_days)


def mde_relative(half_width: float, baseline: float, alpha: float = 0.05, power: float = 0.8,
                 window_days: int = WINDOW_DAYS) -> float:
    """Relative MDE from the daily CI half-width and a baseline prevalence."""
    if not baseline > 0:
        raise AlertingError("baseline must be > 0 for a relative MDE")
    return mde_relative_coefficient(alpha, power, window_days) * half_width / baseline


def variance_inflation(autocorrelations: Sequence[float], window_days: int = WINDOW_DAYS) -> float:
    """Variance inflation of a window mean under lag correlations ``rho_1..rho_{k-1}``."""
    rhos = list(autocorrelations)
    if len(rhos) != window_days - 1:
        raise AlertingError(f"expected {window_days - 1} autocorrelations, got {len(rhos)}")
    if any(not -1.0 <= r <= 1.0 for r in rhos):
        raise AlertingError("autocorrelations must lie in [-1, 1]")
    factor = 1.0 + 2.0 * math.fsum((1 - lag / window_days) * r for lag, r in enumerate(rhos, start=1))
    if factor <= 0:
        raise AlertingError(f"inflation factor {factor} <= 0; series flagged as pathological")
    return factor


def estimate_autocorrelation(series: DailySeries, max_lag: int = WINDOW_DAYS - 1,
                             detrend: str = "mean") -> list[float]:
    """Sample autocorrelations of the mean-removed daily estimates.

    ``detrend='linear'`` removes a least-squares line instead of the mean.
    """
    if len(series.points) < MIN_HISTORY_DAYS:
        raise AlertingError(f"need at least {MIN_HISTORY_DAYS} days of history, got {len(series.points)}")
    if series.gaps:
        raise SeriesGapError(series.gaps)
    y = [p.theta_hat for p in series.points]
    n = len(y)
    if detrend == "mean":
        mu = math.fsum(y) / n
        e = [v - mu for v in y]
    elif detrend == "linear":
        tbar = (n - 1) / 2
        ybar = math.fsum(y) / n
        sxx = math.fsum((t - tbar) ** 2 for t in range(n))
        slope = math.fsum((t - tbar) * (v - ybar) for t, v in enumerate(y)) / sxx
        e = [v - ybar - slope * (t - tbar) for t, v in enumerate(y)]
    else:
        raise AlertingError(f"unknown detrend {detrend!r}")
    c0 = math.fsum(v * v for v in e)
    if c0 == 0:
        raise AlertingError("series has zero variance; autocorrelation undefined")
    return [math.fsum(e[t] * e[t + lag] for t in range(n - lag)) / c0 for lag in range(1, max_lag + 1)]


@dataclass(frozen=True)
class AlertDecision:
    decision: str  # "fire", "quiet" or "no_decision"
    delta: float | None
    threshold: float
    rule: str
    current_window: tuple[dt.date, dt.date]
    previous_window: tuple[dt.date, dt.date]
    current_mean: float | None = None
    previous_mean: float | None = None
    inflation: float = 1.0
    missing_days: tuple[dt.date, ...] = ()

    def to_record(self, policy: str | None = None) -> dict:
        return {
            "policy": policy,
            "decision": self.decision,
            "delta": self.delta,
            "threshold": self.threshold,
            "rule": self.rule,
            "current_window": [d.isoformat() for d in self.current_window],
            "previous_window": [d.isoformat() for d in self.previous_window],
            "current_mean": self.current_mean,
            "previous_mean": self.previous_mean,
            "inflation": self.inflation,
            "missing_days": [d.isoformat() for d in self.missing_days],
        }


def evaluate_alert(series: DailySeries, plan: MdePlan, end: dt.date | None = None,
                   gap_days: int = 0, rule: str = "mde") -> AlertDecision:
    """Compare the window ending at ``end`` with the preceding window.

    ``rule='mde'`` fires when ``|delta| > plan.mde_abs``; ``rule='critical'``
    fires at the level-alpha critical difference instead, which is the rule
    whose false-alarm rate equals alpha under the null.
    """
    if rule == "mde":
        threshold = plan.mde_abs
    elif rule == "critical":
        threshold = plan.critical_difference
    else:
        raise AlertingError(f"unknown rule {rule!r}")
    if end is None:
        if not series.points:
            raise AlertingError("empty series")
        end = series.points[-1].day
    k = plan.window_days
    cur = (end - dt.timedelta(days=k - 1), end)
    prev_end = cur[0] - dt.timedelta(days=1 + gap_days)
    prev = (prev_end - dt.timedelta(days=k - 1), prev_end)
    missing: list[dt.date] = []
    means = []
    for w_end in (cur[1], prev[1]):
        try:
            means.append(moving_average(series, w_end, k))
        except SeriesGapError as exc:
            missing.extend(exc.missing)
    if missing:
        return AlertDecision("no_decision", None, threshold, rule, cur, prev,
                             inflation=plan.inflation, missing_days=tuple(sorted(missing)))
    delta = means[0] - means[1]
    decision = "fire" if abs(delta) > threshold else "quiet"
    return AlertDecision(decision, delta, threshold, rule, cur, prev, means[0], means[1], plan.inflation)
