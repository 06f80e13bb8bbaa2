"""Monte Carlo lab: PPS vs ML-assisted PPS on a synthetic population.

Population model (defaults are the reference simulation settings):

* label ``y ~ Bernoulli(p)``
* impressions from a mixture: with probability ``p_small`` uniform on
  ``{1..10}``, otherwise ``x_m * (1 + L)`` where ``L`` is Lomax(alpha),
  drawn by inverse CDF ``L = (1 - U)**(-1/alpha) - 1``, then rounded to the
  nearest integer (at least 1)
* score ``s ~ Beta(a-, b-)`` for negatives and ``Beta(a+, b+)`` for positives

Each trial draws ``m`` units with replacement and evaluates the HH ratio
estimator.  Trial ``t`` of cell ``(m, scheme)`` uses its own generator
seeded by ``(seed_mc, m, scheme index, t)`` so that runs can be split or
reordered without changing any number.  The CI width of a cell is the
spread between the 2.5% and 97.5% quantiles of its trial estimates, with
linear interpolation between order statistics (numpy's default method).
"""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimator import ratio_theta_arrays
from .sampler import compute_weights

SCHEME_PPS = "PPS"
SCHEME_ML = "ML_PPS"
SCHEME_GAMMA = {SCHEME_PPS: 0.0, SCHEME_ML: 1.0}
SCHEME_INDEX = {SCHEME_PPS: 0, SCHEME_ML: 1}
NORMALIZATION_CELL = (100_000, SCHEME_ML)


@dataclass(frozen=True)
class SimPopulationSpec:
    n: int = 300_000
    base_rate: float = 0.005
    p_small: float = 0.93
    pareto_alpha: float = 1.4
    pareto_xm: float = 10.0
    beta_neg: tuple[float, float] = (1.5, 6.0)
    beta_pos: tuple[float, float] = (6.0, 1.5)
    seed_pop: int = 42


@dataclass(frozen=True)
class SimExperimentSpec:
    sample_sizes: tuple[int, ...] = (2000, 5000, 10000, 20000, 50000, 100000)
    trials: int = 500
    schemes: tuple[str, ...] = (SCHEME_PPS, SCHEME_ML)
    nu: float = 1.0
    epsilon: float = 1e-6
    seed_mc: int = 123
    paired: bool = False

    def __post_init__(self):
        if self.trials < 2:
            raise ValueError("trials must be >= 2")
        for s in self.schemes:
            if s not in SCHEME_GAMMA:
                raise ValueError(f"unknown scheme {s!r}")


@dataclass
class Population:
    labels: np.ndarray
    impressions: np.ndarray
    scores: np.ndarray
    small: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def true_theta(self) -> float:
        """Exposure-weighted prevalence of the whole population."""
        c = self.impressions.astype(np.float64)
        return math.fsum((c * self.labels).tolist()) / math.fsum(c.tolist())

    def content_ids(self) -> list[str]:
        return [f"c{i:07d}" for i in range(len(self))]


def generate_population(spec: SimPopulationSpec = SimPopulationSpec()) -> Population:
    rng = np.random.default_rng(spec.seed_pop)
    n = spec.n
    labels = (rng.random(n) < spec.base_rate).astype(np.int64)
    small = rng.random(n) < spec.p_small
    small_imp = rng.integers(1, 11, size=n)
    u = rng.random(n)
    lomax = (1.0 - u) ** (-1.0 / spec.pareto_alpha) - 1.0
    tail_imp = np.maximum(np.rint(spec.pareto_xm * (1.0 + lomax)), 1.0)
    impressions = np.where(small, small_imp, tail_imp).astype(np.int64)
    s_neg = rng.beta(*spec.beta_neg, size=n)
    s_pos = rng.beta(*spec.beta_pos, size=n)
    scores = np.where(labels == 1, s_pos, s_neg)
    return Population(labels, impressions, scores, small)


def scheme_probabilities(pop: Population, scheme: str, nu: float, epsilon: float,
                         gamma: float | None = None) -> np.ndarray:
    g = SCHEME_GAMMA[scheme] if gamma is None else gamma
    w = compute_weights(pop.impressions, pop.scores, nu, g, epsilon)
    return w / math.fsum(w.tolist())


@dataclass
class CellResult:
    m: int
    scheme: str
    estimates: np.ndarray
    positive_fractions: np.ndarray
    true_theta: float

    @property
    def width(self) -> float:
        lo, hi = np.quantile(self.estimates, [0.025, 0.975])
        return float(hi - lo)

    @property
    def mean_estimate(self) -> float:
        return math.fsum(self.estimates.tolist()) / len(self.estimates)

    @property
    def bias(self) -> float:
        return self.mean_estimate - self.true_theta

    @property
    def sd(self) -> float:
        return float(np.std(self.estimates, ddof=1))

    @property
    def bias_se(self) -> float:
        return self.sd / math.sqrt(len(self.estimates))

    @property
    def mean_positive_fraction(self) -> float:
        return float(np.mean(self.positive_fractions))


@dataclass
class SimResult:
    cells: dict[tuple[int, str], CellResult] = field(default_factory=dict)
    true_theta: float = float("nan")

    def width(self, m: int, scheme: str) -> float:
        return self.cells[(m, scheme)].width

    def relative_width(self, m: int, scheme: str) -> float:
        if NORMALIZATION_CELL not in self.cells:
            raise KeyError(f"normalization cell {NORMALIZATION_CELL} missing")
        return self.cells[(m, scheme)].width / self.cells[NORMALIZATION_CELL].width

    def rows(self) -> list[dict]:
        if NORMALIZATION_CELL not in self.cells:
            raise KeyError(f"normalization cell {NORMALIZATION_CELL} missing")
        ref = self.cells[NORMALIZATION_CELL].width
        out = []
        for (m, scheme), cell in sorted(self.cells.items(), key=lambda kv: (kv[0][0], SCHEME_INDEX[kv[0][1]])):
            w = cell.width
            out.append({
                "m": m,
                "scheme": scheme,
                "W": w,
                "W_rel": w / ref,
                "bias": cell.bias,
                "positive_fraction": cell.mean_positive_fraction,
            })
        return out


def trial_generator(seed_mc: int, m: int, scheme: str, trial: int) -> np.random.Generator:
    return np.random.default_rng([seed_mc, m, SCHEME_INDEX[scheme], trial])


def _draw(cdf: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(m) * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)


def run_cell(pop: Population, probs: np.ndarray, m: int, scheme: str, exp: SimExperimentSpec,
             true_theta: float | None = None) -> CellResult:
    x = pop.impressions.astype(np.float64)
    z = x * pop.labels
    cdf = np.cumsum(probs)
    est = np.empty(exp.trials)
    pos = np.empty(exp.trials)
    # paired runs share each trial's uniforms across schemes (common random numbers)
    draw_scheme = SCHEME_ML if exp.paired else scheme
    for t in range(exp.trials):
        idx = _draw(cdf, m, trial_generator(exp.seed_mc, m, draw_scheme, t))
        est[t] = ratio_theta_arrays(x[idx], z[idx], probs[idx])
        pos[t] = pop.labels[idx].mean()
    tt = pop.true_theta if true_theta is None else true_theta
    return CellResult(m, scheme, est, pos, tt)


def run_trials(pop: Population, exp: SimExperimentSpec = SimExperimentSpec(), progress=None) -> SimResult:
    theta = pop.true_theta
    result = SimResult(true_theta=theta)
    probs = {s: scheme_probabilities(pop, s, exp.nu, exp.epsilon) for s in exp.schemes}
    for m in exp.sample_sizes:
        for s in exp.schemes:
            result.cells[(m, s)] = run_cell(pop, probs[s], m, s, exp, theta)
            if progress is not None:
                progress(m, s, result.cells[(m, s)])
    return result


@dataclass(frozen=True)
class LiftResult:
    m: int
    lift: float
    excluded_trials: int


def positive_rate_lift(result: SimResult, m: int) -> LiftResult:
    """Ratio of mean sample positive fractions ML_PPS : PPS at budget ``m``.

    Trials whose PPS positive fraction is zero are dropped from both arms
    (trial ``t`` is matched with trial ``t``) and counted.
    """
    ml = result.cells[(m, SCHEME_ML)].positive_fractions
    pps = result.cells[(m, SCHEME_PPS)].positive_fractions
    keep = pps > 0
    excluded = int((~keep).sum())
    if not keep.any():
        return LiftResult(m, float("nan"), excluded)
    return LiftResult(m, float(ml[keep].mean() / pps[keep].mean()), excluded)


def expected_positive_fraction(pop: Population, probs: np.ndarray) -> float:
    """Exact expected fraction of positive draws under a with-replacement design."""
    return math.fsum((probs * pop.labels).tolist())


def exact_lift(pop: Population, nu: float = 1.0, epsilon: float = 1e-6,
               gamma_ml: float = 1.0, gamma_base: float = 0.0) -> float:
    """Expected-value lift of ML-assisted over impression-only PPS."""
    p_ml = scheme_probabilities(pop, SCHEME_ML, nu, epsilon, gamma_ml)
    p_base = scheme_probabilities(pop, SCHEME_PPS, nu, epsilon, gamma_base)
    return expected_positive_fraction(pop, p_ml) / expected_positive_fraction(pop, p_base)


FIGURE_COLUMNS = ("m", "scheme", "W", "W_rel", "bias", "positive_fraction")


def figure_csv(result: SimResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FIGURE_COLUMNS)
    for row in result.rows():
        writer.writerow([row["m"], row["scheme"]] + [repr(float(row[c])) for c in FIGURE_COLUMNS[2:]])
    return buf.getvalue()


def emit_figure_data(result: SimResult, path: str | Path) -> Path:
    """Write the CI-width table (one row per ``(m, scheme)``) as CSV."""
    path = Path(path)
    text = figure_csv(result)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
    return path


def ppswor_comparison(pop: Population, m: int, trials: int, seed: int, nu: float = 1.0,
                      gamma: float = 1.0, epsilon: float = 1e-6) -> dict:
    """Paired PPSWR vs PPSWOR point estimates on the same population.

    PPSWOR uses exponential-race keys with uniforms from a seeded generator
    per trial and Hajek weights ``1/pi`` with ``pi = 1 - exp(-w tau)``.
    """
    w = compute_weights(pop.impressions, pop.scores, nu, gamma, epsilon)
    total = math.fsum(w.tolist())
    probs = w / total
    cdf = np.cumsum(probs)
    x = pop.impressions.astype(np.float64)
    z = x * pop.labels
    wr = np.empty(trials)
    wor = np.empty(trials)
    for t in range(trials):
        rng = np.random.default_rng([seed, m, t])
        idx = _draw(cdf, m, rng)
        wr[t] = ratio_theta_arrays(x[idx], z[idx], probs[idx])
        keys = -np.log1p(-rng.random(len(w))) / w
        part = np.argpartition(keys, m - 1)[:m]
        tau = keys[part].max()
        pi = -np.expm1(-w[part] * tau)
        wor[t] = ratio_theta_arrays(x[part], z[part], pi)
    return {"ppswr": wr, "ppswor": wor, "true_theta": pop.true_theta}


def summarize(result: SimResult, sample_sizes: Sequence[int] | None = None) -> list[str]:
    lines = []
    for row in result.rows():
        cell = result.cells[(row["m"], row["scheme"])]
        lines.append(
            f"m={row['m']:>6} {row['scheme']:<6} W={row['W']:.6g} W_rel={row['W_rel']:.4f} "
            f"bias={row['bias']:+.3e} (2SE={2 * cell.bias_se:.3e}) pos_frac={row['positive_fraction']:.5f}"
        )
    return lines
