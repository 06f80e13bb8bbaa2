"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict (printed in the terminal summary and
to stdout) before asserting, so a failing criterion still reports its
measured values.
"""

import json
import math
import random
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ACCEPTANCE_RESULTS
from oracles import ppswor_inclusion_exact, wr_outcomes
from prevalence import simlab
from prevalence.alerting import mde_relative_coefficient, variance_inflation
from prevalence.config import load_config
from prevalence.estimator import (
    LabelerQuality,
    confidence_interval,
    hh_ratio,
    kish_ess,
    ratio_theta,
    rogan_gladen_correct,
    segment_estimate_known_denominator,
    segment_estimate_ratio,
    variance_taylor,
)
from prevalence.hashing import hashed_uniforms, id_hash
from prevalence.labeling import MockRemoteProvider, evaluate_gold_set, label_sample, labeler_quality
from prevalence.pipeline import replay_run, run_daily
from prevalence.sampler import (
    ContentRecord,
    Reservoir,
    SampleDraw,
    SamplingConfig,
    build_reservoir,
    compute_weights,
    merge_reservoirs,
    ppswr_sample,
)
from workspace import make_workspace

# frozen from oracles.ppswor_inclusion_exact(list(range(1, 11)), 3)
INCLUSION_1_TO_10_M3 = [
    0.062360723909381195, 0.12231719032326259, 0.179760220884598, 0.23458249075115858,
    0.2866817360227336, 0.33596531650341727, 0.38235668591418515, 0.4258045683015959,
    0.46629601120276226, 0.5038750561869053,
]


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


# ---------------------------------------------------------------------------
# 1. simulation reproduction


def test_criterion_1_simulation_reproduction(tmp_path):
    start = time.perf_counter()
    pop = simlab.generate_population(simlab.SimPopulationSpec())
    result = simlab.run_trials(pop, simlab.SimExperimentSpec())
    elapsed = time.perf_counter() - start
    simlab.emit_figure_data(result, tmp_path / "figure_data.csv")
    ms = simlab.SimExperimentSpec().sample_sizes
    ordering = all(result.width(m, simlab.SCHEME_ML) < result.width(m, simlab.SCHEME_PPS) for m in ms)
    worst = max(abs(c.bias) / (2 * c.bias_se) for c in result.cells.values())
    lift = simlab.positive_rate_lift(result, 10_000)
    ok = ordering and worst < 1 and lift.lift > 2 and elapsed < 600
    widths = ", ".join(f"{m}:{result.width(m, simlab.SCHEME_ML) / result.width(m, simlab.SCHEME_PPS):.3f}" for m in ms)
    record(1, ok, f"W_ML/W_PPS by m [{widths}]; max |bias|/(2 SE)={worst:.3f}; "
                  f"lift@10000={lift.lift:.3f} (excluded {lift.excluded_trials}); "
                  f"true theta={pop.true_theta:.7f}; {elapsed:.0f}s")
    assert ordering
    assert worst < 1
    assert lift.lift > 2
    assert elapsed < 600


# ---------------------------------------------------------------------------
# 2. unbiasedness by exhaustive enumeration


def _check_population(x, y, w, m):
    total = math.fsum(w)
    probs = [wi / total for wi in w]
    e_z = []
    e_x = []
    for seq, pr in wr_outcomes(probs, m):
        draws = [SampleDraw(f"i{i}", x[i], None, probs[i], w[i], None, y[i]) for i in seq]
        est = hh_ratio(draws)
        e_z.append(pr * est.numerator)
        e_x.append(pr * est.denominator)
    true_z = math.fsum(xi * yi for xi, yi in zip(x, y))
    true_x = math.fsum(x)
    # an all-negative population has Z = 0 exactly; compare absolutely there
    rz = abs(math.fsum(e_z) - true_z) / true_z if true_z else abs(math.fsum(e_z))
    rx = abs(math.fsum(e_x) - true_x) / true_x
    return rz, rx


_WORST_2 = [0.0]


@settings(max_examples=150, deadline=None, derandomize=True)
@given(
    st.integers(1, 6).flatmap(lambda n: st.tuples(
        st.lists(st.integers(1, 10_000), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
        st.lists(st.floats(1e-6, 1e6), min_size=n, max_size=n),
    )),
    st.integers(1, 3),
)
def _enumeration_property(pop, m):
    x, y, w = pop
    rz, rx = _check_population(x, y, w, m)
    _WORST_2[0] = max(_WORST_2[0], rz, rx)
    assert rz <= 1e-12 and rx <= 1e-12


def test_criterion_2_unbiasedness_enumeration():
    # fixed corner cases plus randomized populations with arbitrary positive weights
    fixed = [
        ([3, 1, 7, 2], [1, 0, 1, 0], [5.0, 1.0, 2.0, 9.0]),
        ([1, 1, 1, 1, 1, 1], [1, 1, 0, 0, 0, 1], [1e-6, 1.0, 1e6, 3.0, 0.5, 42.0]),
        ([10_000], [1], [0.3]),
        ([5, 9], [0, 0], [1.0, 1.0]),
    ]
    worst = 0.0
    for x, y, w in fixed:
        for m in (1, 2, 3):
            rz, rx = _check_population(x, y, w, m)
            worst = max(worst, rz, rx)
    failure = None
    try:
        _enumeration_property()
    except AssertionError as exc:  # pragma: no cover - reported below
        failure = exc
    worst = max(worst, _WORST_2[0])
    ok = failure is None and worst <= 1e-12
    record(2, ok, f"max relative error of E[Z_hat], E[X_hat] over enumerated outcomes = {worst:.2e}")
    assert ok, failure


# ---------------------------------------------------------------------------
# 3. inclusion probabilities


def test_criterion_3_inclusion_probabilities():
    w = np.arange(1.0, 11.0)
    assert ppswor_inclusion_exact(w.tolist(), 3) == pytest.approx(INCLUSION_1_TO_10_M3, rel=1e-12)
    ids = np.array([id_hash(f"item{i}") for i in range(10)], dtype=np.uint64)
    runs = 10**6
    hits = np.zeros(10)
    for s in range(0, runs, 200_000):
        seeds = np.arange(s, s + 200_000, dtype=np.uint64)[:, None]
        keys = -np.log(hashed_uniforms(seeds, ids)) / w
        kept = np.argpartition(keys, 2, axis=1)[:, :3]
        hits += np.bincount(kept.ravel(), minlength=10)
    freq = hits / runs
    pi = np.asarray(INCLUSION_1_TO_10_M3)
    z = np.abs(freq - pi) / np.sqrt(pi * (1 - pi) / runs)
    # the streaming reservoir selects exactly what the vectorized race selects
    records = [ContentRecord(f"item{i}", 1, None, 0.5) for i in range(10)]
    agree = True
    for seed in range(500):
        res = Reservoir(3, seed=seed)
        for r, wi in zip(records, w):
            res.add(r, float(wi))
        keys = -np.log(hashed_uniforms(seed, ids)) / w
        agree &= {e.content_id for e in res.entries()} == {f"item{i}" for i in np.argsort(keys)[:3]}

    # pi ~ 1 - exp(-w tau) at a 1% sampling fraction
    n, m = 2000, 20
    wp = np.ones(n)
    wp[:20] = 10.0
    pid = np.array([id_hash(f"p{i}") for i in range(n)], dtype=np.uint64)
    runs_pi = 100_000
    inc = np.zeros(n)
    approx = np.zeros(n)
    for s in range(0, runs_pi, 1000):
        seeds = np.arange(s, s + 1000, dtype=np.uint64)[:, None]
        keys = -np.log(hashed_uniforms(seeds, pid)) / wp
        tau = np.partition(keys, m - 1, axis=1)[:, m - 1:m]
        inc += (keys <= tau).sum(axis=0)
        approx += (-np.expm1(-wp * tau)).sum(axis=0)
    rel = []
    for sl in (slice(0, 20), slice(20, None)):
        rel.append(abs(inc[sl].mean() / approx[sl].mean() - 1))
    ok = z.max() < 3 and agree and max(rel) < 0.02
    record(3, ok, f"max |freq - pi|/SE = {z.max():.2f} over 10 items (10^6 streams); "
                  f"reservoir==vectorized: {agree}; pi approx rel. error heavy/light = {rel[0]:.4f}/{rel[1]:.4f}")
    assert z.max() < 3
    assert agree
    assert max(rel) < 0.02


# ---------------------------------------------------------------------------
# 4. CI coverage


def test_criterion_4_ci_coverage():
    pop = simlab.generate_population(simlab.SimPopulationSpec())
    truth = pop.true_theta
    x = pop.impressions.astype(float)
    z = x * pop.labels
    coverage = {}
    for scheme in (simlab.SCHEME_ML, simlab.SCHEME_PPS):
        p = simlab.scheme_probabilities(pop, scheme, 1.0, 1e-6)
        cdf = np.cumsum(p)
        hit = 0
        for t in range(2000):
            rng = np.random.default_rng([2024, 5000, simlab.SCHEME_INDEX[scheme], t])
            idx = np.minimum(np.searchsorted(cdf, rng.random(5000) * cdf[-1], side="right"), len(cdf) - 1)
            xs, zs, ps = x[idx].tolist(), z[idx].tolist(), p[idx].tolist()
            theta, _, _ = ratio_theta(xs, zs, ps)
            (lo, hi), _ = confidence_interval(theta, variance_taylor(xs, zs, ps, theta))
            hit += lo <= truth <= hi
        coverage[scheme] = hit / 2000
    ok = all(0.93 <= c <= 0.97 for c in coverage.values())
    record(4, ok, "coverage at m=5000 over 2000 trials: " + ", ".join(f"{k}={v:.4f}" for k, v in coverage.items()))
    assert ok


# ---------------------------------------------------------------------------
# 5. drill-down consistency


def test_criterion_5_drilldown():
    rng = np.random.default_rng(55)
    n = 50_000
    segs = ["g=a", "g=b"]
    rate = {"g=a": 0.01, "g=b": 0.05}
    pop = []
    num = {g: 0 for g in segs}
    den = {g: 0 for g in segs}
    truth = {}
    for i in range(n):
        g = segs[i % 2]
        c = int(rng.integers(1, 40))
        y = int(rng.random() < rate[g])
        s = float(rng.beta(6, 1.5) if y else rng.beta(1.5, 6))
        rec = ContentRecord(f"u{i}", c, {g: c}, s)
        pop.append(rec)
        truth[rec.content_id] = y
        num[g] += c * y
        den[g] += c
    cfg = SamplingConfig(sample_size=20_000, seed=5, scheme="PPSWR")
    weights = compute_weights(np.array([r.impressions for r in pop]), np.array([r.score for r in pop]),
                              cfg.nu, cfg.gamma, cfg.epsilon)
    draws = ppswr_sample(list(zip(pop, weights.tolist())), cfg.sample_size, cfg.seed)
    draws = [SampleDraw(d.content_id, d.impressions, d.segment_impressions, d.draw_probability, d.weight,
                        d.inclusion_probability, truth[d.content_id]) for d in draws]
    glob = hh_ratio(draws)
    all_seg = segment_estimate_ratio(draws, "ALL")
    bit_for_bit = json.dumps(all_seg.to_record()) == json.dumps(glob.to_record())
    kd = {g: segment_estimate_known_denominator(draws, g, den[g]) for g in segs}
    total = math.fsum(e.numerator for e in kd.values())
    sum_rel = abs(total - glob.numerator) / glob.numerator
    zscores = {}
    for g in segs:
        true_g = num[g] / den[g]
        for label, est in (("ratio", segment_estimate_ratio(draws, g)), ("known", kd[g])):
            zscores[f"{g}/{label}"] = abs(est.theta_hat - true_g) / math.sqrt(est.variance)
    ok = bit_for_bit and sum_rel <= 1e-12 and max(zscores.values()) < 3
    record(5, ok, f"ALL==global bit-for-bit: {bit_for_bit}; |sum N_g - N|/N = {sum_rel:.1e}; "
                  "z vs truth " + ", ".join(f"{k}={v:.2f}" for k, v in zscores.items()))
    assert bit_for_bit
    assert sum_rel <= 1e-12
    assert max(zscores.values()) < 3


# ---------------------------------------------------------------------------
# 6. closed-form spot values


def test_criterion_6_spot_values():
    est = hh_ratio([SampleDraw("a", 1, None, 0.5, 1.0, None, 1), SampleDraw("b", 1, None, 0.5, 1.0, None, 0)])
    rg = rogan_gladen_correct(replace(est, theta_hat=0.02, flags=()), LabelerQuality(0.9, 0.01)).theta_hat
    values = {
        "kish": (kish_ess([1, 3]), 1.6, 1e-6),
        "rogan_gladen": (rg, 0.011236, 1e-6),
        "inflation": (variance_inflation([1.0] * 6), 7.0, 1e-6),
        "mde_rel_coef": (mde_relative_coefficient(0.05, 0.8), 0.764, 0.001),
    }
    ok = all(abs(v - target) <= tol for v, target, tol in values.values())
    record(6, ok, ", ".join(f"{k}={v:.7g}" for k, (v, _, _) in values.items()))
    for v, target, tol in values.values():
        assert abs(v - target) <= tol


# ---------------------------------------------------------------------------
# 7. determinism and replay


def test_criterion_7_determinism(tmp_path):
    pop = simlab.generate_population(simlab.SimPopulationSpec(n=50_000))
    exp = simlab.SimExperimentSpec(sample_sizes=(2000, 100_000), trials=50)
    a = simlab.emit_figure_data(simlab.run_trials(pop, exp), tmp_path / "a.csv").read_bytes()
    pop2 = simlab.generate_population(simlab.SimPopulationSpec(n=50_000))
    b = simlab.emit_figure_data(simlab.run_trials(pop2, exp), tmp_path / "b.csv").read_bytes()
    fig_same = a == b

    outs = []
    replay_same = True
    for name in ("w1", "w2"):
        root = tmp_path / name
        root.mkdir()
        cfg = load_config(make_workspace(root))
        res = run_daily(cfg, "2024-03-01")
        outs.append((res.run_dir / "estimates.jsonl").read_bytes())
        replay_same &= replay_run(res.run_dir) == res.estimates
        forced = run_daily(cfg, "2024-03-01", force=True)
        replay_same &= (forced.run_dir / "estimates.jsonl").read_bytes() == outs[-1]
    est_same = outs[0] == outs[1]
    ok = fig_same and est_same and replay_same
    record(7, ok, f"figure bytes identical: {fig_same}; estimates bytes identical: {est_same}; "
                  f"lineage replay identical: {replay_same}")
    assert ok


# ---------------------------------------------------------------------------
# 8. sharded merge


def test_criterion_8_sharded_merge():
    rng = random.Random(8)
    stream = [ContentRecord(f"s{i}", rng.randint(1, 1000), None, rng.uniform(1e-3, 1.0)) for i in range(100_000)]
    cfg = SamplingConfig(sample_size=1000, seed=99)
    single = build_reservoir(stream, cfg)
    shards = [build_reservoir(stream[k::4], cfg) for k in range(4)]
    merged = shards[0]
    for s in shards[1:]:
        merged = merge_reservoirs(merged, s)
    same_set = merged.keys() == single.keys()
    same_tau = merged.threshold == single.threshold
    same_total = merged.total_weight_seen == single.total_weight_seen
    ok = same_set and same_tau and same_total
    record(8, ok, f"4-shard merge == single stream on 10^5 items: retained set {same_set}, "
                  f"threshold {same_tau}, total weight {same_total}")
    assert ok


# ---------------------------------------------------------------------------
# 9. end-to-end labeler correction


def test_criterion_9_rogan_gladen_loop():
    rng = np.random.default_rng(909)
    n = 300_000
    labels = (rng.random(n) < 0.02).astype(int)
    imps = rng.integers(1, 11, size=n)
    scores = np.where(labels == 1, rng.beta(6, 1.5, size=n), rng.beta(1.5, 6, size=n))
    ids = [f"e{i}" for i in range(n)]
    truth = dict(zip(ids, labels.tolist()))
    true_theta = float((imps * labels).sum() / imps.sum())

    # gold set: disjoint units with known truth, labeled by the same provider
    gold_n = 20_000
    gold_truth = {f"gold{i}": int(i % 2 == 0) for i in range(gold_n)}
    provider = MockRemoteProvider({**truth, **gold_truth}, sensitivity=0.9, false_positive_rate=0.05, seed=17)
    gold_pred = provider.label(list(gold_truth))
    report = evaluate_gold_set([gold_pred[c] for c in gold_truth], list(gold_truth.values()))
    quality = labeler_quality(report)

    cfg = SamplingConfig(sample_size=20_000, seed=3, scheme="PPSWR")
    w = compute_weights(imps, scores, cfg.nu, cfg.gamma, cfg.epsilon)
    pop = [(ContentRecord(c, int(x), None, float(s)), wi) for c, x, s, wi in zip(ids, imps, scores, w.tolist())]
    draws = label_sample(ppswr_sample(pop, cfg.sample_size, cfg.seed), provider).draws
    raw = hh_ratio(draws)
    corrected = rogan_gladen_correct(raw, quality)
    se = math.sqrt(corrected.variance)
    z = abs(corrected.theta_hat - true_theta) / se
    ok = z < 2
    record(9, ok, f"r_hat={quality.sensitivity:.4f} f_hat={quality.false_positive_rate:.4f}; "
                  f"labeler theta={raw.theta_hat:.5f} corrected={corrected.theta_hat:.5f} "
                  f"truth={true_theta:.5f} combined SE={se:.5f} (|diff|/SE={z:.2f})")
    assert ok
