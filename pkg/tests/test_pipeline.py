import json
import shutil
from dataclasses import replace

import numpy as np
import pytest

from prevalence.cli import EXIT_CONFIG, EXIT_GATE, EXIT_INGEST, main
from prevalence.config import ConfigError, load_config, validate_config
from prevalence.ingest import IngestError, IngestReport, iter_impressions
from prevalence.labeling import SyntheticOracleProvider
from prevalence.pipeline import (
    GateFailedError,
    LineageConflictError,
    ScoreCoverageError,
    compare_scores,
    emit_dashboard_data,
    load_lineage_sample,
    measure,
    replay_run,
    run_daily,
)
from prevalence.sampler import ContentRecord, SamplingConfig, SamplingError, Scheme

from workspace import base_config, make_workspace, write_day

DAY = "2024-03-01"


@pytest.fixture
def ws(tmp_path):
    return make_workspace(tmp_path)


class TestConfig:
    def test_valid(self, ws):
        cfg = load_config(ws, day=DAY)
        assert cfg.policy_id == "spam"
        assert cfg.sampling.scheme is Scheme.PPSWOR
        assert cfg.source_path("impressions", DAY).name == f"impressions_{DAY}.jsonl"
        assert len(cfg.config_hash) == 64

    def test_aggregates_errors(self, tmp_path):
        raw = base_config(sampling={"sample_size": 0, "epsilon": 0, "bogus": 1})
        raw["extra"] = 1
        with pytest.raises(ConfigError) as ei:
            validate_config(raw, tmp_path, check_paths=False)
        msg = "\n".join(ei.value.errors)
        assert "epsilon" in msg and "sample_size" in msg and "bogus" in msg and "extra" in msg

    def test_gate_needs_gold(self, tmp_path):
        raw = base_config()
        del raw["sources"]["gold_set"]
        with pytest.raises(ConfigError, match="gold_set"):
            validate_config(raw, tmp_path, check_paths=False)

    def test_missing_paths(self, tmp_path):
        with pytest.raises(ConfigError, match="path not found"):
            validate_config(base_config(), tmp_path, day=DAY)

    def test_hash_stable_under_key_order(self, tmp_path):
        a = validate_config(base_config(), tmp_path, check_paths=False)
        raw = dict(reversed(list(base_config().items())))
        b = validate_config(raw, tmp_path, check_paths=False)
        assert a.config_hash == b.config_hash


class TestIngest:
    def test_errors_and_skips(self, tmp_path):
        p = tmp_path / "imp.jsonl"
        p.write_text("\n".join([
            json.dumps({"content_id": "a", "impressions": 3}),
            json.dumps({"content_id": "b", "impressions": 0}),
            "not json",
            json.dumps({"content_id": "a", "impressions": 2}),
            json.dumps({"content_id": "c", "impressions": 2, "segments": {"x": 5}}),
            json.dumps({"content_id": "d", "impressions": 4, "score": 0.4}),
        ]))
        rep = IngestReport()
        recs = list(iter_impressions(p, rep))
        assert [r.content_id for r in recs] == ["a", "d"]
        assert rep.out_of_frame == 1
        assert [n for n, _ in rep.errors] == [3, 4, 5]
        assert rep.error_rate == pytest.approx(3 / 6)


class TestRunDaily:
    def test_outputs(self, ws):
        cfg = load_config(ws, day=DAY)
        res = run_daily(cfg, DAY)
        names = {p.name for p in res.run_dir.iterdir()}
        assert names == {"sample.jsonl", "estimates.jsonl", "gold_report.json", "alert.json",
                         "manifest.json", "timing.json"}
        glob = res.estimates[0]
        assert glob["segment"] == "ALL" and glob["estimator_kind"] == "HT_hajek"
        assert "rg_corrected" in glob["flags"]
        assert res.alert["decision"] == "no_decision"
        kinds = {(e["segment"], e["estimator_kind"]) for e in res.estimates}
        assert ("surface=feed", "HT_known_denominator") in kinds
        assert res.manifest["files"]["estimates.jsonl"]
        assert "timing.json" not in res.manifest["files"]

    def test_reuse_and_determinism(self, ws, tmp_path):
        cfg = load_config(ws, day=DAY)
        first = run_daily(cfg, DAY)
        data = (first.run_dir / "estimates.jsonl").read_bytes()
        again = run_daily(cfg, DAY)
        assert again.reused and again.run_dir == first.run_dir
        forced = run_daily(cfg, DAY, force=True)
        assert (forced.run_dir / "estimates.jsonl").read_bytes() == data

    def test_conflict(self, ws):
        cfg = load_config(ws, day=DAY)
        res = run_daily(cfg, DAY)
        m = json.loads((res.run_dir / "manifest.json").read_text())
        m["inputs"]["impressions"] = "0" * 64
        (res.run_dir / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(LineageConflictError):
            run_daily(cfg, DAY)

    def test_replay(self, ws):
        res = run_daily(load_config(ws, day=DAY), DAY)
        assert replay_run(res.run_dir) == res.estimates
        header, draws, sample_id = load_lineage_sample(res.run_dir)
        assert sample_id == res.manifest["sample_id"]
        assert len(draws) == 300

    def test_ppswr(self, tmp_path):
        ws = make_workspace(tmp_path, sampling={"sample_size": 200, "scheme": "PPSWR", "seed": 1},
                            estimation={"rogan_gladen": "none"})
        res = run_daily(load_config(ws, day=DAY), DAY)
        assert res.estimates[0]["estimator_kind"] == "HH_ratio"
        assert replay_run(res.run_dir) == res.estimates

    def test_gate_failure(self, tmp_path):
        ws = make_workspace(tmp_path, quality={"enabled": True, "thresholds": {"min_accuracy": 0.99}})
        with pytest.raises(GateFailedError, match="accuracy"):
            run_daily(load_config(ws, day=DAY), DAY)

    def test_ingest_error_rate(self, ws):
        p = ws.parent / f"impressions_{DAY}.jsonl"
        p.write_text(p.read_text() + "garbage\n")
        with pytest.raises(IngestError):
            run_daily(load_config(ws, day=DAY), DAY)

    def test_history_feeds_alert(self, tmp_path):
        days = [f"2024-03-{d:02d}" for d in range(1, 15)]
        ws = make_workspace(tmp_path, days=days)
        cfg = load_config(ws)
        for d in days:
            res = run_daily(cfg, d)
        assert res.alert["decision"] in ("fire", "quiet")
        rows = []
        for d in days:
            rows.extend(json.loads(line) for line in
                        next((cfg.output_dir / "spam" / d).iterdir()).joinpath("estimates.jsonl").read_text().splitlines())
        ts, seg = emit_dashboard_data(rows, tmp_path / "dash")
        lines = ts.read_text().splitlines()
        assert lines[0] == "day,theta_hat,ci_low,ci_high,ess,ma7"
        assert lines[6].split(",")[-1] == "" and lines[7].split(",")[-1] != ""
        assert len(seg.read_text().splitlines()) == 1 + 5 * len(days)


class TestCompareScores:
    def records(self, n=4000):
        rng = np.random.default_rng(4)
        recs, truth, sa, sb = [], {}, {}, {}
        for i in range(n):
            cid = f"u{i}"
            y = int(rng.random() < 0.05)
            recs.append(ContentRecord(cid, int(rng.integers(1, 30))))
            truth[cid] = y
            sa[cid] = float(rng.beta(6, 1.5) if y else rng.beta(1.5, 6))
            sb[cid] = float(rng.beta(4, 2) if y else rng.beta(2, 4))
        return recs, truth, sa, sb

    def test_agree(self):
        recs, truth, sa, sb = self.records()
        cmp = compare_scores(recs, SamplingConfig(sample_size=500, seed=2, scheme="PPSWR"),
                             SyntheticOracleProvider(truth), sa, sb, include_uniform=True)
        assert cmp.agree
        assert 0 < cmp.sample_overlap < 1
        assert cmp.uniform is not None
        assert cmp.to_record()["tolerance"] > 0

    def test_coverage(self):
        recs, truth, sa, sb = self.records(50)
        del sb["u3"]
        with pytest.raises(ScoreCoverageError):
            compare_scores(recs, SamplingConfig(sample_size=10), SyntheticOracleProvider(truth), sa, sb)

    def test_measure_imputes(self):
        recs, truth, sa, _ = self.records(200)
        partial = [replace(r, score=sa[r.content_id]) if i % 2 else r for i, r in enumerate(recs)]
        sample, labeled, est = measure(partial, SamplingConfig(sample_size=50, seed=1), SyntheticOracleProvider(truth))
        assert sample.imputed_score == pytest.approx(float(np.median([sa[r.content_id] for r in partial if r.score])))
        assert len(labeled.draws) == 50 and 0 <= est.theta_hat <= 1
        with pytest.raises(SamplingError, match="fixed"):
            measure(recs, SamplingConfig(sample_size=50), SyntheticOracleProvider(truth))


class TestCli:
    def test_validate_and_run(self, ws, capsys):
        assert main(["validate", str(ws), "--day", DAY]) == 0
        assert main(["run", str(ws), DAY]) == 0
        out = json.loads(capsys.readouterr().out.split("\n}\n", 1)[1])
        assert out["reused"] is False
        assert main(["run", str(ws), DAY]) == 0

    def test_config_exit(self, tmp_path, capsys):
        bad = tmp_path / "c.json"
        bad.write_text("{}")
        assert main(["validate", str(bad)]) == EXIT_CONFIG
        assert "missing section" in capsys.readouterr().err

    def test_gate_exit(self, tmp_path):
        ws = make_workspace(tmp_path, quality={"enabled": True, "thresholds": {"min_accuracy": 0.99}})
        assert main(["run", str(ws), DAY]) == EXIT_GATE

    def test_ingest_exit(self, ws):
        (ws.parent / f"impressions_{DAY}.jsonl").write_text("junk\n")
        assert main(["run", str(ws), DAY]) == EXIT_INGEST

    def test_alert_and_dashboard(self, tmp_path, capsys):
        series = tmp_path / "s.jsonl"
        rows = [{"day": f"2024-01-{d:02d}", "segment": "ALL", "theta_hat": 0.01 if d <= 7 else 0.02,
                 "variance": 1e-8} for d in range(1, 15)]
        series.write_text("\n".join(json.dumps(r) for r in rows))
        assert main(["alert", str(series), "--sigma", "0.001"]) == 0
        assert json.loads(capsys.readouterr().out)["decision"] == "fire"

    def test_compare_cli(self, ws, capsys):
        other = ws.parent / "scores_b.jsonl"
        shutil.copy(ws.parent / f"scores_{DAY}.jsonl", other)
        assert main(["compare-scores", str(ws), DAY, str(ws.parent / f"scores_{DAY}.jsonl"), str(other)]) == 0
        rec = json.loads(capsys.readouterr().out)
        assert rec["agree"] and rec["difference"] == 0.0

    def test_emit_dashboard(self, ws, tmp_path, capsys):
        main(["run", str(ws), DAY])
        capsys.readouterr()
        assert main(["emit-dashboard", str(tmp_path / "out"), "--out", str(tmp_path / "dash")]) == 0
        assert (tmp_path / "dash" / "timeseries.csv").exists()

    def test_simulate(self, tmp_path, capsys):
        out = tmp_path / "fig.csv"
        args = ["simulate", "--n", "5000", "--sample-sizes", "200", "100000", "--trials", "5",
                "--out", str(out), "--quiet"]
        assert main(args) == 0
        first = out.read_bytes()
        assert main(args) == 0
        assert out.read_bytes() == first
        summary = json.loads(capsys.readouterr().out.split("\n}\n")[-2] + "\n}")
        assert "true_theta" in summary
