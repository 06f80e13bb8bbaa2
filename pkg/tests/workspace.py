"""Synthetic on-disk inputs for pipeline and CLI tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_day(root: Path, day: str, n: int = 3000, seed: int = 0, rate: float = 0.03) -> None:
    """Impressions (two segments), scores, truth and a gold set for one day."""
    rng = np.random.default_rng(seed)
    imp_lines, score_lines, truth_lines = [], [], []
    for i in range(n):
        cid = f"d{day}-c{i}"
        y = int(rng.random() < rate)
        c = int(rng.integers(1, 50))
        a = int(rng.integers(0, c + 1))
        segs = {k: v for k, v in (("surface=feed", a), ("surface=search", c - a)) if v}
        s = float(rng.beta(6, 1.5) if y else rng.beta(1.5, 6))
        imp_lines.append(json.dumps({"content_id": cid, "impressions": c, "segments": segs}))
        score_lines.append(json.dumps({"content_id": cid, "score": max(s, 1e-9)}))
        truth_lines.append(json.dumps({"content_id": cid, "label": y}))
    (root / f"impressions_{day}.jsonl").write_text("\n".join(imp_lines) + "\n")
    (root / f"scores_{day}.jsonl").write_text("\n".join(score_lines) + "\n")
    (root / f"truth_{day}.jsonl").write_text("\n".join(truth_lines) + "\n")


def write_gold(root: Path, n: int = 400, r: float = 0.9, f: float = 0.05, seed: int = 1) -> Path:
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n):
        t = int(i % 2 == 0)
        p = int(rng.random() < (r if t else f))
        lines.append(json.dumps({"content_id": f"g{i}", "truth": t, "prediction": p}))
    path = root / "gold.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def base_config(**overrides) -> dict:
    cfg = {
        "policy": {"policy_id": "spam", "taxonomy": ["spam/commercial"]},
        "sources": {
            "impressions": "impressions_{day}.jsonl",
            "scores": "scores_{day}.jsonl",
            "truth": "truth_{day}.jsonl",
            "gold_set": "gold.jsonl",
        },
        "sampling": {"sample_size": 300, "nu": 1.0, "gamma": 1.0, "epsilon": 1e-6,
                     "scheme": "PPSWOR", "seed": 7},
        "labeler": {"kind": "mock_remote", "version_id": "mock-v1", "sensitivity": 0.9,
                    "false_positive_rate": 0.05, "seed": 3},
        "quality": {"enabled": True, "thresholds": {"min_accuracy": 0.8, "min_recall": 0.8}},
        "output": {"directory": "out"},
        "segments": ["surface=feed", "surface=search"],
        "alerting": {"alpha": 0.05, "power": 0.8, "window_days": 7},
        "estimation": {"rogan_gladen": "global"},
    }
    for key, value in overrides.items():
        cfg[key] = value
    return cfg


def make_workspace(root: Path, days=("2024-03-01",), **overrides) -> Path:
    for i, day in enumerate(days):
        write_day(root, day, seed=i)
    write_gold(root)
    path = root / "config.json"
    path.write_text(json.dumps(base_config(**overrides), indent=1))
    return path
