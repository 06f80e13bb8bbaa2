"""Line-delimited impression-log ingestion.

Impression log: one JSON object per line::

    {"content_id": "abc", "impressions": 12, "segments": {"surface=home": 7, "surface=search": 5}, "score": 0.31}

``segments`` and ``score`` are optional.  Units with zero impressions are
out of frame and skipped (counted).  Malformed lines, segment totals that
do not add up, out-of-range scores and repeated content ids are recorded
per line; the caller decides whether the error rate is acceptable.

Score file (optional, overrides inline scores): ``{"content_id", "score"}``
per line.  Truth file (simulation ground truth): ``{"content_id", "label"}``.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path

from .sampler import ContentRecord, SamplingError


class IngestError(RuntimeError):
    def __init__(self, report: IngestReport, message: str):
        self.report = report
        super().__init__(message)


@dataclass
class IngestReport:
    lines: int = 0
    records: int = 0
    out_of_frame: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)

    @property
    def error_rate(self) -> float:
        return len(self.errors) / self.lines if self.lines else 0.0

    def to_record(self, limit: int = 100) -> dict:
        return {
            "lines": self.lines,
            "records": self.records,
            "out_of_frame": self.out_of_frame,
            "n_errors": len(self.errors),
            "error_rate": self.error_rate,
            "errors": [{"line": n, "error": msg} for n, msg in self.errors[:limit]],
        }


def parse_record(row: Mapping) -> ContentRecord:
    if not isinstance(row, Mapping):
        raise SamplingError("line is not a JSON object")
    cid = row.get("content_id")
    if not isinstance(cid, str) or not cid:
        raise SamplingError("content_id must be a non-empty string")
    imp = row.get("impressions")
    if not isinstance(imp, int) or isinstance(imp, bool):
        raise SamplingError(f"{cid}: impressions must be an integer")
    segs = row.get("segments")
    if segs is not None:
        if not isinstance(segs, Mapping) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in segs.values()
        ):
            raise SamplingError(f"{cid}: segments must map keys to integers")
        segs = dict(segs)
    score = row.get("score")
    if score is not None:
        if not isinstance(score, (int, float)) or isinstance(score, bool):
            raise SamplingError(f"{cid}: score must be a number")
        score = float(score)
    return ContentRecord(cid, imp, segs, score)


def iter_impressions(path: str | Path, report: IngestReport, scores: Mapping[str, float] | None = None,
                     check_duplicates: bool = True) -> Iterator[ContentRecord]:
    """Stream valid in-frame records from an impression log, filling ``report``.

    Duplicate detection keeps the set of ids seen, which is the only state
    that grows with the stream.
    """
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            report.lines += 1
            try:
                rec = parse_record(json.loads(line))
            except (json.JSONDecodeError, SamplingError) as exc:
                report.errors.append((n, str(exc)))
                continue
            if check_duplicates:
                if rec.content_id in seen:
                    report.errors.append((n, f"duplicate content_id {rec.content_id!r}"))
                    continue
                seen.add(rec.content_id)
            if rec.impressions < 1:
                report.out_of_frame += 1
                continue
            if scores is not None and rec.content_id in scores:
                try:
                    rec = replace(rec, score=float(scores[rec.content_id]))
                except SamplingError as exc:
                    report.errors.append((n, str(exc)))
                    continue
            report.records += 1
            yield rec


def read_scores(path: str | Path) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                if row.get("score") is not None:
                    out[str(row["content_id"])] = float(row["score"])
    return out


def read_truth(path: str | Path) -> dict[str, int]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[str(row["content_id"])] = int(row["label"])
    return out


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_jsonl(path: str | Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
