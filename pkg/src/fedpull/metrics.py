"""Corpus BLEU with short-sequence smoothing, token accuracy, drift histograms, report files."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .tensors import GROUPS, DeltaRecord


@dataclass(frozen=True)
class EvalResult:
    domain: str
    bleu: float
    token_accuracy: float
    n_sentences: int

    def as_dict(self) -> dict:
        return {
            "domain": self.domain,
            "bleu": float(self.bleu),
            "token_accuracy": float(self.token_accuracy),
            "n_sentences": int(self.n_sentences),
        }


@dataclass(frozen=True)
class Histogram:
    group: str
    bucket_width: float
    buckets: tuple[tuple[float, int], ...]


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus-level BLEU in [0, 100]: geometric mean of modified n-gram precisions
    times the brevity penalty.  Precisions for n >= 2 get add-1 smoothing; the
    unigram precision stays raw so zero-overlap hypotheses score 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"length mismatch: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty evaluation set")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hgrams = _ngrams(hyp, n)
            if not hgrams:
                continue
            rgrams = _ngrams(ref, n)
            totals[n - 1] += sum(hgrams.values())
            matches[n - 1] += sum(min(c, rgrams[g]) for g, c in hgrams.items())
    if totals[0] == 0 or matches[0] == 0:
        return 0.0
    log_sum = math.log(matches[0] / totals[0])
    for n in range(2, max_n + 1):
        log_sum += math.log((matches[n - 1] + 1) / (totals[n - 1] + 1))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum / max_n)


def token_accuracy(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Position-wise exact-match rate over max(len(hyp), len(ref)) positions, averaged over pairs."""
    if len(hypotheses) != len(references):
        raise ValueError(f"length mismatch: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty evaluation set")
    total = 0.0
    for hyp, ref in zip(hypotheses, references):
        span = max(len(hyp), len(ref))
        if span == 0:
            total += 1.0
            continue
        hits = sum(1 for a, b in zip(hyp, ref) if a == b)
        total += hits / span
    return total / len(hypotheses)


def norm_histogram(deltas: Sequence[DeltaRecord], bucket_width: float) -> list[Histogram]:
    """Per-group histograms of delta norms; bucket index = floor(norm / width)."""
    if not bucket_width > 0:
        raise ValueError(f"bucket_width must be positive, got {bucket_width}")
    by_group: dict[str, Counter] = {}
    for rec in deltas:
        idx = int(rec.norm // bucket_width)
        by_group.setdefault(rec.group, Counter())[idx] += 1
    out = []
    for group in GROUPS:
        if group not in by_group:
            continue
        buckets = tuple(
            (idx * bucket_width, count) for idx, count in sorted(by_group[group].items())
        )
        out.append(Histogram(group=group, bucket_width=bucket_width, buckets=buckets))
    return out


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

METRICS_COLUMNS = (
    "round",
    "client_id",
    "test_domain",
    "bleu",
    "token_accuracy",
    "params_pulled",
    "params_pushed",
)
HISTOGRAM_COLUMNS = ("round", "client_id", "group", "bucket_lower", "count")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([row.get(col, "") for col in columns])
    return buf.getvalue()


def report_write(report, directory) -> dict[str, Path]:
    """Write report.json, metrics.csv, and histograms.csv atomically.

    `report` must provide to_json_dict(), metrics_rows(), and histogram_rows().
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": directory / "report.json",
        "metrics": directory / "metrics.csv",
        "histograms": directory / "histograms.csv",
    }
    payload = json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n"
    _atomic_write(paths["report"], payload)
    _atomic_write(paths["metrics"], _csv_text(METRICS_COLUMNS, report.metrics_rows()))
    _atomic_write(paths["histograms"], _csv_text(HISTOGRAM_COLUMNS, report.histogram_rows()))
    return paths
