"""ROUGE-1/2/L scoring and corpus-level aggregation.

Scoring unit: lowercase whitespace words with punctuation stripped at token
edges; no stemming, so absolute numbers are comparable only within this
repo. ROUGE-L is summary-level longest common subsequence over the whole
word sequences. All report values are F1 percentages (mean of per-document
scores times 100).
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernels import lcs_length

ROUGE_VARIANT_NOTE = (
    "rouge-l: summary-level LCS; unit: lowercase words, edge punctuation stripped; stemming: none"
)


class EvalError(RuntimeError):
    pass


@dataclass
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: float, cand_total: int, ref_total: int) -> "RougeScore":
        p = overlap / cand_total if cand_total > 0 else 0.0
        r = overlap / ref_total if ref_total > 0 else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f1)


_EDGE = string.punctuation


def words(text: str) -> list[str]:
    out = []
    for raw in text.lower().split():
        w = raw.strip(_EDGE)
        if w:
            out.append(w)
    return out


def _ngram_counts(tokens, n: int) -> dict:
    counts: dict = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i : i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def rouge_n(candidate, reference, n: int) -> RougeScore:
    """Clipped n-gram overlap: each reference n-gram is credited at most its
    reference multiplicity."""
    if n < 1:
        raise EvalError(f"n must be >= 1, got {n}")
    cand = _ngram_counts(list(candidate), n)
    ref = _ngram_counts(list(reference), n)
    overlap = sum(min(c, ref.get(g, 0)) for g, c in cand.items())
    return RougeScore.from_counts(overlap, sum(cand.values()), sum(ref.values()))


def rouge_l(candidate, reference) -> RougeScore:
    candidate = list(candidate)
    reference = list(reference)
    if not candidate or not reference:
        return RougeScore(0.0, 0.0, 0.0)
    interned: dict = {}
    ca = np.array([interned.setdefault(t, len(interned)) for t in candidate], dtype=np.int64)
    ra = np.array([interned.setdefault(t, len(interned)) for t in reference], dtype=np.int64)
    lcs = lcs_length(ca, ra)
    return RougeScore.from_counts(lcs, len(candidate), len(reference))


def score_pair(candidate_text: str, reference_text: str) -> tuple[RougeScore, RougeScore, RougeScore]:
    c = words(candidate_text)
    r = words(reference_text)
    return rouge_n(c, r, 1), rouge_n(c, r, 2), rouge_l(c, r)


@dataclass
class EvalReport:
    per_doc: dict[str, tuple[float, float, float]]  # id -> (r1, r2, rl) F1 fractions
    mean_r1: float
    mean_r2: float
    mean_rl: float

    @property
    def count(self) -> int:
        return len(self.per_doc)


def evaluate_corpus(predictions: dict[str, str], references: dict[str, str],
                    out_csv=None) -> EvalReport:
    """Score every prediction against its reference abstract.

    Every prediction id must exist in the references; unmatched ids are
    fatal and listed.
    """
    unmatched = sorted(set(predictions) - set(references))
    if unmatched:
        raise EvalError(f"predictions reference unknown article ids: {unmatched}")
    if not predictions:
        raise EvalError("no predictions to evaluate")
    per_doc: dict[str, tuple[float, float, float]] = {}
    for doc_id in sorted(predictions):
        r1, r2, rl = score_pair(predictions[doc_id], references[doc_id])
        per_doc[doc_id] = (r1.f1, r2.f1, rl.f1)
    arr = np.array(list(per_doc.values()))
    report = EvalReport(
        per_doc=per_doc,
        mean_r1=float(arr[:, 0].mean()) * 100.0,
        mean_r2=float(arr[:, 1].mean()) * 100.0,
        mean_rl=float(arr[:, 2].mean()) * 100.0,
    )
    if out_csv is not None:
        write_report_csv(report, out_csv)
    return report


def write_report_csv(report: EvalReport, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {ROUGE_VARIANT_NOTE}\n")
        f.write("article_id,r1,r2,rl\n")
        for doc_id, (r1, r2, rl) in report.per_doc.items():
            f.write(f"{doc_id},{100 * r1:.2f},{100 * r2:.2f},{100 * rl:.2f}\n")
        f.write(f"mean,{report.mean_r1:.2f},{report.mean_r2:.2f},{report.mean_rl:.2f}\n")


def format_report_table(report: EvalReport, label: str = "") -> str:
    lines = [
        f"# {ROUGE_VARIANT_NOTE}",
        f"{'system':<28} {'docs':>6} {'R-1':>7} {'R-2':>7} {'R-L':>7} {'BERTScore':>10}",
    ]
    lines.append(
        f"{label or 'predictions':<28} {report.count:>6} {report.mean_r1:>7.2f} "
        f"{report.mean_r2:>7.2f} {report.mean_rl:>7.2f} {'unavailable':>10}"
    )
    return "\n".join(lines)


def load_predictions(path) -> dict[str, str]:
    """Read generation output JSON-lines: {article_id, prediction, ...}."""
    preds: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EvalError(f"{path} line {line_no}: malformed JSON ({exc.msg})") from exc
            if "article_id" not in obj or "prediction" not in obj:
                raise EvalError(f"{path} line {line_no}: need article_id and prediction keys")
            preds[str(obj["article_id"])] = str(obj["prediction"])
    return preds
