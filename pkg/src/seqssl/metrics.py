"""Word error rate via Levenshtein alignment, plus relative WER reduction
(WERR) and WER recovery rate (WRR)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass
class ScoreReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    reference_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.reference_length <= 0:
            raise ValueError("WER undefined for empty reference")
        return 100.0 * self.errors / self.reference_length

    def __add__(self, other: "ScoreReport") -> "ScoreReport":
        return ScoreReport(self.substitutions + other.substitutions,
                           self.deletions + other.deletions,
                           self.insertions + other.insertions,
                           self.reference_length + other.reference_length)

    def format(self) -> str:
        return (f"WER {self.wer:.2f} %  (S={self.substitutions} D={self.deletions} "
                f"I={self.insertions} / N={self.reference_length})")


def edit_distance_align(ref: Sequence[int], hyp: Sequence[int]) -> ScoreReport:
    """Minimal unit-cost S+D+I alignment by dynamic programming.

    Tie preference on the backtrace: substitution/match > deletion > insertion.
    """
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        raise ValueError("edit_distance_align: empty reference")
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i][j] = min(sub, d[i - 1][j] + 1, d[i][j - 1] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return ScoreReport(substitutions=s, deletions=dl, insertions=ins, reference_length=n)


def corpus_report(pairs) -> ScoreReport:
    """Aggregate error counts and reference lengths before dividing (corpus
    WER, not a mean of per-utterance WERs)."""
    total = ScoreReport()
    for ref, hyp in pairs:
        total = total + edit_distance_align(ref, hyp)
    return total


def werr(baseline_wer: float, new_wer: float) -> float:
    """Relative WER reduction, in percent."""
    if baseline_wer <= 0:
        raise ValueError("werr: baseline WER must be positive")
    return 100.0 * (baseline_wer - new_wer) / baseline_wer


def wrr(baseline_wer: float, ssl_wer: float, oracle_wer: float) -> float:
    """WER recovery rate: the fraction of the labeled-data gain recovered by
    unlabeled data, in percent."""
    if baseline_wer <= oracle_wer:
        raise ValueError("wrr: undefined unless baseline WER exceeds oracle WER")
    return 100.0 * (baseline_wer - ssl_wer) / (baseline_wer - oracle_wer)
