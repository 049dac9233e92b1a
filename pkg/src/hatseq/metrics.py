"""ROUGE-1/2/L and corpus BLEU.

Scoring tokenization is whitespace splitting of lowercased text, applied
uniformly so reported numbers are reproducible.  Corpus ROUGE is the
macro average of per-example precision/recall/F1.  BLEU is the geometric
mean of modified n-gram precisions (n = 1..4) with the exp(1 - ref/cand)
brevity penalty, no smoothing, reported on a 0-100 scale; a zero
precision at any order gives BLEU 0.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass


def tokenize_for_eval(text: str) -> list[str]:
    return text.lower().split()


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _prf(matches: float, cand_total: float, ref_total: float) -> tuple[float, float, float]:
    p = matches / cand_total if cand_total else 0.0
    r = matches / ref_total if ref_total else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def rouge_n(candidate: list, reference: list, n: int) -> tuple[float, float, float]:
    """Clipped n-gram overlap (precision, recall, F1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not reference:
        raise ValueError("reference must be non-empty")
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    matches = sum(min(c, ref[g]) for g, c in cand.items())
    return _prf(matches, sum(cand.values()), sum(ref.values()))


def lcs_length(a: list, b: list) -> int:
    """Longest common subsequence length, O(len(a) * len(b))."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: list, reference: list) -> tuple[float, float, float]:
    """LCS-based (precision, recall, F1)."""
    if not reference:
        raise ValueError("reference must be non-empty")
    lcs = lcs_length(candidate, reference)
    return _prf(lcs, len(candidate), len(reference))


@dataclass
class BleuResult:
    bleu: float                      # 0-100
    precisions: tuple[float, ...]    # modified n-gram precisions, n = 1..max_n
    brevity_penalty: float
    candidate_length: int
    reference_length: int


def corpus_bleu(candidates: list[list], references: list[list], max_n: int = 4) -> BleuResult:
    if not candidates:
        raise ValueError("empty corpus")
    if len(candidates) != len(references):
        raise ValueError(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        if not ref:
            raise ValueError("reference must be non-empty")
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cgrams = _ngrams(cand, n)
            rgrams = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, rgrams[g]) for g, c in cgrams.items())
            totals[n - 1] += sum(cgrams.values())
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if cand_len == 0 or any(p == 0.0 for p in precisions):
        return BleuResult(0.0, precisions, 0.0, cand_len, ref_len)
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    geo = math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuResult(100.0 * bp * geo, precisions, bp, cand_len, ref_len)


@dataclass
class EvalReport:
    rouge1: tuple[float, float, float] | None = None
    rouge2: tuple[float, float, float] | None = None
    rougeL: tuple[float, float, float] | None = None
    bleu: BleuResult | None = None

    def to_dict(self) -> dict:
        out: dict = {}
        for name in ("rouge1", "rouge2", "rougeL"):
            value = getattr(self, name)
            if value is not None:
                out[name] = {"precision": value[0], "recall": value[1], "f1": value[2]}
        if self.bleu is not None:
            out["bleu"] = {
                "score": self.bleu.bleu,
                "precisions": list(self.bleu.precisions),
                "brevity_penalty": self.bleu.brevity_penalty,
                "candidate_length": self.bleu.candidate_length,
                "reference_length": self.bleu.reference_length,
            }
        return out

    def to_text(self) -> str:
        lines = []
        for name in ("rouge1", "rouge2", "rougeL"):
            value = getattr(self, name)
            if value is not None:
                lines.append(
                    f"{name}: p={value[0]:.4f} r={value[1]:.4f} f1={value[2]:.4f}"
                )
        if self.bleu is not None:
            precs = " ".join(f"{p:.4f}" for p in self.bleu.precisions)
            lines.append(
                f"bleu: {self.bleu.bleu:.2f} (precisions {precs}, "
                f"bp {self.bleu.brevity_penalty:.4f}, "
                f"lengths {self.bleu.candidate_length}/{self.bleu.reference_length})"
            )
        return "\n".join(lines)


def _mean_triples(triples: list[tuple[float, float, float]]) -> tuple[float, float, float]:
    n = len(triples)
    return (
        sum(t[0] for t in triples) / n,
        sum(t[1] for t in triples) / n,
        sum(t[2] for t in triples) / n,
    )


def build_report(candidates: list[list], references: list[list],
                 rouge: bool = True, bleu: bool = True) -> EvalReport:
    if not candidates or len(candidates) != len(references):
        raise ValueError("candidate and reference lists must be non-empty and equal length")
    report = EvalReport()
    if rouge:
        pairs = list(zip(candidates, references))
        report.rouge1 = _mean_triples([rouge_n(c, r, 1) for c, r in pairs])
        report.rouge2 = _mean_triples([rouge_n(c, r, 2) for c, r in pairs])
        report.rougeL = _mean_triples([rouge_l(c, r) for c, r in pairs])
    if bleu:
        report.bleu = corpus_bleu(candidates, references)
    return report
