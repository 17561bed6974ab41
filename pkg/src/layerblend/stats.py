"""Metrics and paired nonparametric comparison of per-seed results.

Accuracy and support-weighted F1 score the classifier; the exact Wilcoxon
signed-rank test (full sign-assignment distribution for n <= 20, normal
approximation with tie and continuity correction beyond) and the
Vargha-Delaney A12 effect size compare a candidate configuration against
the baseline over seed-aligned runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError

ALPHA = 0.05

# effect-size thresholds applied to max(a12, 1 - a12)
_MAGNITUDE_STEPS = ((0.71, "large"), (0.64, "medium"), (0.56, "small"))


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of exact matches."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape or preds.size == 0:
        raise ContractError(
            f"accuracy needs equal-length non-empty inputs, got "
            f"{preds.shape} vs {labs.shape}"
        )
    return float(np.mean(preds == labs))


def weighted_f1(predictions: Sequence[int], labels: Sequence[int], num_classes: int) -> float:
    """Per-class F1 averaged with weights equal to true-class support.

    Classes without support carry zero weight; classes whose precision and
    recall are both undefined or zero contribute an F1 of zero.
    """
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape or preds.size == 0:
        raise ContractError("weighted_f1 needs equal-length non-empty inputs")
    if labs.min() < 0 or labs.max() >= num_classes or preds.min() < 0 or preds.max() >= num_classes:
        raise ContractError(f"labels/predictions must lie in [0, {num_classes})")
    total = 0.0
    for c in range(num_classes):
        support = int(np.sum(labs == c))
        if support == 0:
            continue
        tp = int(np.sum((preds == c) & (labs == c)))
        predicted = int(np.sum(preds == c))
        precision = tp / predicted if predicted else 0.0
        recall = tp / support
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        total += support * f1
    return total / labs.size


@dataclass(frozen=True)
class PairedSamples:
    """Seed-aligned per-run metric values for baseline and candidate."""

    baseline: tuple[float, ...]
    candidate: tuple[float, ...]

    def __post_init__(self):
        if len(self.baseline) != len(self.candidate):
            raise ContractError(
                f"paired samples differ in length: {len(self.baseline)} vs "
                f"{len(self.candidate)}"
            )
        if not self.baseline:
            raise ContractError("paired samples must hold at least one pair")


def _midranks(values: np.ndarray) -> np.ndarray:
    return rankdata(values, method="average")


def _exact_min_statistic_pvalue(doubled_ranks: np.ndarray, w2_min: int) -> float:
    """P(min(W+, W-) <= observed) under the full sign-assignment null.

    ``doubled_ranks`` are 2x the midranks (always integers), so the
    distribution of 2*W+ lives on integers and is counted by subset-sum
    dynamic programming. Counts stay below 2**20 and are exact in float64.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for d in doubled_ranks:
        d = int(d)
        counts[d:] = counts[d:] + counts[:total + 1 - d]
    low = counts[: w2_min + 1].sum()
    overlap = counts[w2_min] if total - w2_min == w2_min else 0.0
    return (2.0 * low - overlap) / 2.0 ** len(doubled_ranks)


def wilcoxon_signed_rank(paired: PairedSamples) -> float:
    """Two-sided Wilcoxon signed-rank p-value for candidate vs baseline.

    Zero differences are discarded; ties receive midranks. The statistic is
    W = min(W+, W-). For n <= 20 remaining pairs the p-value is exact over
    all 2^n sign assignments; larger n fall back to the normal
    approximation with tie and continuity correction. All-zero differences
    give p = 1.
    """
    d = np.asarray(paired.candidate, dtype=float) - np.asarray(paired.baseline, dtype=float)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = _midranks(np.abs(d))
    w_plus = ranks[d > 0].sum()
    w_minus = ranks[d < 0].sum()
    w = min(w_plus, w_minus)
    if n <= 20:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        w2_min = int(round(2.0 * w))
        return _exact_min_statistic_pvalue(doubled, w2_min)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(((tie_counts**3) - tie_counts).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    z = (w - mean + 0.5) / math.sqrt(var)
    p = math.erfc(-z / math.sqrt(2.0))  # 2 * Phi(z)
    return min(1.0, p)


def _magnitude(value: float) -> str:
    scaled = max(value, 1.0 - value)
    for threshold, name in _MAGNITUDE_STEPS:
        if scaled >= threshold:
            return name
    return "negligible"


def a12(candidate: Sequence[float], baseline: Sequence[float]) -> tuple[float, str]:
    """Vargha-Delaney A12 of candidate over baseline, with its magnitude.

    A12 is the probability (counting ties as half) that a random candidate
    measurement exceeds a random baseline one, computed via the rank-sum
    identity. Magnitude thresholds 0.71/0.64/0.56 apply to
    max(a12, 1 - a12); anything below is negligible.
    """
    cand = np.asarray(candidate, dtype=float)
    base = np.asarray(baseline, dtype=float)
    if cand.size == 0 or base.size == 0:
        raise ContractError("a12 needs non-empty samples")
    ranks = _midranks(np.concatenate([cand, base]))
    r1 = ranks[: cand.size].sum()
    m, n = cand.size, base.size
    value = (r1 / m - (m + 1) / 2.0) / n
    return float(value), _magnitude(float(value))


def speedup(baseline_epoch_time: float, candidate_epoch_time: float) -> float:
    """Wall-clock speed-up factor of the candidate over the baseline."""
    if baseline_epoch_time <= 0 or candidate_epoch_time <= 0:
        raise ContractError("epoch times must be positive")
    return baseline_epoch_time / candidate_epoch_time


@dataclass(frozen=True)
class ComparisonResult:
    """Candidate-minus-baseline summary for one metric."""

    mean_diff: float
    p_value: float
    significant: bool
    a12: float
    magnitude: str

    def __post_init__(self):
        if self.significant != (self.p_value < ALPHA):
            raise ContractError("significance flag inconsistent with p-value")


def compare_to_baseline(
    baseline_by_seed: Mapping[int, float],
    candidate_by_seed: Mapping[int, float],
) -> ComparisonResult:
    """Assemble the full paired comparison over seed-aligned metric values."""
    if set(baseline_by_seed) != set(candidate_by_seed):
        raise ContractError(
            f"seed sets disagree: {sorted(baseline_by_seed)} vs "
            f"{sorted(candidate_by_seed)}"
        )
    seeds = sorted(baseline_by_seed)
    base = tuple(baseline_by_seed[s] for s in seeds)
    cand = tuple(candidate_by_seed[s] for s in seeds)
    paired = PairedSamples(baseline=base, candidate=cand)
    p = wilcoxon_signed_rank(paired)
    effect, magnitude = a12(cand, base)
    return ComparisonResult(
        mean_diff=float(np.mean(cand) - np.mean(base)),
        p_value=p,
        significant=p < ALPHA,
        a12=effect,
        magnitude=magnitude,
    )
