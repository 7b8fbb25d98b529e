"""Self-contained numeric kernels: sentence BLEU, cosine similarity, Pearson
correlation, and the paired bootstrap significance test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .aligner import tokenize
from .errors import AlignprefError, EmptyText

MAX_BLEU_ORDER = 4


class LengthMismatch(AlignprefError):
    pass


class ZeroVariance(AlignprefError):
    pass


class DimMismatch(AlignprefError):
    pass


class ZeroVector(AlignprefError):
    pass


@dataclass(frozen=True)
class BleuScore:
    """Sentence BLEU-4 with exponential smoothing and brevity penalty.

    ngram_precisions holds smoothed precisions as fractions; orders with no
    n-grams (hypothesis shorter than the order) are stored as 0.0 and excluded
    from the geometric mean (effective-order scoring, so BLEU(h, h) = 100 for
    any non-empty h).
    """

    score: float
    ngram_precisions: tuple[float, float, float, float]
    brevity_penalty: float


def _ngram_counts(tokens: Sequence[str], order: int) -> dict[tuple[str, ...], int]:
    counts: dict[tuple[str, ...], int] = {}
    for i in range(len(tokens) - order + 1):
        gram = tuple(tokens[i : i + order])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def sentence_bleu(hypothesis: str, reference: str, lang: str = "") -> BleuScore:
    """Sentence-level BLEU-4 of `hypothesis` against `reference`.

    Zero n-gram matches are smoothed exponentially: the k-th zero numerator is
    replaced by 1/2^k (over the unchanged denominator).
    """
    if not hypothesis.strip() or not reference.strip():
        raise EmptyText("BLEU requires non-empty hypothesis and reference")
    hyp = tokenize(hypothesis, lang)
    ref = tokenize(reference, lang)

    precisions = [0.0] * MAX_BLEU_ORDER
    smooth = 1.0
    effective_order = 0
    for order in range(1, MAX_BLEU_ORDER + 1):
        hyp_counts = _ngram_counts(hyp, order)
        total = sum(hyp_counts.values())
        if total == 0:
            break
        effective_order = order
        ref_counts = _ngram_counts(ref, order)
        matched = sum(
            min(count, ref_counts.get(gram, 0)) for gram, count in hyp_counts.items()
        )
        if matched == 0:
            smooth *= 2.0
            precisions[order - 1] = 1.0 / (smooth * total)
        else:
            precisions[order - 1] = matched / total

    hyp_len, ref_len = len(hyp), len(ref)
    brevity_penalty = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    log_sum = sum(math.log(p) for p in precisions[:effective_order])
    score = brevity_penalty * math.exp(log_sum / effective_order) * 100.0
    return BleuScore(
        score=score,
        ngram_precisions=tuple(precisions),  # type: ignore[arg-type]
        brevity_penalty=brevity_penalty,
    )


def cosine(a: Any, b: Any) -> float:
    """Cosine similarity of two embedding vectors, clamped to [-1, 1]."""
    if a.dim != b.dim:
        raise DimMismatch(f"dims differ: {a.dim} vs {b.dim}")
    va = np.asarray(a.values, dtype=np.float64)
    vb = np.asarray(b.values, dtype=np.float64)
    norm_a = float(np.linalg.norm(va))
    norm_b = float(np.linalg.norm(vb))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("cosine undefined for zero vectors")
    value = float(np.dot(va, vb) / (norm_a * norm_b))
    return max(-1.0, min(1.0, value))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    if len(xs) != len(ys):
        raise LengthMismatch(f"lengths differ: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise LengthMismatch("need at least 2 points")
    ax = np.asarray(xs, dtype=np.float64)
    ay = np.asarray(ys, dtype=np.float64)
    dx = ax - ax.mean()
    dy = ay - ay.mean()
    var_x = float(np.dot(dx, dx))
    var_y = float(np.dot(dy, dy))
    if var_x == 0.0 or var_y == 0.0:
        raise ZeroVariance("correlation undefined for constant input")
    value = float(np.dot(dx, dy) / math.sqrt(var_x * var_y))
    return max(-1.0, min(1.0, value))


@dataclass(frozen=True)
class BootstrapResult:
    mean_diff: float
    p_value: float
    iterations: int
    seed: int


def paired_bootstrap(
    scores_a: Sequence[float],
    scores_b: Sequence[float],
    iterations: int = 100_000,
    seed: int = 42,
) -> BootstrapResult:
    """Paired bootstrap test on example-wise score differences (b - a).

    Each iteration resamples n indices with replacement and records the mean
    difference; the two-sided p-value is 2 * min(frac <= 0, frac >= 0),
    capped at 1. Randomness comes from numpy's PCG64 stream seeded with
    `seed`, so results are reproducible bit-for-bit.
    """
    if len(scores_a) != len(scores_b):
        raise LengthMismatch(f"lengths differ: {len(scores_a)} vs {len(scores_b)}")
    n = len(scores_a)
    if n < 2:
        raise LengthMismatch("need at least 2 paired scores")
    if iterations < 1:
        raise ValueError(f"iterations must be positive, got {iterations}")
    diffs = np.asarray(scores_b, dtype=np.float64) - np.asarray(scores_a, dtype=np.float64)
    rng = np.random.Generator(np.random.PCG64(seed))

    count_le = 0
    count_ge = 0
    chunk = 1000
    remaining = iterations
    while remaining > 0:
        size = min(chunk, remaining)
        idx = rng.integers(0, n, size=(size, n))
        means = diffs[idx].mean(axis=1)
        count_le += int(np.count_nonzero(means <= 0.0))
        count_ge += int(np.count_nonzero(means >= 0.0))
        remaining -= size

    p_value = min(1.0, 2.0 * min(count_le, count_ge) / iterations)
    return BootstrapResult(
        mean_diff=float(diffs.mean()),
        p_value=p_value,
        iterations=iterations,
        seed=seed,
    )


def load_scores(path: str | Path) -> dict[str, float]:
    """Load a score sidecar TSV (segment_id<TAB>score per line)."""
    scores: dict[str, float] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            segment_id, _, raw = line.partition("\t")
            scores[segment_id] = float(raw)
    return scores


def save_scores(path: str | Path, scores: Iterable[tuple[str, float]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for segment_id, score in scores:
            fh.write(f"{segment_id}\t{score}\n")
