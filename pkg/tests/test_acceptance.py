"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run with `pytest tests/test_acceptance.py -s` to see one PASS line per
criterion; a failing criterion fails its test.
"""

from __future__ import annotations

import math
import random
import time

import numpy as np
import pytest

from alignpref.aligner import AlignmentLink, LexicalAligner, coverage, coverage_from_links
from alignpref.corpus import LangDirection, TranslationCandidate
from alignpref.dpo import (
    PolicyScores,
    ToyPolicy,
    TrainConfig,
    dpo_grad,
    dpo_loss,
    dpo_margin,
    sequence_logprob,
    train_toy,
)
from alignpref.evalkit import (
    EvalRecord,
    bucket_stats,
    coverage_histogram,
    hard_split,
    severity_correlation,
    write_bucket_stats_tsv,
)
from alignpref.io_utils import read_tsv
from alignpref.metrics import paired_bootstrap, sentence_bleu
from alignpref.preference import build_dataset, filter_similarity
from alignpref.providers import HashEmbedder, mock_token_map

from e2e import EXPECTED_ARTIFACTS, build_fixtures, run_pipeline
from synthdata import crafted_filter_fixture, degraded_text, make_corpus, make_quality_scores
from test_dpo import random_policy, random_triplets
from test_metrics import BLEU_FIXTURES

DE_EN = LangDirection("de", "en")


def report(number: int, message: str) -> None:
    print(f"\n[criterion {number:2d}] PASS — {message}")


def test_criterion_1_dpo_math():
    start = time.perf_counter()

    # equal policies: loss is exactly ln 2
    scores = PolicyScores(-2.0, -3.5, -2.0, -3.5)
    assert abs(dpo_loss(scores, 0.1) - math.log(2)) < 1e-12

    # analytic gradients vs central finite differences on the seeded fixture
    rng = np.random.default_rng(7)
    vocab = [f"t{i}" for i in range(6)]
    triplets = random_triplets(5, vocab, rng)
    policy = random_policy(vocab, rng)
    ref = random_policy(vocab, rng)
    beta = 0.1
    grads = dpo_grad(triplets, policy, ref, beta)

    from alignpref.aligner import tokenize
    from alignpref.dpo import _softplus

    def mean_loss() -> float:
        total = 0.0
        for t in triplets:
            src = tokenize(t.source)
            s = PolicyScores(
                sequence_logprob(policy, src, tokenize(t.chosen.text)),
                sequence_logprob(policy, src, tokenize(t.rejected.text)),
                sequence_logprob(ref, src, tokenize(t.chosen.text)),
                sequence_logprob(ref, src, tokenize(t.rejected.text)),
            )
            total += _softplus(-dpo_margin(s, beta))
        return total / len(triplets)

    h = 1e-5
    max_rel = 0.0
    for array, grad in ((policy.theta, grads.dtheta), (policy.phi, grads.dphi)):
        it = np.nditer(array, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = array[idx]
            array[idx] = orig + h
            up = mean_loss()
            array[idx] = orig - h
            down = mean_loss()
            array[idx] = orig
            fd = (up - down) / (2 * h)
            denom = max(abs(grad[idx]), abs(fd))
            if denom >= 1e-10:
                max_rel = max(max_rel, abs(grad[idx] - fd) / denom)
    assert max_rel < 1e-5

    # softplus identity on 100 random margins
    margin_rng = np.random.default_rng(17)
    for raw_margin in margin_rng.normal(0, 20, size=100):
        gap = dpo_loss(PolicyScores(raw_margin, 0, 0, 0), beta) - dpo_loss(
            PolicyScores(-raw_margin, 0, 0, 0), beta
        )
        assert abs(gap - (-beta * raw_margin)) < 1e-9

    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    report(1, f"loss=ln2 exact, grad max rel err {max_rel:.2e} < 1e-5, identity 1e-9 ({elapsed:.2f}s)")


def test_criterion_2_toy_dpo_learning():
    from synthdata import separable_triplets

    start = time.perf_counter()
    triplets = separable_triplets(20, seed=42)
    _, trace = train_toy(triplets, TrainConfig(lr=0.5, epochs=200, seed=42, beta=0.1))
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    assert trace[-1].reward_accuracy >= 0.9
    for prev, after in zip(trace, trace[1:]):
        assert after.mean_loss <= prev.mean_loss + 1e-6
    report(
        2,
        f"reward accuracy {trace[-1].reward_accuracy:.2f} >= 0.9, trace non-increasing ({elapsed:.2f}s)",
    )


def test_criterion_3_filter_conformance():
    segments, candidates, lexicon, expected = crafted_filter_fixture()
    embedder = HashEmbedder()
    triplets, stats = build_dataset(
        segments,
        candidates,
        provider_priorities={"mt-a": 1, "mt-b": 2},
        embedder=embedder,
        backend=LexicalAligner(lexicon=lexicon),
    )
    # hand-computed keep/drop set with per-filter attribution
    assert {t.segment_id for t in triplets} == {
        sid for sid, fate in expected.items() if fate == "kept"
    }
    assert stats.dropped_by == {"coverage_delta": 1, "similarity": 1, "copy_bleu": 1}
    # re-scan of the emitted dataset against the section-3.3 thresholds
    for triplet in triplets:
        assert triplet.chosen.coverage - triplet.rejected.coverage >= 5.0
        assert filter_similarity(triplet.chosen, triplet.rejected, embedder).measured <= 0.9
        assert sentence_bleu(triplet.chosen.text, triplet.source).score <= 20.0
    report(3, f"7/10 kept, one drop per filter, emitted dataset re-verified clean")


def test_criterion_4_bleu_oracle():
    for hyp, ref, expected in BLEU_FIXTURES:
        assert abs(sentence_bleu(hyp, ref).score - expected) < 0.5
    for text in ("word", "a b", "one two three four five"):
        assert sentence_bleu(text, text).score == 100.0
    report(4, f"{len(BLEU_FIXTURES)} pinned oracle pairs within 0.5 BLEU, BLEU(h,h)=100 exact")


def test_criterion_5_coverage_semantics():
    rng = random.Random(5005)
    vocab = [f"t{i}" for i in range(8)]
    cases = 0
    for _ in range(250):
        src = [rng.choice(vocab) for _ in range(rng.randint(1, 8))]
        tgt = [rng.choice(vocab) for _ in range(rng.randint(2, 8))]
        aligner = LexicalAligner()
        if rng.random() < 0.5:
            aligner._fwd = {
                s: {t: round(rng.random(), 3) for t in vocab if rng.random() < 0.4}
                for s in vocab
            }
            aligner._bwd = {
                t: {s: round(rng.random(), 3) for s in vocab if rng.random() < 0.4}
                for t in vocab
            }
        threshold = rng.choice([0.2, 0.5, 0.8])
        links = aligner.align(src, tgt, threshold)
        base = coverage_from_links("s", "p", len(src), links)

        # 1: removing a target token never increases coverage
        drop = rng.randrange(len(tgt))
        reduced = aligner.align(src, tgt[:drop] + tgt[drop + 1 :], threshold)
        assert coverage_from_links("s", "p", len(src), reduced).coverage <= base.coverage
        # 2: adding a link never decreases coverage
        extra = AlignmentLink(rng.randrange(len(src)), rng.randrange(len(tgt)), 1.0)
        assert coverage_from_links("s", "p", len(src), links + [extra]).coverage >= base.coverage
        # 3: permutation invariance
        shuffled = tgt[:]
        rng.shuffle(shuffled)
        permuted = aligner.align(src, shuffled, threshold)
        assert coverage_from_links("s", "p", len(src), permuted).coverage == base.coverage
        # 4: threshold monotonicity (links nest, coverage ordered)
        t1, t2 = sorted([rng.random(), rng.random()])
        loose = aligner.align(src, tgt, t1)
        strict = aligner.align(src, tgt, t2)
        assert {(l.src_index, l.tgt_index) for l in strict} <= {
            (l.src_index, l.tgt_index) for l in loose
        }
        assert (
            coverage_from_links("s", "p", len(src), strict).coverage
            <= coverage_from_links("s", "p", len(src), loose).coverage
        )
        cases += 4

    # fixture coverages match hand enumeration exactly
    aligner = LexicalAligner(lexicon={"chien": {"dog"}})
    links = aligner.align(["le", "chien"], ["the", "dog"], 0.5)
    assert [(l.src_index, l.tgt_index) for l in links] == [(1, 1)]
    from alignpref.corpus import SourceSegment

    segment = SourceSegment(id="s1", direction=DE_EN, source="le chien")
    candidate = TranslationCandidate("s1", "mt", "the dog")
    assert coverage(segment, candidate, aligner, 0.5).coverage == 50.0
    ten = SourceSegment(id="s2", direction=DE_EN, source=" ".join(f"w{i}" for i in range(10)))
    seven = TranslationCandidate("s2", "mt", " ".join(f"w{i}" for i in range(7)))
    assert coverage(ten, seven, LexicalAligner(), 0.5).coverage == 70.0
    assert cases >= 1000
    report(5, f"{cases} randomized property cases, fixtures match hand enumeration")


def test_criterion_6_preference_signal_sanity():
    rng = random.Random(606)
    segments = make_corpus(200, seed=606, direction=DE_EN, min_len=4, max_len=10,
                           unique_tokens=True)
    lexicon = {f"word{idx:02d}": {mock_token_map(f"word{idx:02d}")} for idx in range(40)}
    backend = LexicalAligner(lexicon=lexicon)
    wins = 0
    gaps = []
    records = []
    for seg in segments:
        tokens = seg.source.split()
        intact = TranslationCandidate(seg.id, "intact", " ".join(mock_token_map(t) for t in tokens))
        degraded = TranslationCandidate(seg.id, "degraded", degraded_text(tokens, 0.3, rng))
        cov_intact = coverage(seg, intact, backend, 0.5).coverage
        cov_degraded = coverage(seg, degraded, backend, 0.5).coverage
        wins += cov_intact > cov_degraded
        gaps.append(cov_intact - cov_degraded)
        records.append(EvalRecord(seg.id, seg.direction, hallucination="No", coverage_score=cov_intact))
        records.append(
            EvalRecord(seg.id + "-d", seg.direction, hallucination="Full", coverage_score=cov_degraded)
        )
    win_rate = wins / len(segments)
    mean_gap = sum(gaps) / len(gaps)
    assert win_rate >= 0.95
    assert mean_gap >= 20.0
    histogram = coverage_histogram(records, "hallucination", bin_width=10)
    assert histogram["No"][-1] == 1.0          # intact translations all sit at 100
    assert sum(histogram["Full"][:8]) == 1.0   # degraded mass entirely below 80
    report(6, f"intact wins {win_rate:.1%} of pairs, mean coverage gap {mean_gap:.1f} >= 20")


def test_criterion_7_hard_split():
    scores = make_quality_scores([f"s{i:05d}" for i in range(3912)], seed=77)
    records = [
        EvalRecord(sid, DE_EN, quality_score=q) for sid, q in sorted(scores.items())
    ]
    total = len(records)
    for n in (0, 100, total, total + 5):
        split = hard_split(records, n)
        all_ids = {r.segment_id for r in records}
        assert split.hard_ids | split.easy_ids == all_ids
        assert split.hard_ids & split.easy_ids == set()
        assert len(split.hard_ids) == min(n, total)
        if split.hard_ids and split.easy_ids:
            hard_mean = sum(scores[i] for i in split.hard_ids) / len(split.hard_ids)
            easy_mean = sum(scores[i] for i in split.easy_ids) / len(split.easy_ids)
            assert hard_mean <= easy_mean
            assert max(scores[i] for i in split.hard_ids) <= min(
                scores[i] for i in split.easy_ids
            )
    report(7, "partition invariants hold for n in {0, 100, 3912, 3917}")


def test_criterion_8_bootstrap():
    scores = [float(i % 17) + 0.25 for i in range(500)]
    identical = paired_bootstrap(scores, scores, iterations=100_000, seed=42)
    assert identical.p_value == 1.0

    start = time.perf_counter()
    shifted = paired_bootstrap(
        scores, [s + 1.0 for s in scores], iterations=100_000, seed=42
    )
    elapsed = time.perf_counter() - start
    assert shifted.p_value <= 2 / 100_000
    assert elapsed < 5.0

    rng = random.Random(88)
    a = [rng.uniform(0, 100) for _ in range(100)]
    b = [x + rng.uniform(-2, 2) for x in a]
    assert paired_bootstrap(a, b, iterations=20_000, seed=5) == paired_bootstrap(
        a, b, iterations=20_000, seed=5
    )
    report(8, f"p=1 on identical, p<=2e-5 on +1 shift, bit-identical reruns ({elapsed:.2f}s for n=500)")


def test_criterion_9_evaluator_analytics(tmp_path):
    records = [
        EvalRecord("s1", DE_EN, hallucination="No", coverage_score=90.0),
        EvalRecord("s2", DE_EN, hallucination="No", coverage_score=80.0),
        EvalRecord("s3", DE_EN, hallucination="Small", coverage_score=60.0),
        EvalRecord("s4", DE_EN, hallucination="Partial", coverage_score=40.0),
        EvalRecord("s5", DE_EN, hallucination="Full", coverage_score=5.0),
        EvalRecord("s6", DE_EN, hallucination="Full", coverage_score=15.0),
    ]
    stats = bucket_stats(records, "hallucination")
    assert stats["No"].count == 2 and stats["No"].mean_coverage == pytest.approx(85.0)
    assert stats["Small"].count == 1 and stats["Small"].mean_coverage == pytest.approx(60.0)
    assert stats["Partial"].count == 1 and stats["Partial"].mean_coverage == pytest.approx(40.0)
    assert stats["Full"].count == 2 and stats["Full"].mean_coverage == pytest.approx(10.0)

    correlation = severity_correlation(records, "hallucination")
    assert correlation > 0.0  # direction matches the published positive correlations

    path = tmp_path / "buckets.tsv"
    write_bucket_stats_tsv(path, stats, "hallucination")
    columns, rows = read_tsv(path)
    assert columns == ["axis", "severity", "count", "mean_coverage"]
    assert len(rows) == 4
    report(9, f"hand-computed bucket means reproduced, Pearson {correlation:.3f} > 0, TSV schema ok")


def test_criterion_10_end_to_end_determinism(tmp_path):
    start = time.perf_counter()
    fixtures = build_fixtures(tmp_path / "fixtures")
    (tmp_path / "fixtures").mkdir(exist_ok=True)
    out1 = tmp_path / "run1"
    out2 = tmp_path / "run2"
    run_pipeline(out1, fixtures)
    run_pipeline(out2, fixtures)
    differing = [
        name
        for name in EXPECTED_ARTIFACTS
        if (out1 / name).read_bytes() != (out2 / name).read_bytes()
    ]
    assert differing == []
    for n in (100, 10, 0):
        assert (out1 / f"compare_n{n}.tsv").exists()
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    report(
        10,
        f"{len(EXPECTED_ARTIFACTS)} artifacts byte-identical across runs, N in {{100,10,0}} ({elapsed:.1f}s)",
    )
