"""Chosen/rejected selection and filtering of preference triplets.

Per segment, the candidate with the highest coverage becomes the chosen
translation and the lowest becomes the rejected one. Three conjunctive
filters then drop noisy pairs: a minimum coverage gap (default 5.0), a
near-duplicate cap on embedding cosine (default 0.9), and a copy detector
comparing the chosen text against the source by BLEU (default 20.0).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .aligner import AlignerBackend, coverage
from .corpus import SourceSegment, TranslationCandidate
from .errors import AlignprefError
from .io_utils import read_jsonl, write_jsonl
from .metrics import cosine, sentence_bleu
from .providers import Embedder

FILTER_ORDER = ("coverage_delta", "similarity", "copy_bleu")


class InsufficientCandidates(AlignprefError):
    pass


class MissingCoverage(AlignprefError):
    pass


@dataclass(frozen=True)
class FilterDecision:
    filter_id: str
    passed: bool
    measured: float
    threshold: float


@dataclass
class PreferenceTriplet:
    segment_id: str
    source: str
    chosen: TranslationCandidate
    rejected: TranslationCandidate
    filters: list[FilterDecision] = field(default_factory=list)

    @property
    def kept(self) -> bool:
        return all(decision.passed for decision in self.filters)


@dataclass
class FilterConfig:
    coverage_delta: float = 5.0
    similarity: float = 0.9
    copy_bleu: float = 20.0


@dataclass
class BuildStats:
    input_segments: int = 0
    scored: int = 0
    kept: int = 0
    dropped_by: dict[str, int] = field(
        default_factory=lambda: {name: 0 for name in FILTER_ORDER}
    )
    provenance: dict[str, dict[str, int]] = field(default_factory=dict)
    under_populated: int = 0
    errors: list[tuple[str, str]] = field(default_factory=list)

    def note_provenance(self, chosen_provider: str, rejected_provider: str) -> None:
        for provider, role in ((chosen_provider, "chosen_count"), (rejected_provider, "rejected_count")):
            slot = self.provenance.setdefault(provider, {"chosen_count": 0, "rejected_count": 0})
            slot[role] += 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_segments": self.input_segments,
            "scored": self.scored,
            "kept": self.kept,
            "dropped_by": dict(self.dropped_by),
            "provenance": {k: dict(v) for k, v in sorted(self.provenance.items())},
            "under_populated": self.under_populated,
            "errors": [list(pair) for pair in self.errors],
        }


def select_preference(
    candidates: Sequence[TranslationCandidate],
    provider_priorities: Mapping[str, int],
) -> tuple[TranslationCandidate, TranslationCandidate]:
    """Pick (chosen, rejected) as the coverage argmax/argmin.

    Ties are broken by provider priority: the best-ranked provider wins the
    argmax, the worst-ranked wins the argmin, so selection is deterministic.
    """
    if len(candidates) < 2:
        raise InsufficientCandidates(f"need at least 2 candidates, got {len(candidates)}")
    for cand in candidates:
        if cand.coverage is None:
            raise MissingCoverage(f"candidate {cand.segment_id}/{cand.provider} has no coverage")

    def rank(cand: TranslationCandidate) -> int:
        if cand.provider not in provider_priorities:
            raise AlignprefError(f"no priority configured for provider {cand.provider!r}")
        return provider_priorities[cand.provider]

    chosen = min(candidates, key=lambda c: (-c.coverage, rank(c)))
    rejected = min(candidates, key=lambda c: (c.coverage, -rank(c)))
    return chosen, rejected


def filter_coverage_delta(
    chosen: TranslationCandidate,
    rejected: TranslationCandidate,
    threshold: float = 5.0,
) -> FilterDecision:
    """Pass when the chosen/rejected coverage gap is at least the threshold."""
    if chosen.coverage is None or rejected.coverage is None:
        raise MissingCoverage("both candidates need coverage scores")
    delta = chosen.coverage - rejected.coverage
    return FilterDecision("coverage_delta", delta >= threshold, delta, threshold)


def filter_similarity(
    chosen: TranslationCandidate,
    rejected: TranslationCandidate,
    embedder: Embedder,
    threshold: float = 0.9,
) -> FilterDecision:
    """Pass when the pair is not near-duplicate: cosine <= threshold."""
    similarity = cosine(embedder.embed(chosen.text), embedder.embed(rejected.text))
    return FilterDecision("similarity", similarity <= threshold, similarity, threshold)


def filter_copy_bleu(
    source: str,
    chosen: TranslationCandidate,
    threshold: float = 20.0,
    lang: str = "",
) -> FilterDecision:
    """Pass when the chosen text does not merely copy the source (BLEU <= threshold)."""
    bleu = sentence_bleu(chosen.text, source, lang).score
    return FilterDecision("copy_bleu", bleu <= threshold, bleu, threshold)


def run_filters(
    segment: SourceSegment,
    chosen: TranslationCandidate,
    rejected: TranslationCandidate,
    embedder: Embedder,
    config: FilterConfig,
) -> list[FilterDecision]:
    """All three decisions, in the fixed (delta, similarity, copy) order."""
    return [
        filter_coverage_delta(chosen, rejected, config.coverage_delta),
        filter_similarity(chosen, rejected, embedder, config.similarity),
        filter_copy_bleu(segment.source, chosen, config.copy_bleu, segment.direction.src),
    ]


def build_dataset(
    segments: Sequence[SourceSegment],
    candidates: Sequence[TranslationCandidate],
    provider_priorities: Mapping[str, int],
    embedder: Embedder,
    filter_config: FilterConfig | None = None,
    backend: AlignerBackend | None = None,
    threshold: float = 0.5,
) -> tuple[list[PreferenceTriplet], BuildStats]:
    """Score, select, and filter one triplet per usable segment.

    Candidates may arrive pre-scored; otherwise `backend` computes coverage
    here. Per-segment failures are recorded in the stats and never abort the
    batch. Output is ordered by segment id for deterministic emission.
    """
    config = filter_config or FilterConfig()
    stats = BuildStats(input_segments=len(segments))
    by_segment: dict[str, list[TranslationCandidate]] = {}
    for cand in candidates:
        by_segment.setdefault(cand.segment_id, []).append(cand)

    triplets: list[PreferenceTriplet] = []
    for segment in sorted(segments, key=lambda s: s.id):
        group = by_segment.get(segment.id, [])
        if len(group) < 2:
            stats.under_populated += 1
            continue
        try:
            scored: list[TranslationCandidate] = []
            for cand in group:
                if cand.coverage is None:
                    if backend is None:
                        raise MissingCoverage(
                            f"candidate {cand.segment_id}/{cand.provider} has no coverage"
                        )
                    report = coverage(segment, cand, backend, threshold, keep_links=False)
                    cand = TranslationCandidate(
                        cand.segment_id, cand.provider, cand.text, report.coverage
                    )
                scored.append(cand)
            stats.scored += 1
            chosen, rejected = select_preference(scored, provider_priorities)
            decisions = run_filters(segment, chosen, rejected, embedder, config)
        except AlignprefError as exc:
            stats.errors.append((segment.id, str(exc)))
            continue
        triplet = PreferenceTriplet(segment.id, segment.source, chosen, rejected, decisions)
        if triplet.kept:
            stats.kept += 1
            stats.note_provenance(chosen.provider, rejected.provider)
            triplets.append(triplet)
        else:
            first_fail = next(d for d in decisions if not d.passed)
            stats.dropped_by[first_fail.filter_id] += 1
    return triplets, stats


def split_triplets(
    triplets: Sequence[PreferenceTriplet],
    dev_ratio: float,
    seed: int,
) -> tuple[list[PreferenceTriplet], list[PreferenceTriplet]]:
    """Seeded train/dev split; ordering inside each part stays by segment id."""
    ids = sorted(t.segment_id for t in triplets)
    rng = random.Random(seed)
    rng.shuffle(ids)
    dev_count = int(round(len(ids) * dev_ratio))
    dev_ids = set(ids[:dev_count])
    train = [t for t in triplets if t.segment_id not in dev_ids]
    dev = [t for t in triplets if t.segment_id in dev_ids]
    return train, dev


def _candidate_to_dict(cand: TranslationCandidate) -> dict[str, Any]:
    return {"provider": cand.provider, "text": cand.text, "coverage": cand.coverage}


def triplet_to_record(triplet: PreferenceTriplet) -> dict[str, Any]:
    return {
        "segment_id": triplet.segment_id,
        "source": triplet.source,
        "chosen": _candidate_to_dict(triplet.chosen),
        "rejected": _candidate_to_dict(triplet.rejected),
        "filters": [
            {
                "id": d.filter_id,
                "passed": d.passed,
                "measured": d.measured,
                "threshold": d.threshold,
            }
            for d in triplet.filters
        ],
    }


def save_triplets(
    path: str | Path,
    triplets: Iterable[PreferenceTriplet],
    header: dict[str, Any] | None = None,
) -> int:
    return write_jsonl(path, (triplet_to_record(t) for t in triplets), header=header)


def load_triplets(path: str | Path) -> list[PreferenceTriplet]:
    triplets = []
    for record in read_jsonl(path):
        chosen = TranslationCandidate(
            record["segment_id"],
            record["chosen"]["provider"],
            record["chosen"]["text"],
            record["chosen"].get("coverage"),
        )
        rejected = TranslationCandidate(
            record["segment_id"],
            record["rejected"]["provider"],
            record["rejected"]["text"],
            record["rejected"].get("coverage"),
        )
        decisions = [
            FilterDecision(d["id"], bool(d["passed"]), float(d["measured"]), float(d["threshold"]))
            for d in record.get("filters", [])
        ]
        triplets.append(
            PreferenceTriplet(record["segment_id"], record["source"], chosen, rejected, decisions)
        )
    return triplets
