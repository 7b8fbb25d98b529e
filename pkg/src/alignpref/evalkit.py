"""Evaluation harness for hallucination/omission analyses.

Covers hard/easy instance splitting by external quality score, prompt-based
coverage judging through a chat client, severity-bucket statistics,
correlation and distribution analyses, and chosen/rejected provenance
proportions. All reports emit as TSV for downstream plotting.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .corpus import LANGUAGE_NAMES, LangDirection, SourceSegment, TranslationCandidate
from .errors import AlignprefError
from .io_utils import read_jsonl, write_jsonl, write_tsv
from .metrics import BootstrapResult, paired_bootstrap, pearson
from .preference import PreferenceTriplet
from .providers import ChatClient, default_coverage_template

SEVERITIES = ("No", "Small", "Partial", "Full")

# Higher ordinal = less hallucination/omission, so a positive correlation
# with coverage means higher coverage tracks cleaner translations.
SEVERITY_ORDINAL = {"Full": 0, "Partial": 1, "Small": 2, "No": 3}

MERGED_LABEL = "Partial+Small"


class MissingQualityScore(AlignprefError):
    def __init__(self, segment_id: str) -> None:
        super().__init__(f"record {segment_id} has no quality score")
        self.segment_id = segment_id


class ParseError(AlignprefError):
    pass


class IdMismatch(AlignprefError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    segment_id: str
    direction: LangDirection
    hallucination: str | None = None
    omission: str | None = None
    coverage_score: float | None = None
    quality_score: float | None = None

    def __post_init__(self) -> None:
        for label in (self.hallucination, self.omission):
            if label is not None and label not in SEVERITIES:
                raise ValueError(f"unknown severity label: {label!r}")
        if self.coverage_score is not None and not 0.0 <= self.coverage_score <= 100.0:
            raise ValueError(f"coverage_score {self.coverage_score} out of [0, 100]")

    def severity(self, axis: str) -> str | None:
        if axis == "hallucination":
            return self.hallucination
        if axis == "omission":
            return self.omission
        raise ValueError(f"unknown severity axis: {axis!r}")


def load_eval_records(path: str | Path) -> list[EvalRecord]:
    records = []
    for row in read_jsonl(path):
        records.append(
            EvalRecord(
                segment_id=str(row["segment_id"]),
                direction=LangDirection(str(row["src"]), str(row["tgt"])),
                hallucination=row.get("hallucination"),
                omission=row.get("omission"),
                coverage_score=row.get("coverage"),
                quality_score=row.get("quality"),
            )
        )
    return records


def save_eval_records(
    path: str | Path,
    records: Iterable[EvalRecord],
    header: dict[str, Any] | None = None,
) -> int:
    rows = (
        {
            "segment_id": r.segment_id,
            "src": r.direction.src,
            "tgt": r.direction.tgt,
            "hallucination": r.hallucination,
            "omission": r.omission,
            "coverage": r.coverage_score,
            "quality": r.quality_score,
        }
        for r in records
    )
    return write_jsonl(path, rows, header=header)


# ---------------------------------------------------------------------------
# Hard/easy splitting


@dataclass
class HardSplit:
    direction: str | None
    n: int
    hard_ids: set[str]
    easy_ids: set[str]


def hard_split(records: Sequence[EvalRecord], n: int) -> HardSplit:
    """Mark the n lowest-quality records as hard, the rest easy.

    Boundary ties are broken by segment id so the split is deterministic.
    """
    for record in records:
        if record.quality_score is None:
            raise MissingQualityScore(record.segment_id)
    ranked = sorted(records, key=lambda r: (r.quality_score, r.segment_id))
    cut = min(n, len(ranked))
    directions = {str(r.direction) for r in records}
    return HardSplit(
        direction=directions.pop() if len(directions) == 1 else None,
        n=n,
        hard_ids={r.segment_id for r in ranked[:cut]},
        easy_ids={r.segment_id for r in ranked[cut:]},
    )


# ---------------------------------------------------------------------------
# Prompt-based coverage judging

_INTEGER_RE = re.compile(r"-?\d+")


def parse_coverage_response(text: str) -> float | None:
    """First integer in [0, 100] found in the response, or None."""
    for match in _INTEGER_RE.finditer(text):
        value = int(match.group())
        if 0 <= value <= 100:
            return float(value)
    return None


def coverage_eval(
    segment: SourceSegment,
    candidate: TranslationCandidate,
    client: ChatClient,
    template: str | None = None,
    re_asks: int = 2,
) -> float:
    """Ask the chat evaluator for a 0-100 coverage score of the candidate.

    On an unparseable response the prompt is re-sent up to `re_asks` times
    before giving up with ParseError.
    """
    template = template or default_coverage_template()
    prompt = template.format(
        src_lang_name=LANGUAGE_NAMES[segment.direction.src],
        tgt_lang_name=LANGUAGE_NAMES[segment.direction.tgt],
        source=segment.source,
        translation=candidate.text,
    )
    for _ in range(1 + re_asks):
        response = client.chat_complete(prompt)
        value = parse_coverage_response(response)
        if value is not None:
            return value
    raise ParseError(
        f"no integer in [0, 100] after {1 + re_asks} attempts for segment {segment.id}"
    )


# ---------------------------------------------------------------------------
# Bucket, correlation, and distribution analyses


@dataclass(frozen=True)
class BucketStat:
    count: int
    mean_coverage: float


def _bucket_label(severity: str, merge_small_partial: bool) -> str:
    if merge_small_partial and severity in ("Small", "Partial"):
        return MERGED_LABEL
    return severity


def bucket_stats(
    records: Sequence[EvalRecord],
    axis: str,
    merge_small_partial: bool = False,
) -> dict[str, BucketStat]:
    """Count and mean coverage per severity bucket; empty buckets are omitted."""
    sums: dict[str, list[float]] = {}
    for record in records:
        severity = record.severity(axis)
        if severity is None or record.coverage_score is None:
            continue
        sums.setdefault(_bucket_label(severity, merge_small_partial), []).append(
            record.coverage_score
        )
    return {
        label: BucketStat(count=len(values), mean_coverage=sum(values) / len(values))
        for label, values in sums.items()
    }


def severity_correlation(records: Sequence[EvalRecord], axis: str) -> float:
    """Pearson correlation between ordinal severity (Full=0 .. No=3) and coverage."""
    ordinals: list[float] = []
    coverages: list[float] = []
    for record in records:
        severity = record.severity(axis)
        if severity is None or record.coverage_score is None:
            continue
        ordinals.append(float(SEVERITY_ORDINAL[severity]))
        coverages.append(record.coverage_score)
    return pearson(ordinals, coverages)


def coverage_histogram(
    records: Sequence[EvalRecord],
    axis: str,
    bin_width: int = 10,
    merge_small_partial: bool = False,
) -> dict[str, list[float]]:
    """Normalized coverage-frequency histogram per severity class.

    Bins are [k*w, (k+1)*w) with the last bin closed at 100; each class's
    frequencies sum to 1.
    """
    if bin_width <= 0 or 100 % bin_width != 0:
        raise ValueError(f"bin_width must divide 100, got {bin_width}")
    n_bins = 100 // bin_width
    counts: dict[str, list[int]] = {}
    for record in records:
        severity = record.severity(axis)
        if severity is None or record.coverage_score is None:
            continue
        label = _bucket_label(severity, merge_small_partial)
        bins = counts.setdefault(label, [0] * n_bins)
        bins[min(int(record.coverage_score // bin_width), n_bins - 1)] += 1
    return {
        label: [c / sum(bins) for c in bins] for label, bins in counts.items()
    }


def provenance_stats(
    triplets: Sequence[PreferenceTriplet],
    directions: Mapping[str, str] | None = None,
) -> dict[str, dict[str, dict[str, float]]]:
    """Share of chosen/rejected slots won by each provider.

    Returns {scope: {provider: {"chosen_share", "rejected_share"}}} with scope
    "all" plus one scope per direction when a segment_id -> direction mapping
    is supplied. Shares sum to 1 per role within each scope.
    """

    def shares(group: Sequence[PreferenceTriplet]) -> dict[str, dict[str, float]]:
        counts: dict[str, dict[str, int]] = {}
        for triplet in group:
            for provider, role in (
                (triplet.chosen.provider, "chosen"),
                (triplet.rejected.provider, "rejected"),
            ):
                slot = counts.setdefault(provider, {"chosen": 0, "rejected": 0})
                slot[role] += 1
        total = len(group)
        return {
            provider: {
                "chosen_share": slot["chosen"] / total,
                "rejected_share": slot["rejected"] / total,
            }
            for provider, slot in sorted(counts.items())
        }

    if not triplets:
        return {}
    report = {"all": shares(triplets)}
    if directions:
        groups: dict[str, list[PreferenceTriplet]] = {}
        for triplet in triplets:
            direction = directions.get(triplet.segment_id)
            if direction is not None:
                groups.setdefault(direction, []).append(triplet)
        for direction in sorted(groups):
            report[direction] = shares(groups[direction])
    return report


# ---------------------------------------------------------------------------
# Model comparison on hard/easy subsets


@dataclass(frozen=True)
class SubsetComparison:
    subset: str
    count: int
    mean_quality_a: float | None
    mean_quality_b: float | None
    mean_coverage_a: float | None
    mean_coverage_b: float | None
    quality_diff: float | None
    p_value: float | None


def _mean(values: Sequence[float]) -> float | None:
    return sum(values) / len(values) if values else None


def compare_models(
    records_a: Sequence[EvalRecord],
    records_b: Sequence[EvalRecord],
    split: HardSplit,
    iterations: int = 100_000,
    seed: int = 42,
) -> list[SubsetComparison]:
    """Compare two systems on hard/easy/all subsets.

    Reports mean quality, mean coverage, and a paired-bootstrap p-value on the
    example-wise quality scores (subsets with fewer than 2 records get no
    p-value). Both record sets must cover the same segment ids.
    """
    a_by_id = {r.segment_id: r for r in records_a}
    b_by_id = {r.segment_id: r for r in records_b}
    if set(a_by_id) != set(b_by_id):
        raise IdMismatch(
            f"record sets differ: {sorted(set(a_by_id) ^ set(b_by_id))[:5]} ..."
        )

    subsets = (
        ("hard", split.hard_ids),
        ("easy", split.easy_ids),
        ("all", set(a_by_id)),
    )
    results = []
    for name, ids in subsets:
        ordered = sorted(ids)
        # quality stats are paired: only ids scored on both sides count
        scored = [
            i
            for i in ordered
            if a_by_id[i].quality_score is not None and b_by_id[i].quality_score is not None
        ]
        qa = [a_by_id[i].quality_score for i in scored]
        qb = [b_by_id[i].quality_score for i in scored]
        ca = [a_by_id[i].coverage_score for i in ordered if a_by_id[i].coverage_score is not None]
        cb = [b_by_id[i].coverage_score for i in ordered if b_by_id[i].coverage_score is not None]
        boot: BootstrapResult | None = None
        if len(qa) >= 2:
            boot = paired_bootstrap(qa, qb, iterations=iterations, seed=seed)
        mean_a, mean_b = _mean(qa), _mean(qb)
        results.append(
            SubsetComparison(
                subset=name,
                count=len(ordered),
                mean_quality_a=mean_a,
                mean_quality_b=mean_b,
                mean_coverage_a=_mean(ca),
                mean_coverage_b=_mean(cb),
                quality_diff=(mean_b - mean_a) if mean_a is not None and mean_b is not None else None,
                p_value=boot.p_value if boot is not None else None,
            )
        )
    return results


# ---------------------------------------------------------------------------
# TSV emission


def _cell(value: float | None) -> Any:
    return "NA" if value is None else value


def write_bucket_stats_tsv(
    path: str | Path,
    stats: Mapping[str, BucketStat],
    axis: str,
    header: dict[str, Any] | None = None,
) -> None:
    order = {label: i for i, label in enumerate(("No", "Small", MERGED_LABEL, "Partial", "Full"))}
    rows = [
        (axis, label, stat.count, stat.mean_coverage)
        for label, stat in sorted(stats.items(), key=lambda kv: order.get(kv[0], 99))
    ]
    write_tsv(path, ["axis", "severity", "count", "mean_coverage"], rows, header=header)


def write_histogram_tsv(
    path: str | Path,
    histogram: Mapping[str, Sequence[float]],
    axis: str,
    bin_width: int,
    header: dict[str, Any] | None = None,
) -> None:
    rows = []
    for label in sorted(histogram):
        for k, frequency in enumerate(histogram[label]):
            rows.append((axis, label, k * bin_width, (k + 1) * bin_width, frequency))
    write_tsv(
        path,
        ["axis", "severity", "bin_start", "bin_end", "frequency"],
        rows,
        header=header,
    )


def write_provenance_tsv(
    path: str | Path,
    report: Mapping[str, Mapping[str, Mapping[str, float]]],
    header: dict[str, Any] | None = None,
) -> None:
    rows = []
    for scope in sorted(report, key=lambda s: (s != "all", s)):
        for provider, slot in report[scope].items():
            rows.append((scope, provider, slot["chosen_share"], slot["rejected_share"]))
    write_tsv(path, ["scope", "provider", "chosen_share", "rejected_share"], rows, header=header)


def write_comparison_tsv(
    path: str | Path,
    comparisons: Sequence[SubsetComparison],
    header: dict[str, Any] | None = None,
) -> None:
    rows = [
        (
            c.subset,
            c.count,
            _cell(c.mean_quality_a),
            _cell(c.mean_quality_b),
            _cell(c.quality_diff),
            _cell(c.mean_coverage_a),
            _cell(c.mean_coverage_b),
            _cell(c.p_value),
        )
        for c in comparisons
    ]
    write_tsv(
        path,
        [
            "subset",
            "count",
            "mean_quality_a",
            "mean_quality_b",
            "quality_diff",
            "mean_coverage_a",
            "mean_coverage_b",
            "p_value",
        ],
        rows,
        header=header,
    )
