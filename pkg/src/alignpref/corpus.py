"""Parallel-corpus ingestion and the canonical data model shared by all stages.

Corpus files are JSONL, one record per line:
    {"id": str, "src": str, "tgt": str, "source": str, "reference": str|null}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import AlignprefError
from .io_utils import HEADER_KEY, write_jsonl

DEFAULT_LANGUAGES = frozenset({"cs", "de", "is", "zh", "ru", "en"})

LANGUAGE_NAMES = {
    "cs": "Czech",
    "de": "German",
    "is": "Icelandic",
    "zh": "Chinese",
    "ru": "Russian",
    "en": "English",
}


class MalformedRecord(AlignprefError):
    def __init__(self, line_number: int, reason: str) -> None:
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


class DuplicateId(AlignprefError):
    def __init__(self, segment_id: str) -> None:
        super().__init__(f"duplicate segment id: {segment_id}")
        self.segment_id = segment_id


class UnsupportedLanguage(AlignprefError):
    def __init__(self, code: str) -> None:
        super().__init__(f"unsupported language code: {code!r}")
        self.code = code


@dataclass(frozen=True)
class LangDirection:
    """A translation direction such as zh->en."""

    src: str
    tgt: str

    def __post_init__(self) -> None:
        for code in (self.src, self.tgt):
            if code not in DEFAULT_LANGUAGES or not code.islower() or len(code) != 2:
                raise UnsupportedLanguage(code)
        if self.src == self.tgt:
            raise UnsupportedLanguage(self.tgt)

    def __str__(self) -> str:
        return f"{self.src}-{self.tgt}"


@dataclass(frozen=True)
class SourceSegment:
    """One source sentence to be translated, with an optional human reference."""

    id: str
    direction: LangDirection
    source: str
    reference: str | None = None

    def __post_init__(self) -> None:
        if not self.source.strip():
            raise ValueError(f"segment {self.id}: source is empty")


@dataclass
class TranslationCandidate:
    """A provider-attributed translation of a segment."""

    segment_id: str
    provider: str
    text: str
    coverage: float | None = None

    def __post_init__(self) -> None:
        if self.coverage is not None and not 0.0 <= self.coverage <= 100.0:
            raise ValueError(
                f"coverage {self.coverage} out of [0, 100] for {self.segment_id}/{self.provider}"
            )


@dataclass
class ValidationReport:
    """Candidate-set health report: segments with K<2 candidates and orphans."""

    under_populated: list[str] = field(default_factory=list)
    orphans: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.under_populated and not self.orphans


def load_corpus(path: str | Path, direction: LangDirection) -> list[SourceSegment]:
    """Load segments from a corpus JSONL file, in file order.

    Records must match `direction`; ids must be unique; sources are
    whitespace-trimmed and must be non-empty afterwards.
    """
    segments: list[SourceSegment] = []
    seen: set[str] = set()
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_number, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise MalformedRecord(line_number, "record is not an object")
            if HEADER_KEY in record:
                continue
            for key in ("id", "src", "tgt", "source"):
                if key not in record:
                    raise MalformedRecord(line_number, f"missing field {key!r}")
            if record["src"] != direction.src or record["tgt"] != direction.tgt:
                raise MalformedRecord(
                    line_number,
                    f"direction {record['src']}-{record['tgt']} does not match {direction}",
                )
            segment_id = str(record["id"])
            if segment_id in seen:
                raise DuplicateId(segment_id)
            seen.add(segment_id)
            source = str(record["source"]).strip()
            if not source:
                raise MalformedRecord(line_number, "source is empty after trimming")
            reference = record.get("reference")
            segments.append(
                SourceSegment(
                    id=segment_id,
                    direction=direction,
                    source=source,
                    reference=str(reference) if reference is not None else None,
                )
            )
    return segments


def save_corpus(
    path: str | Path,
    segments: Iterable[SourceSegment],
    header: dict[str, Any] | None = None,
) -> int:
    records = (
        {
            "id": seg.id,
            "src": seg.direction.src,
            "tgt": seg.direction.tgt,
            "source": seg.source,
            "reference": seg.reference,
        }
        for seg in segments
    )
    return write_jsonl(path, records, header=header)


def validate_candidates(
    segments: Iterable[SourceSegment],
    candidates: Iterable[TranslationCandidate],
) -> ValidationReport:
    """Report segments with fewer than two candidates and orphan candidates.

    Report-only: selection needs K >= 2 per segment, so under-populated
    segments will be skipped downstream rather than failing the run.
    """
    known = {seg.id for seg in segments}
    per_segment: dict[str, int] = {seg_id: 0 for seg_id in known}
    report = ValidationReport()
    for cand in candidates:
        if cand.segment_id not in known:
            report.orphans.append((cand.segment_id, cand.provider))
        else:
            per_segment[cand.segment_id] += 1
    report.under_populated = sorted(
        seg_id for seg_id, count in per_segment.items() if count < 2
    )
    report.orphans.sort()
    return report


def load_candidate_rows(path: str | Path) -> list[TranslationCandidate]:
    """Load candidates from JSONL rows {"segment_id", "provider", "text", "coverage"?}."""
    from .io_utils import read_jsonl

    out: list[TranslationCandidate] = []
    seen: set[tuple[str, str]] = set()
    for record in read_jsonl(path):
        key = (str(record["segment_id"]), str(record["provider"]))
        if key in seen:
            raise DuplicateId(f"{key[0]}/{key[1]}")
        seen.add(key)
        out.append(
            TranslationCandidate(
                segment_id=key[0],
                provider=key[1],
                text=str(record["text"]),
                coverage=record.get("coverage"),
            )
        )
    return out


def save_candidate_rows(
    path: str | Path,
    candidates: Iterable[TranslationCandidate],
    header: dict[str, Any] | None = None,
) -> int:
    records = []
    for cand in candidates:
        record: dict[str, Any] = {
            "segment_id": cand.segment_id,
            "provider": cand.provider,
            "text": cand.text,
        }
        if cand.coverage is not None:
            record["coverage"] = cand.coverage
        records.append(record)
    return write_jsonl(path, records, header=header)
