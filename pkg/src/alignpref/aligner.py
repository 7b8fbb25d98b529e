"""Source-coverage scoring from word alignment.

A translation's coverage is the percentage of source tokens linked to at
least one target token. Links can come from a remote alignment service or
from the built-in deterministic lexical aligner, which matches tokens by
exact case-folded identity, by a user lexicon, or by co-occurrence
probabilities fitted with a small IBM-Model-1-style EM on the corpus.
"""

from __future__ import annotations

import unicodedata
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .corpus import SourceSegment, TranslationCandidate
from .errors import EmptyText, RemoteError

# Han ideographs plus Japanese kana: scripts written without spaces, split
# per codepoint so coverage has a token denominator.
_CJK_RANGES = (
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xF900, 0xFAFF),
    (0x3040, 0x309F),
    (0x30A0, 0x30FF),
)


def _is_cjk(ch: str) -> bool:
    code = ord(ch)
    return any(lo <= code <= hi for lo, hi in _CJK_RANGES)


def tokenize(text: str, lang: str = "") -> list[str]:
    """Deterministic tokenization: whitespace split with punctuation detached,
    per-codepoint for Han/Kana. The language code is advisory; behaviour is
    driven by codepoint class, so mixed-script text tokenizes consistently."""
    if not text.strip():
        raise EmptyText("cannot tokenize empty text")
    tokens: list[str] = []
    current: list[str] = []

    def flush() -> None:
        if current:
            tokens.append("".join(current))
            current.clear()

    for ch in text:
        if ch.isspace():
            flush()
        elif _is_cjk(ch):
            flush()
            tokens.append(ch)
        elif unicodedata.category(ch).startswith("P"):
            flush()
            tokens.append(ch)
        else:
            current.append(ch)
    flush()
    return tokens


@dataclass(frozen=True)
class AlignmentLink:
    """One source-token/target-token link with confidence in [0, 1]."""

    src_index: int
    tgt_index: int
    confidence: float


@dataclass
class CoverageReport:
    segment_id: str
    provider: str
    covered_src_tokens: int
    total_src_tokens: int
    coverage: float
    links: list[AlignmentLink] = field(default_factory=list)


def load_lexicon(path: str | Path) -> dict[str, set[str]]:
    """Load a TSV lexicon (src_token<TAB>tgt_token per line)."""
    lexicon: dict[str, set[str]] = defaultdict(set)
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            src, _, tgt = line.partition("\t")
            if not tgt:
                raise ValueError(f"lexicon line without tab: {line!r}")
            lexicon[src].add(tgt)
    return dict(lexicon)


def fit_ibm1(
    pairs: Iterable[tuple[Sequence[str], Sequence[str]]],
    iterations: int = 5,
) -> dict[str, dict[str, float]]:
    """Fit IBM-Model-1 translation probabilities t(tgt | src) by EM.

    Uniform initialisation and fixed iteration order make the result
    deterministic for a given corpus.
    """
    pair_list = [(list(src), list(tgt)) for src, tgt in pairs]
    src_vocab_of: dict[str, set[str]] = defaultdict(set)
    for src, tgt in pair_list:
        for s in src:
            src_vocab_of[s].update(tgt)

    table: dict[str, dict[str, float]] = {
        s: {t: 1.0 / len(tgts) for t in sorted(tgts)}
        for s, tgts in src_vocab_of.items()
    }
    for _ in range(iterations):
        counts: dict[str, dict[str, float]] = defaultdict(lambda: defaultdict(float))
        totals: dict[str, float] = defaultdict(float)
        for src, tgt in pair_list:
            for t in tgt:
                denom = sum(table[s][t] for s in src)
                if denom <= 0.0:
                    continue
                for s in src:
                    delta = table[s][t] / denom
                    counts[s][t] += delta
                    totals[s] += delta
        for s, row in table.items():
            total = totals[s]
            if total <= 0.0:
                continue
            for t in row:
                row[t] = counts[s][t] / total
    return table


class AlignerBackend(Protocol):
    def align(
        self, src_tokens: Sequence[str], tgt_tokens: Sequence[str], threshold: float
    ) -> list[AlignmentLink]: ...


class LexicalAligner:
    """Built-in deterministic aligner.

    A source/target token pair scores 1.0 on exact case-folded match or a
    lexicon hit, otherwise its fitted co-occurrence probability (when a
    co-occurrence model has been fitted). A link is emitted when the pair
    clears the threshold in both directions (intersection, the default) or
    in either direction (union); its confidence is the min (max for union)
    of the two directional scores.
    """

    def __init__(
        self,
        lexicon: dict[str, set[str]] | None = None,
        mode: str = "intersection",
    ) -> None:
        if mode not in ("intersection", "union"):
            raise ValueError(f"unknown combine mode: {mode!r}")
        self.mode = mode
        self._lexicon = {
            src.casefold(): {tgt.casefold() for tgt in tgts}
            for src, tgts in (lexicon or {}).items()
        }
        self._fwd: dict[str, dict[str, float]] = {}
        self._bwd: dict[str, dict[str, float]] = {}

    def fit_cooccurrence(
        self,
        pairs: Iterable[tuple[Sequence[str], Sequence[str]]],
        iterations: int = 5,
    ) -> None:
        """Fit forward and backward co-occurrence tables on (src, tgt) token pairs."""
        pair_list = [
            ([t.casefold() for t in src], [t.casefold() for t in tgt])
            for src, tgt in pairs
        ]
        self._fwd = fit_ibm1(pair_list, iterations=iterations)
        self._bwd = fit_ibm1([(tgt, src) for src, tgt in pair_list], iterations=iterations)

    def _scores(self, src_token: str, tgt_token: str) -> tuple[float, float]:
        s = src_token.casefold()
        t = tgt_token.casefold()
        if s == t or t in self._lexicon.get(s, ()):
            return 1.0, 1.0
        fwd = self._fwd.get(s, {}).get(t, 0.0)
        bwd = self._bwd.get(t, {}).get(s, 0.0)
        return fwd, bwd

    def align(
        self,
        src_tokens: Sequence[str],
        tgt_tokens: Sequence[str],
        threshold: float = 0.5,
    ) -> list[AlignmentLink]:
        if not src_tokens or not tgt_tokens:
            raise EmptyText("alignment requires non-empty token lists")
        links: list[AlignmentLink] = []
        for i, s in enumerate(src_tokens):
            for j, t in enumerate(tgt_tokens):
                fwd, bwd = self._scores(s, t)
                confidence = min(fwd, bwd) if self.mode == "intersection" else max(fwd, bwd)
                if confidence >= threshold and confidence > 0.0:
                    links.append(AlignmentLink(i, j, confidence))
        return links


class RemoteAligner:
    """Client for a remote alignment service.

    Wire contract: POST {"src_tokens": [...], "tgt_tokens": [...]} returns
    {"links": [{"s": int, "t": int, "p": float}]}. Links below the threshold
    are filtered client-side regardless of server behaviour.
    """

    def __init__(self, endpoint: str, timeout: float = 60.0) -> None:
        self.endpoint = endpoint
        self.timeout = timeout

    def align(
        self,
        src_tokens: Sequence[str],
        tgt_tokens: Sequence[str],
        threshold: float = 0.5,
    ) -> list[AlignmentLink]:
        import requests

        if not src_tokens or not tgt_tokens:
            raise EmptyText("alignment requires non-empty token lists")
        payload = {"src_tokens": list(src_tokens), "tgt_tokens": list(tgt_tokens)}
        try:
            response = requests.post(self.endpoint, json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise RemoteError(0, str(exc)) from exc
        if response.status_code != 200:
            raise RemoteError(response.status_code, response.text)
        try:
            raw_links = response.json()["links"]
        except (ValueError, KeyError) as exc:
            raise RemoteError(200, f"malformed response: {response.text[:200]}") from exc
        links = []
        for item in raw_links:
            src_index, tgt_index = int(item["s"]), int(item["t"])
            confidence = float(item["p"])
            if not (0 <= src_index < len(src_tokens) and 0 <= tgt_index < len(tgt_tokens)):
                raise RemoteError(
                    200, f"link ({src_index}, {tgt_index}) outside token ranges"
                )
            if not 0.0 <= confidence <= 1.0:
                raise RemoteError(200, f"link confidence {confidence} outside [0, 1]")
            if confidence >= threshold:
                links.append(AlignmentLink(src_index, tgt_index, confidence))
        return links


def coverage_from_links(
    segment_id: str,
    provider: str,
    total_src_tokens: int,
    links: Sequence[AlignmentLink],
    keep_links: bool = True,
) -> CoverageReport:
    """Coverage = 100 * (# distinct linked source indices) / (# source tokens)."""
    covered = len({link.src_index for link in links})
    return CoverageReport(
        segment_id=segment_id,
        provider=provider,
        covered_src_tokens=covered,
        total_src_tokens=total_src_tokens,
        coverage=100.0 * covered / total_src_tokens,
        links=list(links) if keep_links else [],
    )


def coverage(
    segment: SourceSegment,
    candidate: TranslationCandidate,
    backend: AlignerBackend,
    threshold: float = 0.5,
    keep_links: bool = True,
) -> CoverageReport:
    """Score a candidate's source coverage with the given alignment backend."""
    src_tokens = tokenize(segment.source, segment.direction.src)
    tgt_tokens = tokenize(candidate.text, segment.direction.tgt)
    links = backend.align(src_tokens, tgt_tokens, threshold)
    return coverage_from_links(
        segment.id, candidate.provider, len(src_tokens), links, keep_links=keep_links
    )
