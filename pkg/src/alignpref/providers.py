"""Clients for external models: translators, sentence embedders, and a
chat-style evaluator, each with a deterministic offline mock for tests.

All mocks are pure functions of (configuration, input), so batch outputs are
byte-identical across runs and platforms.
"""

from __future__ import annotations

import hashlib
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

from .aligner import tokenize
from .corpus import LANGUAGE_NAMES, SourceSegment, TranslationCandidate
from .errors import AlignprefError, ConfigError, EmptyText, RemoteError
from .io_utils import read_jsonl

DEFAULT_TIMEOUT = 60.0
DEFAULT_ATTEMPTS = 3
DEFAULT_MAX_IN_FLIGHT = 8


class MissingReference(AlignprefError):
    pass


class LookupMiss(AlignprefError):
    pass


@dataclass(frozen=True)
class ProviderSpec:
    """One configured translation source; priority breaks coverage ties."""

    id: str
    priority: int
    endpoint: str | None = None
    model_name: str | None = None
    credentials_env: str | None = None


def load_provider_specs(entries: Sequence[dict[str, Any]]) -> list[ProviderSpec]:
    specs = [
        ProviderSpec(
            id=str(entry["id"]),
            priority=int(entry["priority"]),
            endpoint=entry.get("endpoint"),
            model_name=entry.get("model_name"),
            credentials_env=entry.get("credentials_env"),
        )
        for entry in entries
    ]
    ids = [spec.id for spec in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate provider ids in {ids}")
    priorities = [spec.priority for spec in specs]
    if len(set(priorities)) != len(priorities):
        raise ConfigError(f"provider priorities must be tie-free, got {priorities}")
    return specs


def default_translate_template() -> str:
    return resources.files("alignpref").joinpath("data/translate_prompt.txt").read_text("utf-8")


def default_coverage_template() -> str:
    return resources.files("alignpref").joinpath("data/coverage_prompt.txt").read_text("utf-8")


def render_translate_prompt(template: str, segment: SourceSegment) -> str:
    return template.format(
        src_lang_name=LANGUAGE_NAMES[segment.direction.src],
        tgt_lang_name=LANGUAGE_NAMES[segment.direction.tgt],
        source=segment.source,
    )


# ---------------------------------------------------------------------------
# Chat clients


class ChatClient(Protocol):
    def chat_complete(self, prompt: str) -> str: ...


def _retryable(status: int) -> bool:
    return status == 429 or status >= 500 or status == 0


class HttpChatClient:
    """Minimal JSON chat client: POST {"model", "prompt"} -> {"text"}.

    Retries transient failures (connection errors, 429, 5xx) with exponential
    backoff up to `attempts` total tries; other 4xx fail immediately.
    """

    def __init__(
        self,
        endpoint: str,
        model_name: str | None = None,
        api_key: str | None = None,
        timeout: float = DEFAULT_TIMEOUT,
        attempts: int = DEFAULT_ATTEMPTS,
        backoff: float = 0.5,
    ) -> None:
        self.endpoint = endpoint
        self.model_name = model_name
        self.api_key = api_key
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff

    def chat_complete(self, prompt: str) -> str:
        import requests

        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.model_name, "prompt": prompt}
        last: RemoteError | None = None
        for attempt in range(self.attempts):
            try:
                response = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                status, body = response.status_code, response.text
            except requests.RequestException as exc:
                status, body = 0, str(exc)
            if status == 200:
                try:
                    return response.json()["text"]
                except (ValueError, KeyError) as exc:
                    raise RemoteError(200, f"malformed response: {body[:200]}") from exc
            last = RemoteError(status, body)
            if not _retryable(status):
                raise last
            if attempt + 1 < self.attempts:
                time.sleep(self.backoff * (2**attempt))
        assert last is not None
        raise last


class MockChatClient:
    """Scripted chat client. Either a fixed response list (repeating the last
    entry once exhausted) or a deterministic function of the prompt."""

    def __init__(
        self,
        responses: Sequence[str] | None = None,
        fn: Callable[[str], str] | None = None,
    ) -> None:
        if (responses is None) == (fn is None):
            raise ConfigError("provide exactly one of responses or fn")
        self._responses = list(responses) if responses is not None else None
        self._fn = fn
        self._cursor = 0
        self.calls: list[str] = []

    def chat_complete(self, prompt: str) -> str:
        self.calls.append(prompt)
        if self._fn is not None:
            return self._fn(prompt)
        assert self._responses is not None
        index = min(self._cursor, len(self._responses) - 1)
        self._cursor += 1
        return self._responses[index]


# ---------------------------------------------------------------------------
# Embedders


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    dim: int


class Embedder(Protocol):
    def embed(self, text: str) -> EmbeddingVector: ...


class HashEmbedder:
    """Deterministic sentence embedder: hashed bag of character 3-grams,
    L2-normalized. Similarity grows with surface overlap, which is all the
    near-duplicate filter needs."""

    def __init__(self, dim: int = 64) -> None:
        self.dim = dim

    def embed(self, text: str) -> EmbeddingVector:
        if not text.strip():
            raise EmptyText("cannot embed empty text")
        grams = (
            [text[i : i + 3] for i in range(len(text) - 2)] if len(text) >= 3 else [text]
        )
        counts = [0.0] * self.dim
        for gram in grams:
            digest = hashlib.sha1(gram.encode("utf-8")).digest()
            counts[int.from_bytes(digest[:4], "big") % self.dim] += 1.0
        norm = sum(c * c for c in counts) ** 0.5
        return EmbeddingVector(values=tuple(c / norm for c in counts), dim=self.dim)


class RemoteEmbedder:
    """Client for a remote embedding service: POST {"text"} -> {"values": [...]}.

    Responses are re-normalized to unit L2 norm; the dimension is pinned by
    the first successful call.
    """

    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT) -> None:
        self.endpoint = endpoint
        self.timeout = timeout
        self._dim: int | None = None

    def embed(self, text: str) -> EmbeddingVector:
        import requests

        if not text.strip():
            raise EmptyText("cannot embed empty text")
        try:
            response = requests.post(self.endpoint, json={"text": text}, timeout=self.timeout)
        except requests.RequestException as exc:
            raise RemoteError(0, str(exc)) from exc
        if response.status_code != 200:
            raise RemoteError(response.status_code, response.text)
        try:
            values = [float(v) for v in response.json()["values"]]
        except (ValueError, KeyError) as exc:
            raise RemoteError(200, f"malformed response: {response.text[:200]}") from exc
        if self._dim is None:
            self._dim = len(values)
        elif len(values) != self._dim:
            raise RemoteError(200, f"embedding dim changed: {len(values)} != {self._dim}")
        norm = sum(v * v for v in values) ** 0.5
        if norm == 0.0:
            raise RemoteError(200, "embedding service returned a zero vector")
        return EmbeddingVector(values=tuple(v / norm for v in values), dim=len(values))


# ---------------------------------------------------------------------------
# Translators


class Translator(Protocol):
    def translate(self, segment: SourceSegment) -> TranslationCandidate: ...


class ReferenceTranslator:
    """Pass-through provider exposing the human reference as a candidate."""

    def __init__(self, provider_id: str = "reference") -> None:
        self.provider_id = provider_id

    def translate(self, segment: SourceSegment) -> TranslationCandidate:
        if not segment.reference or not segment.reference.strip():
            raise MissingReference(f"segment {segment.id} has no reference")
        return TranslationCandidate(segment.id, self.provider_id, segment.reference.strip())


class FileTranslator:
    """Provider backed by a sidecar JSONL of precomputed translations:
    {"segment_id": str, "provider": str, "text": str} per line."""

    def __init__(self, provider_id: str, sidecar_path: str | Path) -> None:
        self.provider_id = provider_id
        self._table: dict[str, str] = {}
        for record in read_jsonl(sidecar_path):
            if str(record["provider"]) != provider_id:
                continue
            self._table[str(record["segment_id"])] = str(record["text"])

    def translate(self, segment: SourceSegment) -> TranslationCandidate:
        text = self._table.get(segment.id)
        if text is None:
            raise LookupMiss(f"no sidecar translation for {segment.id}/{self.provider_id}")
        return TranslationCandidate(segment.id, self.provider_id, text)


class ChatTranslator:
    """Translator driving a chat model with the shipped prompt template."""

    def __init__(
        self,
        provider_id: str,
        client: ChatClient,
        template: str | None = None,
    ) -> None:
        self.provider_id = provider_id
        self.client = client
        self.template = template or default_translate_template()

    def translate(self, segment: SourceSegment) -> TranslationCandidate:
        prompt = render_translate_prompt(self.template, segment)
        text = self.client.chat_complete(prompt).strip()
        if not text:
            raise EmptyText(f"provider {self.provider_id} returned empty text")
        return TranslationCandidate(segment.id, self.provider_id, text)


def mock_token_map(token: str) -> str:
    """Deterministic pseudo-translation of a single token (stable across runs).

    Letters are drawn from the full a-z range with variable length so mapped
    words share few character n-grams with each other.
    """
    digest = hashlib.sha1(token.casefold().encode("utf-8")).digest()
    length = 5 + digest[0] % 5
    return "".join(chr(ord("a") + digest[1 + i] % 26) for i in range(length))


def _stable_fraction(key: str) -> float:
    digest = hashlib.sha1(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") / 2**32


class MockTranslator:
    """Deterministic stand-in translator.

    kind "map" emits a token-by-token pseudo-translation of the source;
    "map-lossy" models omission plus hallucination: it drops `drop_rate` of
    the source tokens (at least one) and appends a few invented tokens, both
    keyed on (segment id, provider); "echo-reverse" returns the reversed
    source string.
    """

    def __init__(self, provider_id: str, kind: str = "map", drop_rate: float = 0.3) -> None:
        if kind not in ("map", "map-lossy", "echo-reverse"):
            raise ConfigError(f"unknown mock translator kind: {kind!r}")
        self.provider_id = provider_id
        self.kind = kind
        self.drop_rate = drop_rate

    def translate(self, segment: SourceSegment) -> TranslationCandidate:
        if self.kind == "echo-reverse":
            return TranslationCandidate(segment.id, self.provider_id, segment.source[::-1])
        tokens = tokenize(segment.source, segment.direction.src)
        mapped = [mock_token_map(tok) for tok in tokens]
        if self.kind == "map-lossy":
            kept = [
                tok
                for i, tok in enumerate(mapped)
                if _stable_fraction(f"{segment.id}:{self.provider_id}:{i}") >= self.drop_rate
            ]
            if len(kept) == len(mapped) and mapped:
                kept = mapped[:-1]  # guarantee at least one dropped token
            invented = [
                mock_token_map(f"junk:{segment.id}:{self.provider_id}:{j}")
                for j in range(max(1, round(0.15 * len(mapped))))
            ]
            mapped = (kept or mapped[:1]) + invented
        return TranslationCandidate(segment.id, self.provider_id, " ".join(mapped))


def build_translator(
    spec: ProviderSpec,
    mock: bool = False,
    sidecar_path: str | Path | None = None,
    chat_client: ChatClient | None = None,
    template: str | None = None,
) -> Translator:
    """Instantiate the translator for a provider spec.

    The "reference" and "file" providers are always offline. With mock=True,
    remote providers become MockTranslators whose behaviour is selected by
    model_name ("mock-map", "mock-map-lossy", "mock-echo-reverse"; remote
    providers default to "mock-map" for the best priority and "mock-map-lossy"
    otherwise).
    """
    if spec.id == "reference":
        return ReferenceTranslator(spec.id)
    if spec.id == "file":
        if sidecar_path is None:
            raise ConfigError("file provider requires a sidecar path")
        return FileTranslator(spec.id, sidecar_path)
    if mock:
        name = spec.model_name or ""
        if name.startswith("mock-"):
            kind = name[len("mock-") :]
        else:
            kind = "map" if spec.priority == 1 else "map-lossy"
        return MockTranslator(spec.id, kind=kind)
    if spec.endpoint is None:
        raise ConfigError(f"provider {spec.id} has no endpoint and mock mode is off")
    if chat_client is None:
        import os

        api_key = os.environ.get(spec.credentials_env) if spec.credentials_env else None
        chat_client = HttpChatClient(spec.endpoint, model_name=spec.model_name, api_key=api_key)
    return ChatTranslator(spec.id, chat_client, template=template)


def translate_all(
    segments: Sequence[SourceSegment],
    translators: Sequence[tuple[ProviderSpec, Translator]],
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
) -> tuple[list[TranslationCandidate], list[tuple[str, str, str]]]:
    """Translate every segment with every provider.

    Requests fan out with bounded concurrency per provider; results are
    re-assembled in canonical (segment_id, provider priority) order so output
    never depends on completion order. Returns (candidates, errors) where
    each error is (segment_id, provider_id, message).
    """
    ordered = sorted(translators, key=lambda pair: pair[0].priority)
    candidates: list[TranslationCandidate] = []
    errors: list[tuple[str, str, str]] = []
    results: dict[tuple[int, int], TranslationCandidate | Exception] = {}
    seg_order = sorted(range(len(segments)), key=lambda i: segments[i].id)

    def run_one(seg_index: int, prov_index: int, translator: Translator) -> None:
        segment = segments[seg_index]
        try:
            results[(seg_index, prov_index)] = translator.translate(segment)
        except Exception as exc:  # per-item failures must not abort the batch
            results[(seg_index, prov_index)] = exc

    for prov_index, (_, translator) in enumerate(ordered):
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            for seg_index in range(len(segments)):
                pool.submit(run_one, seg_index, prov_index, translator)

    for seg_index in seg_order:
        for prov_index, (spec, _) in enumerate(ordered):
            outcome = results[(seg_index, prov_index)]
            if isinstance(outcome, Exception):
                errors.append((segments[seg_index].id, spec.id, str(outcome)))
            else:
                candidates.append(outcome)
    return candidates, errors


# ---------------------------------------------------------------------------
# Mock evaluator client (offline stand-in for the chat-based coverage judge)

_SOURCE_RE = re.compile(r"^Source \([^)]*\): (.*)$", re.MULTILINE)
_TRANSLATION_RE = re.compile(r"^Translation \([^)]*\): (.*)$", re.MULTILINE)


class MockEvaluatorClient:
    """Deterministic coverage judge for mock pipelines.

    Extracts the source and translation from the shipped prompt template and
    scores the fraction of source tokens whose identity or pseudo-translation
    (mock_token_map) appears in the translation. Falls back to a stable
    hash-derived score when the prompt does not match the template.
    """

    def chat_complete(self, prompt: str) -> str:
        source_match = _SOURCE_RE.search(prompt)
        translation_match = _TRANSLATION_RE.search(prompt)
        if not source_match or not translation_match:
            return str(int(_stable_fraction(prompt) * 101) % 101)
        try:
            src_tokens = tokenize(source_match.group(1))
            tgt_tokens = set(tokenize(translation_match.group(1)))
        except EmptyText:
            return "0"
        covered = sum(
            1 for tok in src_tokens if tok in tgt_tokens or mock_token_map(tok) in tgt_tokens
        )
        return str(round(100.0 * covered / len(src_tokens)))
