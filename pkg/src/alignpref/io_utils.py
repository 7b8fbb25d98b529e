"""Deterministic JSONL/TSV artifact helpers.

Every artifact written by a pipeline stage starts with a header carrying the
stage name, a hash of the run configuration, and the seed, so re-runs with
identical inputs are byte-identical and auditable. Readers skip headers
transparently.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator

HEADER_KEY = "_artifact"


def config_hash(config: dict[str, Any]) -> str:
    raw = json.dumps(config, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:12]


def dumps_record(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def write_jsonl(
    path: str | Path,
    records: Iterable[dict[str, Any]],
    header: dict[str, Any] | None = None,
) -> int:
    """Write records as UTF-8 JSONL with LF endings; returns the record count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            fh.write(dumps_record({HEADER_KEY: header}) + "\n")
        for record in records:
            fh.write(dumps_record(record) + "\n")
            count += 1
    return count


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    """Yield records from a JSONL file, skipping blank lines and artifact headers."""
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if isinstance(record, dict) and HEADER_KEY in record:
                continue
            yield record


def read_jsonl_header(path: str | Path) -> dict[str, Any] | None:
    with Path(path).open("r", encoding="utf-8") as fh:
        first = fh.readline().strip()
    if not first:
        return None
    record = json.loads(first)
    if isinstance(record, dict) and HEADER_KEY in record:
        return record[HEADER_KEY]
    return None


def format_float(value: float) -> str:
    """Fixed decimal rendering used in TSV artifacts (platform-stable)."""
    return f"{value:.6f}"


def write_tsv(
    path: str | Path,
    columns: list[str],
    rows: Iterable[Iterable[Any]],
    header: dict[str, Any] | None = None,
) -> int:
    """Write a TSV artifact: optional '# k=v ...' header line, column line, rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            pairs = " ".join(f"{k}={header[k]}" for k in sorted(header))
            fh.write(f"# {pairs}\n")
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            cells = [format_float(c) if isinstance(c, float) else str(c) for c in row]
            fh.write("\t".join(cells) + "\n")
            count += 1
    return count


def read_tsv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    """Read a TSV artifact; returns (columns, rows) with header comments skipped."""
    columns: list[str] = []
    rows: list[list[str]] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if not columns:
                columns = line.split("\t")
            else:
                rows.append(line.split("\t"))
    return columns, rows
