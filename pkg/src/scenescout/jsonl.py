"""Append-only JSONL event files with trailing-corruption recovery."""

from __future__ import annotations

import json
import logging
import os

logger = logging.getLogger(__name__)


class JsonlWriter:
    """Durable append-only writer; every record is flushed on write so a
    crash loses at most the line being written."""

    def __init__(self, path: str) -> None:
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def append(self, record: dict) -> None:
        line = json.dumps(record, ensure_ascii=True)
        self._fh.write(line + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> JsonlWriter:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_jsonl(path: str, recover: bool = False) -> list[dict]:
    """Read all records. With recover=True a corrupt trailing line is
    truncated from the file (and logged) instead of raising; corruption
    before the last line always raises."""
    if not os.path.exists(path):
        return []
    records: list[dict] = []
    offsets: list[int] = []
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    lines = data.split(b"\n")
    for i, raw in enumerate(lines):
        if raw.strip() == b"":
            pos += len(raw) + 1
            continue
        try:
            records.append(json.loads(raw.decode("utf-8")))
            offsets.append(pos)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            is_last = all(rest.strip() == b"" for rest in lines[i + 1 :])
            if recover and is_last:
                logger.warning(
                    "truncating corrupt trailing line in %s at byte %d", path, pos
                )
                with open(path, "rb+") as f:
                    f.truncate(pos)
                return records
            raise ValueError(f"corrupt JSONL record in {path} at byte {pos}") from exc
        pos += len(raw) + 1
    return records
