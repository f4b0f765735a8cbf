"""JSON-lines manifests."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterable, List

from .eot import atomic_write


def dumps(records: Iterable[Dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=False) + "\n" for r in records)


def write(path, records: Iterable[Dict]) -> None:
    atomic_write(Path(path), dumps(records).encode("utf-8"))


def read(path) -> List[Dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
