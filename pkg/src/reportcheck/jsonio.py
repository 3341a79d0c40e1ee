"""Canonical JSON serialization shared by every artifact the engine writes.

All persisted files (document JSON, manifests, replay stores, caches) go
through ``dumps_canonical`` so that identical inputs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any


def dumps_canonical(obj: Any) -> str:
    """Serialize with sorted keys and a trailing newline; byte-stable."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def dumps_compact(obj: Any) -> str:
    """Single-line canonical form, used for fingerprints and JSONL rows."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_canonical(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_canonical(obj), encoding="utf-8")


def load(path: Path) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
