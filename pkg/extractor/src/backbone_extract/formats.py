"""The CGF1 binary matrix wire format and the JSON-lines manifest.

CGF1: magic ``CGF1`` (4 bytes), rows (uint32 LE), dim (uint32 LE), then
rows*dim float32 LE values, row-major, no padding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CGF1"


class ManifestError(ValueError):
    pass


@dataclass
class ManifestItem:
    id: str
    kind: str              # "image" or "text"
    path_or_text: str


def read_manifest(path) -> list:
    """Parse a JSON-lines manifest of (id, kind, path_or_text) records."""
    items, seen = [], set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON") from exc
        for key in ("id", "kind", "path_or_text"):
            if key not in rec:
                raise ManifestError(f"{path}:{lineno}: missing field '{key}'")
        if rec["kind"] not in ("image", "text"):
            raise ManifestError(f"{path}:{lineno}: unknown kind '{rec['kind']}'")
        if rec["id"] in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate item id '{rec['id']}'")
        seen.add(rec["id"])
        items.append(ManifestItem(str(rec["id"]), rec["kind"], str(rec["path_or_text"])))
    return items


def write_matrix(path, rows: list):
    """Write feature rows as a CGF1 file (single-threaded, manifest order)."""
    data = np.ascontiguousarray(np.stack(rows), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", data.shape[0], data.shape[1]))
        fh.write(data.tobytes(order="C"))
