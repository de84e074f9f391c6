"""Batch extraction: manifest in, CGF1 matrix + JSON index sidecar out.

Row order always matches manifest order.  Unreadable items are recorded in
an errors sidecar; the job fails unless ``skip_errors`` is set, and skipped
items never leave a filled row behind (the output simply has fewer rows,
with the index sidecar naming which item each row belongs to).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbones import ItemError, make_backbone
from .formats import read_manifest, write_matrix


@dataclass
class ExtractionJob:
    manifest_path: str
    output_path: str
    backbone_by_kind: dict = field(default_factory=lambda: {"image": "stub", "text": "stub"})
    batch_size: int = 16
    skip_errors: bool = False


class ExtractionFailed(RuntimeError):
    def __init__(self, errors):
        super().__init__(f"{len(errors)} item(s) failed; rerun with skip_errors to drop them")
        self.errors = errors


def extract(job: ExtractionJob) -> dict:
    """Run the job and return the index sidecar contents."""
    items = read_manifest(job.manifest_path)
    backbones = {}
    for kind in sorted({item.kind for item in items}):
        backbones[kind] = make_backbone(job.backbone_by_kind.get(kind, "stub"))

    rows, row_ids, errors = [], [], []
    for start in range(0, len(items), job.batch_size):
        batch = items[start:start + job.batch_size]
        by_kind = {}
        for item in batch:
            by_kind.setdefault(item.kind, []).append(item)
        encoded = {}
        for kind, group in by_kind.items():
            # encode one item at a time only when a batch fails, so good
            # items in a failing batch still come through
            try:
                vecs = backbones[kind].encode_batch(group)
                encoded.update({g.id: v for g, v in zip(group, vecs)})
            except ItemError:
                for g in group:
                    try:
                        encoded[g.id] = backbones[kind].encode_batch([g])[0]
                    except ItemError as exc:
                        errors.append({"id": g.id, "error": str(exc)})
        for item in batch:
            if item.id in encoded:
                rows.append(encoded[item.id])
                row_ids.append(item.id)

    if errors and not job.skip_errors:
        _write_errors(job.output_path, errors)
        raise ExtractionFailed(errors)
    if not rows:
        _write_errors(job.output_path, errors)
        raise ExtractionFailed(errors or [{"id": None, "error": "empty manifest"}])

    out = Path(job.output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_matrix(out, rows)
    index = {
        "rows": len(rows),
        "dim": int(rows[0].shape[0]) if rows else 0,
        "row_ids": row_ids,
        "backbones": {kind: bb.checkpoint() for kind, bb in backbones.items()},
        "skipped": [e["id"] for e in errors],
    }
    Path(str(out) + ".index.json").write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if errors:
        _write_errors(job.output_path, errors)
    return index


def _write_errors(output_path, errors):
    Path(str(output_path) + ".errors.json").write_text(
        json.dumps(errors, indent=2, sort_keys=True) + "\n", encoding="utf-8")
