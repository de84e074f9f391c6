"""CLI: read a JSON-lines manifest, emit a CGF1 feature file + sidecars."""

from __future__ import annotations

import argparse
import sys

from .backbones import BackboneUnavailable
from .extract import ExtractionFailed, ExtractionJob, extract
from .formats import ManifestError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="backbone-extract",
        description="Batch-encode images/texts into a CGF1 feature matrix")
    parser.add_argument("--manifest", required=True,
                        help="JSON-lines file of {id, kind, path_or_text}")
    parser.add_argument("--out", required=True, help="output .cgf path")
    parser.add_argument("--image-backbone", default="stub")
    parser.add_argument("--text-backbone", default="stub")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--skip-errors", action="store_true",
                        help="drop unreadable items instead of failing")
    args = parser.parse_args(argv)

    job = ExtractionJob(
        manifest_path=args.manifest,
        output_path=args.out,
        backbone_by_kind={"image": args.image_backbone, "text": args.text_backbone},
        batch_size=args.batch_size,
        skip_errors=args.skip_errors)
    try:
        index = extract(job)
    except (ManifestError, BackboneUnavailable, ExtractionFailed, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {index['rows']} x {index['dim']} features to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
