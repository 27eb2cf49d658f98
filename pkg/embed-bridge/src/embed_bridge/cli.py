"""Command line for folder extraction."""

import argparse
import logging
import sys

from .errors import BridgeError
from .extract import ExtractionJob, export_centroid_only, extract


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="extract",
        description="Encode an image folder into an embedding file",
    )
    parser.add_argument("--root", required=True, help="image folder")
    parser.add_argument("--encoder", default="clip", help="encoder name")
    parser.add_argument("--out", required=True, help="output embedding file")
    parser.add_argument(
        "--centroid-only",
        action="store_true",
        help="emit only the mean embedding (one row)",
    )
    parser.add_argument("--max", type=int, default=None, help="sample cap")
    parser.add_argument("--batch", type=int, default=16, help="encode batch size")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        job = ExtractionJob(
            image_root=args.root,
            output_path=args.out,
            encoder=args.encoder,
            batch_size=args.batch,
            max_samples=args.max,
        )
        run = export_centroid_only if args.centroid_only else extract
        out = run(job)
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
