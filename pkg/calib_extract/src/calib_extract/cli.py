"""CLI: extract weights + calibration norms from a transformer checkpoint.

    calib-extract <model_id> --corpus texts.txt --out dir
"""

from __future__ import annotations

import argparse
import sys


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="calib-extract", description=__doc__)
    ap.add_argument("model_id")
    ap.add_argument("--corpus", required=True, help="text file, one passage per line")
    ap.add_argument("--out", required=True)
    ap.add_argument("--max-tokens", type=int, default=16384)
    args = ap.parse_args(argv)

    from .extract import extract_hf

    with open(args.corpus) as f:
        texts = [line.strip() for line in f if line.strip()]
    manifest = extract_hf(args.model_id, texts, args.out, max_tokens=args.max_tokens)
    print(f"extracted {len(manifest.layers)} layers to {args.out}")
    if manifest.skipped:
        print("skipped modules:", file=sys.stderr)
        for s in manifest.skipped:
            print(f"  {s}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
