"""Command-line entry points: extract-bundle and embed-queries."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import ModalityError
from .pipeline import ExtractorJob, extract_bundle
from .textembed import embed_queries


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bundle-extract")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("extract-bundle", help="convert a frame directory into a frame bundle")
    sp.add_argument("--input", required=True, help="directory of frames (+ optional poses.json, point blobs)")
    sp.add_argument("--output", required=True)
    sp.add_argument("--clip", default="hash", help="'hash' or a CLIP vision checkpoint name")
    sp.add_argument("--masks", default="felzenszwalb", help="'felzenszwalb' or 'sam-video'")
    sp.add_argument("--normals", default="shading", help="'shading' or 'pretrained'")
    sp.add_argument("--feature-channels", type=int, default=512)
    sp.add_argument("--feature-downsample", type=int, default=2)
    sp.add_argument("--device", default="cpu")
    sp.add_argument("--normal-weights", default=None)
    sp.add_argument("--mask-weights", default=None)
    sp.add_argument("--points-count", type=int, default=512)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("embed-queries", help="embed text queries into a .f32 blob")
    sp.add_argument("--text", action="append", required=True, help="repeatable")
    sp.add_argument("--output", required=True)
    sp.add_argument("--model", default="hash", help="'hash' or a CLIP text checkpoint name")
    sp.add_argument("--channels", type=int, default=512)
    sp.add_argument("--device", default="cpu")
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "extract-bundle":
            job = ExtractorJob(
                input_dir=Path(args.input), output_dir=Path(args.output),
                clip_model=args.clip, mask_model=args.masks, normal_model=args.normals,
                feature_channels=args.feature_channels,
                feature_downsample=args.feature_downsample, device=args.device,
                normal_weights=args.normal_weights, mask_weights=args.mask_weights,
                seed=args.seed, points_count=args.points_count)
            out = extract_bundle(job)
            print(f"wrote bundle to {out}")
        else:
            out = embed_queries(args.text, args.output, channels=args.channels,
                                model=args.model, device=args.device, seed=args.seed)
            print(f"wrote {len(args.text)} query embeddings to {out}")
        return 0
    except (ModalityError, ValueError, OSError) as e:
        print(json.dumps({"error": str(e), "type": type(e).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
