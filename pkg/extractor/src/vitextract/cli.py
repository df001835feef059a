"""Extractor command line.

``extract`` handles single images, ``extract-episodes`` batches a dataset
manifest into per-episode manifests plus shared dumps.
"""

from __future__ import annotations

import argparse
import json
import sys

from .backbones import UnknownBackboneError, WeightsUnavailableError, available_backbones
from .extract import ExtractSpec, MaskSizeError, extract, extract_episode_set


def _parse_layers(text):
    """'12-23' or '0,5,11' -> sorted list of ints."""
    if text is None:
        return None
    if "-" in text and "," not in text:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return sorted(int(x) for x in text.split(","))


def _spec_from_args(args) -> ExtractSpec:
    return ExtractSpec(
        backbone=args.backbone,
        resolution=args.resolution,
        token_layers=_parse_layers(args.layers),
        attn_layers=_parse_layers(args.attn_layers),
        out_dir=args.out,
        seed=args.seed,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vitextract", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--backbone", default="vit-b16-random",
                        help=f"one of: {', '.join(available_backbones())}")
    common.add_argument("--resolution", type=int, default=400)
    common.add_argument("--layers", default=None, help="token layers, e.g. 0-11 or 3,7,11")
    common.add_argument("--attn-layers", dest="attn_layers", default=None,
                        help="attention-logit layers (default: last block)")
    common.add_argument("--out", default="dumps", help="output directory (or file for extract)")
    common.add_argument("--seed", type=int, default=0, help="init seed for -random backbones")

    p = sub.add_parser("extract", parents=[common], help="extract one image")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--out-file", default=None, help="explicit output path")

    p = sub.add_parser("extract-episodes", parents=[common],
                       help="extract a dataset manifest into episode manifests")
    p.add_argument("--manifest", required=True)

    args = parser.parse_args(argv)
    try:
        spec = _spec_from_args(args)
        if args.command == "extract":
            out = args.out_file or f"{args.out}/dump.hfd"
            path = extract(args.image, args.mask, spec, out)
            print(json.dumps({"written": path}))
        else:
            manifests = extract_episode_set(args.manifest, spec)
            print(json.dumps({"episodes": len(manifests), "manifests": manifests}, indent=2))
        return 0
    except (UnknownBackboneError, WeightsUnavailableError, MaskSizeError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
