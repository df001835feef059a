"""Command-line entry points.

Verbs: ``extract-check`` (validate feature containers), ``run`` (benchmark),
``route`` (routing-only report), ``heatmaps`` (per-layer probability maps),
``selectors-compare`` (layer-selector regret table). Failures exit nonzero
with an error JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

from .adapt import expand_one_shot
from .config import load_run_config, run_config_from_dict
from .numerics import EmptyMaskError, ZeroProtoError
from .pipeline import dump_layer_heatmaps, episode_seed, run_benchmark, selectors_compare
from .routing import route
from .store import StoreError, load_episode, read_dump


def _emit_error(exc: Exception) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return 1


def _cmd_extract_check(args) -> int:
    report = {"files": [], "ok": True}
    for path in args.paths:
        entry = {"path": path, "ok": True}
        try:
            if path.endswith(".json"):
                episode = load_episode(path)
                entry["shot"] = episode.shot
                entry["grid"] = list(episode.query.grid)
            else:
                dump = read_dump(path)
                entry["grid"] = list(dump.grid)
                entry["layers"] = dump.n_layers
                entry["attn_layers"] = list(dump.meta.attn_layers)
                entry["backbone"] = dump.meta.backbone
                entry["has_mask"] = dump.mask is not None
        except StoreError as exc:
            entry.update(ok=False, error=type(exc).__name__, message=str(exc))
            report["ok"] = False
        report["files"].append(entry)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["ok"] else 1


def _load_config(args):
    cfg = load_run_config(args.config)
    if args.out is not None:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.shot is not None:
        cfg.shot = args.shot
    return cfg


def _cmd_run(args) -> int:
    summary = run_benchmark(_load_config(args))
    print(json.dumps({k: v for k, v in summary.items() if k != "config"}, indent=2, sort_keys=True))
    return 0


def _cmd_route(args) -> int:
    cfg = _load_config(args) if args.config else run_config_from_dict({"synthetic": {}})
    episode = load_episode(args.manifest)
    if episode.shot == 1:
        episode = expand_one_shot(episode, cfg.tta.augment_views, episode_seed(cfg.seed, 0))
    decision = route(episode, cfg.hls, cfg.ssp)
    report = decision.to_report()
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def _cmd_heatmaps(args) -> int:
    cfg = _load_config(args) if args.config else run_config_from_dict({"synthetic": {}})
    episode = load_episode(args.manifest)
    files = dump_layer_heatmaps(episode, args.out, cfg.ssp)
    print(json.dumps({"written": len(files), "out_dir": args.out}, sort_keys=True))
    return 0


def _cmd_selectors(args) -> int:
    cfg = _load_config(args)
    rows = selectors_compare(cfg)
    print(json.dumps({"rows": len(rows), "out_dir": cfg.out_dir}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="episeg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-check", help="validate feature dumps or episode manifests")
    p.add_argument("paths", nargs="+", help="dump files or manifest .json files")
    p.set_defaults(func=_cmd_extract_check)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--out", help="output directory/file override")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--shot", type=int, help="shot override")

    p = sub.add_parser("run", parents=[common], help="run an episodic benchmark")
    p.set_defaults(func=_cmd_run, config_required=True)

    p = sub.add_parser("route", parents=[common], help="routing report for one episode")
    p.add_argument("--manifest", required=True, help="episode manifest JSON")
    p.set_defaults(func=_cmd_route)

    p = sub.add_parser("heatmaps", parents=[common], help="per-layer probability maps")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=_cmd_heatmaps)

    p = sub.add_parser("selectors-compare", parents=[common], help="selector regret table")
    p.set_defaults(func=_cmd_selectors, config_required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config_required", False) and not args.config:
        parser.error(f"{args.command} requires --config")
    try:
        return args.func(args)
    except (StoreError, EmptyMaskError, ZeroProtoError, ValueError, OSError) as exc:
        return _emit_error(exc)


if __name__ == "__main__":
    sys.exit(main())
