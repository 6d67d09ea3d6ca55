"""Command line entry point: ``embryobench <subcommand> --config run.json``."""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import imaging, pipeline
from .guide import synthesize_guide, write_guide
from .io.config import ConfigError, apply_overrides, build_config, load_raw, parse_frames
from .io.manifest import read_manifest

log = logging.getLogger("embryobench")

SUBCOMMANDS = ("simulate", "render", "acquire", "full", "make-guide", "make-videos")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="embryobench",
        description="Generate semi-synthetic 3D+t fluorescence microscopy benchmarks.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path,
                        help="JSON run config (render/acquire fall back to the run's manifest)")
    parser.add_argument("--out", type=Path, help="output directory (overrides config 'output')")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value by dotted key, e.g. dynamics.K=5 (repeatable)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for render/acquire")
    parser.add_argument("--frames", help="inclusive frame range a..b")
    parser.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    return parser


def _load_config(args):
    if args.config is not None:
        raw = load_raw(args.config)
    elif args.subcommand in ("render", "acquire") and args.out is not None:
        raw = read_manifest(args.out)["config"]
    else:
        raise ConfigError("--config is required")
    overrides = list(args.overrides)
    if args.out is not None:
        overrides.append(f"output={args.out}")
    cfg = build_config(apply_overrides(raw, overrides))
    if args.frames is not None:
        cfg = replace(cfg, frames=parse_frames(args.frames))
    return cfg


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("embryobench: --threads must be >= 1", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args)
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)

        if args.subcommand == "make-guide":
            if cfg.guide_spec is None:
                raise ConfigError("make-guide needs guide.generator in the config")
            guide = synthesize_guide(cfg.guide_spec, cfg.seed, pad=cfg.dynamics.r_max)
            write_guide(guide, out / "guide.csv")
            log.info("wrote %d guide frames to %s", len(guide.frames), out / "guide.csv")
            return 0
        if args.subcommand == "make-videos":
            if cfg.video_spec is None:
                raise ConfigError("make-videos needs videos.generator (or no videos.path) in the config")
            library = imaging.synthesize_library(cfg.video_spec, cfg.seed)
            imaging.write_object_videos(library, out / "videos")
            log.info("wrote %d object videos to %s", len(library), out / "videos")
            return 0

        ctx = pipeline.prepare(cfg, out)
        if args.subcommand == "simulate":
            pipeline.stage_simulate(ctx)
        elif args.subcommand == "render":
            pipeline.stage_render(ctx, args.threads)
        elif args.subcommand == "acquire":
            pipeline.stage_acquire(ctx, args.threads)
        else:
            pipeline.stage_full(ctx, args.threads)
        ctx.write_manifest()
        log.info("%s finished: %s", args.subcommand, out)
        return 0
    except (ConfigError, pipeline.StageError, OSError, ValueError, KeyError) as exc:
        print(f"embryobench {args.subcommand}: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
