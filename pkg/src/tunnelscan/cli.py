"""Command line entry point: ``tunnelscan run|synth|compare``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import TunnelScanError

USAGE_EXIT = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for it in items:
        if "=" not in it:
            raise argparse.ArgumentTypeError(f"--set expects key=value, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_run(args) -> int:
    from .config import PipelineConfig
    from .pipeline import run

    overrides = _overrides(args.set)
    if args.no_cache:
        overrides["cache"] = "false"
    cfg = PipelineConfig.from_file(args.config, overrides)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    report = run(cfg, log)
    print(report.to_text(), end="")
    return report.exit_status


def cmd_synth(args) -> int:
    from .synth import SceneConfig, SyntheticScene

    cfg = SceneConfig() if args.scene == "default" else SceneConfig.from_file(args.scene)
    out = SyntheticScene(cfg).write_dataset(args.outdir)
    print(f"dataset written to {out}")
    return 0


def cmd_compare(args) -> int:
    import cv2

    from .surface import compare_models, deviation_raster, load_grid

    cmp = compare_models(load_grid(args.model), load_grid(args.reference))
    print(cmp.to_text(), end="")
    if args.raster:
        Path(args.raster).parent.mkdir(parents=True, exist_ok=True)
        cv2.imwrite(args.raster, cv2.cvtColor(deviation_raster(cmp.deviation, args.limit), cv2.COLOR_RGB2BGR))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tunnelscan", description="Photogrammetric tunnel surface reconstruction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="process a dataset described by a config file")
    r.add_argument("config")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    r.add_argument("--no-cache", action="store_true", help="ignore and do not write stage caches")
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("scene", help="scene key=value file, or 'default'")
    s.add_argument("outdir")
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("compare", help="deviation statistics between two grids")
    c.add_argument("model", help="grid stem, e.g. output/model")
    c.add_argument("reference")
    c.add_argument("--raster", help="write a color-coded deviation PNG")
    c.add_argument("--limit", type=float, default=0.01, help="color scale limit in meters")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        print(f"tunnelscan: error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except TunnelScanError as exc:
        print(f"tunnelscan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
