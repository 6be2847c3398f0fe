import argparse
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

import config
from core.data import read_mask, write_mask
from core.errors import ConfigError, FWSError
from core.pipeline import load_run_config, run_pipeline
from core.sparsify import sparsify
from core.sweep import run_sweep
from schemas import TECHNIQUES

log = logging.getLogger("fws")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

STAGE_COMMANDS = ("synth", "transform", "train", "eval", "profile", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fws", description="Few-shot weakly-supervised fundus segmentation.")
    parser.add_argument("--log-level", default=config.FWS_LOG_LEVEL, help="Logging level (default from FWS_LOG_LEVEL).")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", type=Path, help="YAML run configuration.")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="Dotted override, e.g. train.inner_lr=0.05. Repeatable.")
        p.add_argument("--output-dir", type=Path, help="Override the run output directory.")
        return p

    for name in STAGE_COMMANDS:
        with_config(sub.add_parser(name, help=f"Run the {name} stage."))
    with_config(sub.add_parser("run", help="Run the stages listed in the config."))
    with_config(sub.add_parser("sweep", help="Run every variant of the sweep section."))

    sp = with_config(sub.add_parser("sparsify", help="Sparsify one dense mask PNG."))
    sp.add_argument("--mask", type=Path, required=True, help="Dense mask PNG (values 0, 1, 2).")
    sp.add_argument("--technique", choices=TECHNIQUES, required=True)
    sp.add_argument("--density", type=float, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True, help="Output sparse mask PNG (255 = unannotated).")
    return parser


def _load(args):
    overrides = list(args.overrides)
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")
    return load_run_config(args.config, overrides)


def run_command(args) -> int:
    cfg = _load(args)
    if args.command == "sparsify":
        dense = read_mask(args.mask)
        sparse = sparsify(dense, cfg.sparsify.params(args.technique, args.density, args.seed))
        write_mask(args.out, sparse)
        annotated = int((sparse != config.UNANNOTATED).sum())
        log.info(f"🟢 Wrote {args.out}: {annotated} of {sparse.size} pixels annotated")
    elif args.command == "sweep":
        run_sweep(cfg)
    elif args.command == "run":
        run_pipeline(cfg)
    else:
        run_pipeline(cfg, stages=[args.command])
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(message)s")
    try:
        return run_command(args)
    except ValidationError as e:
        for err in e.errors():
            field = ".".join(str(p) for p in err["loc"]) or "<root>"
            log.error(f"🔴 Invalid config field {field}: {err['msg']}")
        return EXIT_CONFIG
    except ConfigError as e:
        log.error(f"🔴 Config error: {e}")
        return EXIT_CONFIG
    except FWSError as e:
        log.error(f"🔴 {type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
