"""Command line entry point: ``shortmr <command> --config <path> [--seed N] [--out DIR]``.

Exit status is 0 on success, 1 for invalid input (config, manifest, missing
upstream stage, failed audit) and 2 for failures while running.
"""

from __future__ import annotations

import argparse
import logging
import sys

import torch

from .config import ConfigError, RunConfig
from .io import ManifestError, NiftiFormatError
from .pipeline import STAGES, PipelineError, run_pipeline

log = logging.getLogger("shortmr")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shortmr", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=STAGES)
    p.add_argument("--config", required=True, help="flat key = value run configuration")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.add_argument("--out", help="override the config's output_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    # one intra-op thread keeps CPU results reproducible run to run
    torch.set_num_threads(1)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    try:
        cfg = RunConfig.load(args.config, overrides)
        return run_pipeline(args.command, cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ManifestError, NiftiFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
