import argparse
import logging

from app.cli.common import add_config_arguments, config_from_args
from app.services.pipeline import run_generate

logger = logging.getLogger(__name__)


def cmd_generate(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    files = run_generate(config, args.dataset_dir, force=args.force, corpus=args.corpus)
    logger.info("Wrote %d files", len(files))
    print(f"{len(files)} files written")
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("generate", help="render a synthetic scene (and optionally the pretraining corpus)")
    add_config_arguments(p)
    p.add_argument("--dataset-dir", help="target directory (default <data_root>/scenes/synthetic-<seed>)")
    p.add_argument("--corpus", action="store_true", help="also write the pretraining corpus scenes")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty target directory")
    p.set_defaults(handler=cmd_generate)
