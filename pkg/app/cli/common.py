import argparse

from app.schemas import RunConfig
from app.services.pipeline import load_run_config


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    """Options shared by every command that reads a RunConfig."""
    parser.add_argument("--config", "-c", help="TOML or JSON run config")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable, JSON-parsed)",
    )
    parser.add_argument("--seed", type=int, help="global seed")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    return load_run_config(
        args.config, args.overrides, seed=args.seed,
        method=getattr(args, "method", None), output_dir=getattr(args, "out", None),
    )
