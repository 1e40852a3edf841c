import argparse
import logging

from app.cli.common import add_config_arguments, config_from_args
from app.services.pipeline import run_fit_lr, run_lock, run_pretrain

logger = logging.getLogger(__name__)


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    hashes = run_pretrain(config, force=args.force)
    for name, value in sorted(hashes.items()):
        print(f"{name}: {value}")
    return 0


def cmd_fit_lr(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    with run_lock(config.output_dir):
        field = run_fit_lr(config, config.output_dir, force=args.force)
    print(f"LR field ({field.grid_res}^3) saved under {config.output_dir}")
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("pretrain", help="train the latent codec, the denoiser and the NIQE model")
    add_config_arguments(p)
    p.add_argument("--force", action="store_true", help="retrain even when matching checkpoints exist")
    p.set_defaults(handler=cmd_pretrain)

    p = subparsers.add_parser("fit-lr", help="fit the low-resolution radiance field of a run")
    add_config_arguments(p)
    p.add_argument("--out", help="run directory")
    p.add_argument("--force", action="store_true", help="refit even when field_lr.bin exists")
    p.set_defaults(handler=cmd_fit_lr)
