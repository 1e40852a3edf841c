import argparse

from app.cli.common import add_config_arguments, config_from_args
from app.services.pipeline import method_names, run_superres


def cmd_superres(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    report = run_superres(config, resume=not args.no_resume, force=args.force)
    psnr = "inf" if report.psnr_infinite else report.psnr_db
    print(f"{report.method}: psnr={psnr} niqe={report.niqe} perc_proxy={report.perc_proxy} ({config.output_dir})")
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("superres", help="run iterative 3D synchronization and evaluate the SR field")
    add_config_arguments(p)
    p.add_argument("--method", choices=method_names())
    p.add_argument("--out", help="run directory")
    p.add_argument("--no-resume", action="store_true", help="ignore completed rounds in the run directory")
    p.add_argument("--force", action="store_true", help="reuse a run directory holding a different config")
    p.set_defaults(handler=cmd_superres)
