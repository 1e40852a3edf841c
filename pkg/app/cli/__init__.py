import argparse

from app.cli.commands import data, evaluation, superres, training


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nerfsr", description="Diffusion-guided 4x NeRF super-resolution")
    parser.add_argument("--run-id", help="tag for log records (random by default)")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in (data, training, superres, evaluation):
        module.register(subparsers)
    return parser
