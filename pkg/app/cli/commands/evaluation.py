import argparse

from app.services.pipeline import run_compare, run_evaluate


def _print_table(paths) -> None:
    txt = next(p for p in paths if p.suffix == ".txt")
    print(txt.read_text(), end="")


def cmd_evaluate(args: argparse.Namespace) -> int:
    _print_table(run_evaluate(args.run_dirs, args.out, with_baseline=args.with_baseline))
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    _print_table(run_compare(args.run_dirs, args.out, with_baseline=args.with_baseline))
    return 0


def register(subparsers) -> None:
    for name, handler, text in (
        ("evaluate", cmd_evaluate, "re-render held-out views of each run and build the comparison table"),
        ("compare", cmd_compare, "build the comparison table from existing run reports"),
    ):
        p = subparsers.add_parser(name, help=text)
        p.add_argument("run_dirs", nargs="+", help="run directories")
        p.add_argument("--out", default=".", help="directory for comparison.{csv,txt,xlsx}")
        p.add_argument("--with-baseline", action="store_true", help="add the bicubic-of-LR row")
        p.set_defaults(handler=handler)
