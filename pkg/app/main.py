import logging
import sys
from typing import Optional, Sequence

from app.cli import build_parser
from app.core.config import settings
from app.core.errors import NerfSRError
from app.core.logging_config import run_context, setup_logging
from app.services.helpers import configure_torch

logger = logging.getLogger(__name__)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(
        level=settings.log_level,
        to_file=settings.log_to_file,
        file_path=settings.log_file_path,
        max_bytes=settings.log_max_bytes,
        backup_count=settings.log_backup_count,
    )
    configure_torch()
    try:
        with run_context(args.run_id, args.command):
            return args.handler(args)
    except NerfSRError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as e:
        logger.exception("Unexpected error in %s", args.command)
        print(f"error: {e!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
