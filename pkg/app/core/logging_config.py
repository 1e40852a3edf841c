import contextvars
import logging
import time
import uuid
from contextlib import contextmanager
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Iterator

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s [%(run_id)s] %(message)s"

# Id of the command invocation currently executing; "-" outside of one
run_id_var: contextvars.ContextVar[str] = contextvars.ContextVar("run_id", default="-")


class RunIdFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:  # type: ignore[override]
        record.run_id = run_id_var.get("-")
        return True


def _install(root: logging.Logger, handler: logging.Handler, formatter: logging.Formatter) -> None:
    handler.setFormatter(formatter)
    handler.addFilter(RunIdFilter())
    root.addHandler(handler)


def setup_logging(*, level: str = "INFO", to_file: bool = True, file_path: str = "logs/nerfsr.log", max_bytes: int = 10 * 1024 * 1024, backup_count: int = 5) -> None:
    formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt="%Y-%m-%d %H:%M:%S")

    root = logging.getLogger()
    # main() may be called repeatedly in one process (tests)
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))

    _install(root, logging.StreamHandler(), formatter)
    if to_file:
        path = Path(file_path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            _install(root, RotatingFileHandler(path, maxBytes=max_bytes, backupCount=backup_count), formatter)
        except OSError as e:
            logging.getLogger(__name__).warning("File logging disabled, cannot open %s: %s", path, e)

    for noisy in ("PIL", "matplotlib"):
        logging.getLogger(noisy).setLevel(logging.WARNING)


@contextmanager
def run_context(run_id: str | None = None, command: str = "-") -> Iterator[str]:
    """Tags every log record emitted inside the block with the run id and logs timing."""
    logger = logging.getLogger("run")
    start = time.perf_counter()
    rid = run_id or uuid.uuid4().hex[:12]
    token = run_id_var.set(rid)
    try:
        logger.info("%s started", command)
        yield rid
        logger.info("%s finished in %.1fs", command, time.perf_counter() - start)
    except BaseException:
        logger.error("%s failed after %.1fs", command, time.perf_counter() - start)
        raise
    finally:
        run_id_var.reset(token)
