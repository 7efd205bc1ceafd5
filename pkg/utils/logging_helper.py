import logging
import os
from pathlib import Path

import click

LOGGER_NAME = "fragalign"


class ClickEchoHandler(logging.Handler):
    """Write records to the current stderr via click, so redirected streams are honoured."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            click.echo(self.format(record), err=True)
        except Exception:
            self.handleError(record)


def logging_help(log_path: str | os.PathLike = "fragalign.log") -> logging.Logger:
    """
    Set up and return a logger named 'fragalign' that logs to both:
      1. A file which can be specified in log path
      2. Standard error in console

    Library modules log through children of this logger (e.g. 'fragalign.train').
    Calling this repeatedly is safe and never adds duplicate handlers.
    """

    Path(log_path).parent.mkdir(parents=True, exist_ok=True)

    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.INFO)
    # without this, each cli invocation in one process would add new handlers
    if not logger.handlers:
        fh = logging.FileHandler(log_path, mode="a", encoding="utf-8")
        sh = ClickEchoHandler()
        fmt = logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s")
        fh.setFormatter(fmt)
        sh.setFormatter(fmt)
        logger.addHandler(fh)
        logger.addHandler(sh)
    return logger


def get_logger(component: str) -> logging.Logger:
    """Child logger of 'fragalign' for a library component."""
    return logging.getLogger(f"{LOGGER_NAME}.{component}")
