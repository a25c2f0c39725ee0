import io
import json
import logging
import os
import time
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s: %(message)s"
RUN_LOG_FORMAT = "%(asctime)s - %(levelname)s [{problem}/{backend}]: %(message)s"


def initialize_logging(cfg: Optional[Any] = None, actual_logger=None) -> None:
    """Attaches console and run-log handlers.

    Without a config only the console handler is installed at INFO. With a config
    the level follows `cfg.logging.log_level`, records carry the problem type and
    backend, and everything is mirrored to `logs.log` in the output directory.
    """

    if actual_logger is None:
        actual_logger = logging.root
        logging.getLogger("sqlitedict").setLevel(logging.ERROR)
    else:
        actual_logger.handlers.clear()

    if cfg is None:
        level, fmt = logging.INFO, LOG_FORMAT
    else:
        level = getattr(logging, cfg.logging.log_level.upper(), logging.INFO)
        fmt = RUN_LOG_FORMAT.format(
            problem=cfg.problem_type, backend=cfg.detector.backend
        )

    actual_logger.setLevel(level)
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(logging.Formatter(fmt))
    actual_logger.addHandler(console_handler)

    if cfg is not None:
        os.makedirs(cfg.output_directory, exist_ok=True)
        file_handler = logging.FileHandler(
            filename=os.path.join(cfg.output_directory, "logs.log")
        )
        file_handler.setFormatter(logging.Formatter(fmt))
        actual_logger.addHandler(file_handler)


class TqdmToLogger(io.StringIO):
    """Progress-bar stream that goes to a logger instead of stdout."""

    def __init__(self, logger: logging.Logger, level: Optional[int] = None):
        super().__init__()
        self.logger = logger
        self.level = level or logging.INFO
        self.buf = ""

    def write(self, buf: str) -> int:
        self.buf = buf.strip("\r\n\t [A")
        return len(buf)

    def flush(self) -> None:
        if self.buf != "":
            self.logger.log(self.level, self.buf)
            self.buf = ""


def read_flags(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        return {}
    with open(path, "r") as file:
        return json.load(file)


def write_flag(path: str, key: str, value: str) -> None:
    """Sets one run flag (status, info) in the flags json.

    Every write also stamps `updated_at` so a stale "running" status can be told
    apart from a live one.

    Args:
        path: path to flag json
        key: key of the flag
        value: values of the flag
    """

    logger.debug(f"Writing flag {key}: {value}")

    flags = read_flags(path)
    flags[key] = value
    flags["updated_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")

    with open(path, "w") as file:
        json.dump(flags, file)
