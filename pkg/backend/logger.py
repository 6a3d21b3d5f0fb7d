# ======================================================
# backend/logger.py
# Centralized Logging Configuration
# ======================================================

import logging
import logging.handlers
import os
import sys
from typing import Optional

from config.app_config import LOG_LEVEL, LOG_FORMAT, LOG_DATE_FORMAT, LOGS_DIR

# ------------------------------------------------------
# LOG DIRECTORY
# ------------------------------------------------------
BASE_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
DEFAULT_LOG_DIR = os.path.join(BASE_DIR, LOGS_DIR)

QUIET_LOGGERS = ("PIL",)
_OWNED = "_tactile_handler"


def setup_logging(log_dir: Optional[str] = None, level: Optional[str] = None) -> str:
    """
    Global logging setup:
    - Console logging (configured level, default INFO)
    - Rotating application log (INFO+)
    - Rotating error log (ERROR+)
    - Captures unhandled exceptions

    Returns the log directory in use.
    """
    log_dir = log_dir or DEFAULT_LOG_DIR
    os.makedirs(log_dir, exist_ok=True)

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG)

    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATE_FORMAT)

    # -------------------------------
    # CONSOLE
    # -------------------------------
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO))
    console_handler.setFormatter(formatter)

    # -------------------------------
    # APP LOG (ROTATING)
    # -------------------------------
    app_file_handler = logging.handlers.RotatingFileHandler(
        os.path.join(log_dir, "app.log"),
        maxBytes=5 * 1024 * 1024,   # 5 MB
        backupCount=5,
        encoding="utf-8",
    )
    app_file_handler.setLevel(logging.INFO)
    app_file_handler.setFormatter(formatter)

    # -------------------------------
    # ERROR LOG (ROTATING)
    # -------------------------------
    error_file_handler = logging.handlers.RotatingFileHandler(
        os.path.join(log_dir, "error.log"),
        maxBytes=2 * 1024 * 1024,   # 2 MB
        backupCount=5,
        encoding="utf-8",
    )
    error_file_handler.setLevel(logging.ERROR)
    error_file_handler.setFormatter(formatter)

    # -------------------------------
    # REPLACE OUR HANDLERS (a second call re-targets, never duplicates)
    # -------------------------------
    for handler in list(root_logger.handlers):
        if getattr(handler, _OWNED, False):
            root_logger.removeHandler(handler)
            handler.close()
    for handler in (console_handler, app_file_handler, error_file_handler):
        setattr(handler, _OWNED, True)
        root_logger.addHandler(handler)

    # -------------------------------
    # THIRD-PARTY NOISE
    # -------------------------------
    # PIL logs every plugin lookup at DEBUG
    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)

    # -------------------------------
    # GLOBAL EXCEPTION HOOK
    # -------------------------------
    def handle_exception(exc_type, exc_value, exc_traceback):
        if issubclass(exc_type, KeyboardInterrupt):
            sys.__excepthook__(exc_type, exc_value, exc_traceback)
            return

        root_logger.critical(
            "UNHANDLED EXCEPTION",
            exc_info=(exc_type, exc_value, exc_traceback),
        )

    sys.excepthook = handle_exception

    root_logger.debug("Logging system initialized (log directory: %s)", log_dir)
    return log_dir
