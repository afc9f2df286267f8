import logging
import os
import sys
from datetime import datetime
from typing import List

class ColoredFormatter(logging.Formatter):
    """Custom formatter with colors for different log levels"""

    # ANSI color codes
    COLORS = {
        'DEBUG': '\033[36m',    # Cyan
        'INFO': '\033[32m',     # Green
        'WARNING': '\033[33m',  # Yellow
        'ERROR': '\033[31m',    # Red
        'CRITICAL': '\033[35m', # Magenta
        'RESET': '\033[0m'      # Reset
    }

    def format(self, record):
        # Color a copy so file handlers sharing the record stay plain
        record = logging.makeLogRecord(record.__dict__)
        level_color = self.COLORS.get(record.levelname, self.COLORS['RESET'])
        record.levelname = f"{level_color}{record.levelname}{self.COLORS['RESET']}"

        record.asctime = datetime.fromtimestamp(record.created).strftime('%Y-%m-%d %H:%M:%S')

        return super().format(record)

LOG_FORMAT = '%(asctime)s | %(levelname)s | %(name)s | %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

# Loggers handed out by LOGGER(), so run logs can be attached to all of them
_registered: List[logging.Logger] = []
_run_handlers: List[logging.Handler] = []

def _level() -> int:
    name = os.getenv('PARTROBUST_LOG_LEVEL', 'INFO').upper()
    return getattr(logging, name, logging.INFO)

def LOGGER(name: str) -> logging.Logger:
    """Create a configured logger instance"""
    logger = logging.getLogger(name)

    # Avoid adding multiple handlers
    if logger.handlers:
        return logger

    logger.setLevel(_level())

    handler = logging.StreamHandler(sys.stdout)
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(ColoredFormatter(fmt=LOG_FORMAT))
    logger.addHandler(handler)

    for run_handler in _run_handlers:
        logger.addHandler(run_handler)

    # Prevent propagation to avoid duplicate logs
    logger.propagate = False
    _registered.append(logger)

    return logger

def attach_run_log(path: str) -> logging.Handler:
    """Mirror every partrobust logger into a plain-text run log"""
    handler = logging.FileHandler(path, mode='a', encoding='utf-8')
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
    _run_handlers.append(handler)
    for logger in _registered:
        logger.addHandler(handler)
    return handler

def detach_run_log(handler: logging.Handler) -> None:
    """Remove a handler installed by attach_run_log and close its file"""
    if handler in _run_handlers:
        _run_handlers.remove(handler)
    for logger in _registered:
        if handler in logger.handlers:
            logger.removeHandler(handler)
    handler.close()
