import os
import logging
from logging.handlers import TimedRotatingFileHandler

# Loggers that are too chatty at INFO during long attack runs
QUIET_LOGGERS = ('urllib3', 'requests')


def setup_logging(name, log_file=None, level="INFO"):
    """
    Setup logger for a specific module, optionally with a rotating log file.
    """
    logger = logging.getLogger(name)
    level = logging.getLevelName(level.upper()) if isinstance(level, str) else level

    root_logger = logging.getLogger('')
    if not root_logger.hasHandlers():
        # Define the console handler
        console = logging.StreamHandler()
        console.setLevel(level)
        console.setFormatter(logging.Formatter('%(name)s - %(levelname)s - %(message)s'))
        root_logger.addHandler(console)
        root_logger.setLevel(level)

    if log_file is not None and not _has_file_handler(root_logger, log_file):
        # Define the log format
        log_format = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s', datefmt='%m/%d/%Y %I:%M:%S %p')

        # Define the TimedRotatingFileHandler
        file_handler = TimedRotatingFileHandler(log_file, when='D', interval=1, backupCount=6, encoding='utf-8')
        file_handler.setFormatter(log_format)
        file_handler.setLevel(level)
        root_logger.addHandler(file_handler)

    # Specific adjustments for HTTP client logs
    for quiet in QUIET_LOGGERS:
        logging.getLogger(quiet).setLevel(logging.WARNING)

    return logger


def _has_file_handler(root_logger, log_file):
    for handler in root_logger.handlers:
        if isinstance(handler, TimedRotatingFileHandler) and handler.baseFilename == os.path.abspath(log_file):
            return True
    return False
