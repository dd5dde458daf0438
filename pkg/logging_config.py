import logging
import os
from datetime import datetime

import config


def setup_logging(log_directory=None, level=None):
    """Sets up the bloc_infer logger; library modules log through its children."""
    log_directory = config.log_dir if log_directory is None else log_directory
    level = config.log_level if level is None else level

    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    handlers = [logging.StreamHandler()]

    # An empty directory setting disables the log file
    if log_directory:
        os.makedirs(log_directory, exist_ok=True)
        log_filename = os.path.join(log_directory, f"bloc_infer_{datetime.now().strftime('%Y-%m-%d_%H-%M-%S')}.log")
        handlers.append(logging.FileHandler(log_filename))

    logger = logging.getLogger('bloc_infer')
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    for handler in handlers:
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    logger.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    return logger


# Initialize logger when this module is imported
logger = setup_logging()
