import logging
import sys

from config.settings import LOG_FILE, LOG_LEVEL

ROOT_LOGGER = "control_suite"


def setup_logger(name: str = ROOT_LOGGER) -> logging.Logger:
    """
    Logger under the control_suite hierarchy.

    Handlers live on the root suite logger only: the console (stderr, so
    JSON written to stdout by the CLI stays parseable) at LOG_LEVEL and
    control_suite.log at DEBUG. Module loggers propagate to it.
    """
    if name != ROOT_LOGGER and not name.startswith(ROOT_LOGGER + "."):
        name = f"{ROOT_LOGGER}.{name}"
    root = logging.getLogger(ROOT_LOGGER)

    if not root.handlers:
        root.setLevel(logging.DEBUG)
        formatter = logging.Formatter('%(asctime)s %(levelname)-7s [%(name)s] %(message)s')

        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(getattr(logging, LOG_LEVEL.upper(), logging.INFO))
        console_handler.setFormatter(formatter)
        root.addHandler(console_handler)

        file_handler = logging.FileHandler(LOG_FILE)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)

    return logging.getLogger(name)
