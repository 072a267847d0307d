"""
Logging utility for the hijacking lab.
"""
import logging
from typing import Optional

from config.settings import settings

# keys too bulky for an info line
_BULKY = ("report", "pipeline_steps")


def setup_logger(name: str = "hijacklens", level: Optional[str] = None) -> logging.Logger:
    """
    Set up a logger with consistent formatting.

    Args:
        name: Logger name
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL);
            HIJACKLENS_LOG_LEVEL when omitted

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)

    # Only configure if not already configured
    if not logger.handlers:
        handler = logging.StreamHandler()
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)
        logger.setLevel(getattr(logging, (level or settings.LOG_LEVEL).upper()))

    return logger


def set_level(level: str):
    """Change the level of every logger configured through setup_logger."""
    value = getattr(logging, level.upper())
    for logger in logging.Logger.manager.loggerDict.values():
        if isinstance(logger, logging.Logger) and logger.handlers:
            logger.setLevel(value)


def log_tool_execution(tool_name: str, input_data: dict, output_data: dict):
    """One info line per tool run; full payloads at debug level."""
    logger = setup_logger()
    summary = {k: v for k, v in output_data.items() if k not in _BULKY}
    status = "ok" if output_data.get("success") else f"exit {output_data.get('exit_code', 1)}"
    logger.info(f"{tool_name} {status}: {summary}")
    logger.debug(f"{tool_name} input: {input_data}")
    logger.debug(f"{tool_name} output: {output_data}")
