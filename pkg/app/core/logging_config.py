import logging
import sys


def setup_logging(level: int = logging.INFO) -> logging.Logger:
    """
    Configure logging for the toolkit.

    Sets up logging to stdout with plain messages. Training loops, probes and
    CLI commands all log through the returned "cfprobe" logger.
    """
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[logging.StreamHandler(sys.stdout)]
    )

    # Reduce plotting / imaging noise in logs
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)

    return logging.getLogger("cfprobe")


def set_log_level(level_name: str) -> None:
    """Adjust the toolkit log level from a CLI flag such as "debug"."""
    level = getattr(logging, level_name.upper(), None)
    if not isinstance(level, int):
        raise ValueError(f"Unknown log level: {level_name}")
    logger.setLevel(level)


# Create global logger instance
logger = setup_logging()
