import logging
from config import get_settings

_LOGGER_NAME = "robust_acopf"
_configured = False

def get_logger() -> logging.Logger:
    """Return the toolkit logger, configuring it from LOG_LEVEL on first use"""
    global _configured
    logger = logging.getLogger(_LOGGER_NAME)
    if not _configured:
        settings = get_settings()
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        logger.addHandler(handler)
        logger.setLevel(getattr(logging, str(settings.LOG_LEVEL).upper(), logging.INFO))
        logger.propagate = False
        _configured = True
    return logger

def log(message: str, level: str = "info"):
    """Log a message at the given level name"""
    getattr(get_logger(), level.lower(), get_logger().info)(message)

def banner():
    """Separator line around long-running phases"""
    log('~' * 80)
