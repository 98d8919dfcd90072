import logging
from functools import wraps
from time import perf_counter

from config.settings import settings

logger = logging.getLogger(__name__)


def log_stage(name: str):
    """Decorator logging start, finish and wall-clock of a pipeline stage"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            start = perf_counter()
            logger.debug(f"{name}: started")
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                logger.error(f"{name} failed after {perf_counter() - start:.2f}s: {str(e)}")
                raise
            logger.info(f"{name}: done in {perf_counter() - start:.2f}s")
            return result
        return wrapper
    return decorator


class BaseService:
    """Base class for all services with common functionality"""

    def __init__(self):
        self.max_sweeps = settings.MBMAPQ_MAX_SWEEPS
        self.m_limit = settings.MBMAPQ_M_LIMIT
        self._setup_logging()

    def _setup_logging(self):
        """Setup logging configuration"""
        logging.basicConfig(
            level=getattr(logging, settings.MBMAPQ_LOG_LEVEL.upper(), logging.INFO),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
