import datetime
import os

from config.settings import settings


class RunClock:
    @staticmethod
    def get_current_date() -> str:
        utc_time = datetime.datetime.now(datetime.timezone.utc)
        return utc_time.strftime('%Y-%m-%dT%H:%M:%S+00:00')


def resolve_workers(requested: int = None) -> int:
    """Worker count from an explicit request or MBMAPQ_THREADS; 0 means one per CPU."""
    count = settings.MBMAPQ_THREADS if requested is None else requested
    if count <= 0:
        count = os.cpu_count() or 1
    return count
