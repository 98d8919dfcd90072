import os

from dotenv import load_dotenv

load_dotenv()


class Settings:
    def __init__(self):

        # Truncation defaults
        self.MBMAPQ_EPS = float(os.environ.get('MBMAPQ_EPS', '1e-6'))
        self.MBMAPQ_NP = int(os.environ.get('MBMAPQ_NP', '300'))

        # Iteration caps
        self.MBMAPQ_MAX_SWEEPS = int(os.environ.get('MBMAPQ_MAX_SWEEPS', '100000'))
        self.MBMAPQ_M_LIMIT = int(os.environ.get('MBMAPQ_M_LIMIT', '20000'))
        self.MBMAPQ_FIELD_BUDGET = int(os.environ.get('MBMAPQ_FIELD_BUDGET', '20000000'))

        # Process settings
        self.MBMAPQ_THREADS = int(os.environ.get('MBMAPQ_THREADS', '0'))
        self.MBMAPQ_LOG_LEVEL = os.environ.get('MBMAPQ_LOG_LEVEL', 'INFO')

        self.TOOL_VERSION = "0.1.0"

settings = Settings()
