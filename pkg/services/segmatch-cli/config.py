import os

from dotenv import load_dotenv

load_dotenv()

# Logging configuration
LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO").upper()
LOG_FORMAT = os.environ.get("SEGMATCH_LOG_FORMAT", "%(asctime)s - %(name)s - %(levelname)s - %(message)s")

# Progress bars go to stderr; disable for CI logs
SHOW_PROGRESS = os.environ.get("SEGMATCH_PROGRESS", "true").lower() in ("1", "true", "yes")
