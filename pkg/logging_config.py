import logging
import sys
import warnings
from pathlib import Path
from typing import Optional

from config import settings

APP_LOGGER_PREFIXES = (
    "services", "commands", "main", "__main__", "tensor", "functional", "models", "schemas", "storage",
    "errors", "config", "logging_config", "utils",
)


def setup_logging(log_dir: Optional[str] = None, level: Optional[str] = None):
    """Setup console and trace-file logging for a command run"""

    log_dir = Path(log_dir or settings.LOG_DIR)
    log_dir.mkdir(parents=True, exist_ok=True)
    log_level = getattr(logging, (level or settings.LOG_LEVEL).upper())

    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    # --- Console Handler ---
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(formatter)

    # --- Application Trace Handler (with UTF-8 encoding) ---
    # Only our own modules go to the trace file
    app_trace_handler = logging.FileHandler(log_dir / "app_trace.log", mode='w', encoding='utf-8')
    app_trace_handler.setLevel(log_level)
    app_trace_handler.setFormatter(formatter)

    class AppLogFilter(logging.Filter):
        def filter(self, record):
            return record.name.startswith(APP_LOGGER_PREFIXES)
    app_trace_handler.addFilter(AppLogFilter())

    # --- Root Logger Configuration ---
    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    root_logger.handlers = [console_handler, app_trace_handler]

    # --- Quieting Down Noisy Libraries ---
    # sklearn warns about ill-defined precision on classes never predicted; zero_division handles it
    warnings.filterwarnings("ignore", module="sklearn")

    logging.getLogger(__name__).debug(f"Logging configured. Trace file: {log_dir / 'app_trace.log'}")
