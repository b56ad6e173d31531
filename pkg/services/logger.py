# services/logger.py
import logging
import os
import sys

# Настройка базового логирования (в консоль)
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
logging.basicConfig(level=os.getenv("LOG_LEVEL", "INFO").upper(), format=LOG_FORMAT, stream=sys.stdout)
logger = logging.getLogger("eppinn")


class RunLogger:
    """Тонкая обёртка над logging для сообщений конвейера (фантом, фит, оценка, sweep)."""

    def __init__(self, base: logging.Logger = logger):
        self.base = base

    def set_level(self, level: str):
        self.base.setLevel(level.upper())

    def log_info(self, component: str, message: str, details: str = ""):
        """Информационное сообщение компонента."""
        self.base.info(f"[{component}] {message}" + (f": {details}" if details else ""))

    def log_warning(self, component: str, message: str, details: str = ""):
        self.base.warning(f"[{component}] {message}" + (f": {details}" if details else ""))

    def log_error(self, component: str, error: Exception, details: str = ""):
        """Логирование ошибок и исключений."""
        self.base.error(f"[ERROR:{component}] {error}" + (f": {details}" if details else ""))

    def log_case_event(self, case_id: str, event: str, details: str = ""):
        """Событие жизненного цикла конкретного кейса (генерация, фит, оценка)."""
        self.base.info(f"[CASE:{case_id}] {event}" + (f" - {details}" if details else ""))


run_logger = RunLogger()
