# services/errors.py


class PerfusionError(ValueError):
    """Ошибка предметной области с машинно-читаемым кодом (например, 'invalid-params')."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        self.message = message
        super().__init__(f"{code}: {message}" if message else code)


class TrainingDiverged(PerfusionError):
    """Оптимизация разошлась (NaN в лоссе или неконечные карты). Хранит частичный trace."""

    def __init__(self, code: str, message: str = "", trace=None):
        super().__init__(code, message)
        self.trace = trace
