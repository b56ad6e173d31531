# config.py
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from dotenv import load_dotenv

from services.errors import PerfusionError

# Загружаем переменные из .env
load_dotenv()


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() in ("true", "1", "yes", "on")


@dataclass
class RuntimeConfig:
    """Параметры окружения: потоки, детерминизм, уровень логов."""
    threads: int = int(os.getenv("EPPINN_THREADS", 1))
    deterministic: bool = _env_bool("EPPINN_DETERMINISTIC", "true")
    log_level: str = os.getenv("LOG_LEVEL", "INFO")
    allow_overwrite: bool = _env_bool("EPPINN_FORCE", "false")


@dataclass
class DeconvConfig:
    """Конфигурация классических методов деконволюции (SVD, bcSVD, boxNLR)."""
    svd_truncation: float = 0.2
    bcsvd_truncation: float = 0.1
    padding_factor: int = 2
    mtt_cap: float = 60.0
    # boxNLR: границы параметров (cbv ml/100g, mtt s, delay s)
    nlr_cbv_bounds: tuple = (0.0, 40.0)
    nlr_mtt_bounds: tuple = (0.5, 30.0)
    nlr_delay_bounds: tuple = (0.0, 15.0)
    # Грубая сетка перед локальным уточнением
    nlr_cbv_grid: tuple = (0.05, 20.0, 16)
    nlr_mtt_grid: tuple = (1.0, 30.0, 16)
    nlr_delay_grid: tuple = (0.0, 15.0, 16)
    nlr_max_iter: int = 200

    def validate(self):
        # 0 допускается только как "без усечения" (тесты против плотного решения)
        for name in ("svd_truncation", "bcsvd_truncation"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise PerfusionError("invalid-config", f"{name}={value} must be in [0, 1)")
        if self.padding_factor < 2:
            raise PerfusionError("invalid-config", "padding_factor must be >= 2")
        if self.nlr_max_iter <= 0:
            raise PerfusionError("invalid-config", "nlr_max_iter must be positive")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "DeconvConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise PerfusionError("invalid-config", f"unknown deconv keys: {sorted(unknown)}")
        cleaned = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**cleaned).validate()


ABLATION_FLAGS = (
    "no_adaptive_hash",
    "no_aif_pretrain",
    "no_annealing",
    "no_cbv_param",
    "no_phys_init",
    "no_evidential",
    "no_anticollapse",
)


@dataclass
class TrainConfig:
    """Все параметры одной сессии EPPINN на кейс. Сериализуется в resolved_config.json."""
    iterations: int = 5000
    aif_pretrain_iters: int = 5000
    batch_samples: int = 25000
    learning_rate: float = 1e-3
    aif_learning_rate: float = 1e-3
    warmup_fraction: float = 0.3

    lambda_data: float = 1.0
    lambda_res: float = 1.0
    lambda_edl: float = 0.5
    lambda_reg: float = 1e-3
    lambda_ac: float = 1e-2
    lambda_pr: float = 1e-1

    eps_p: float = 0.05
    delay_min: float = 0.0
    delay_max: float = 15.0
    mtt_max: float = 30.0
    mtt_floor: float = 0.1

    # Масштабы активаций головы параметров
    scale_cbv: float = 6.0
    scale_mtt: float = 12.0
    scale_delay: float = 2.0
    scale_cbf: float = 30.0

    # Архитектура
    aif_hidden: int = 16
    tissue_hidden: int = 128
    param_hidden: int = 64
    hidden_layers: int = 3
    omega0: float = 15.0
    hash_levels: int = 8
    hash_log2_table: int = 14
    hash_features: int = 2
    hash_base_resolution: int = 4
    hash_growth: float = 1.5

    residual_margin: float = 0.5
    aif_extension: str = "zero"
    trace_every: int = 50
    coverage_samples: int = 20000
    coverage_time_points: int = 32
    seed: int = 0

    # Флаги абляций
    no_adaptive_hash: bool = False
    no_aif_pretrain: bool = False
    no_annealing: bool = False
    no_cbv_param: bool = False
    no_phys_init: bool = False
    no_evidential: bool = False
    no_anticollapse: bool = False

    def validate(self) -> "TrainConfig":
        lambdas = {k: v for k, v in asdict(self).items() if k.startswith("lambda_")}
        negative = [k for k, v in lambdas.items() if v < 0]
        if negative:
            raise PerfusionError("invalid-config", f"negative loss weights: {negative}")
        if self.iterations <= 0:
            raise PerfusionError("invalid-config", "iterations must be positive")
        if self.batch_samples < 2:
            raise PerfusionError("invalid-config", "batch_samples must be >= 2")
        if self.aif_extension not in ("zero", "hold"):
            raise PerfusionError("invalid-config", f"aif_extension={self.aif_extension!r}")
        if self.eps_p <= 0 or self.mtt_floor <= 0:
            raise PerfusionError("invalid-config", "eps_p and mtt_floor must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **overrides) -> "TrainConfig":
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise PerfusionError("invalid-config", f"unknown config keys: {sorted(unknown)}")
        return cls(**data).validate()


def load_run_config(path) -> tuple[TrainConfig, DeconvConfig]:
    """Читает JSON конфиг запуска: плоские поля TrainConfig + необязательный объект 'deconv'."""
    if path is None:
        return TrainConfig(), DeconvConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise PerfusionError("invalid-config", f"cannot read {path}: {e}") from e
    if not isinstance(data, dict):
        raise PerfusionError("invalid-config", "config root must be a JSON object")
    # resolved_config.json хранит метод рядом с полями конфига
    data.pop("method", None)
    deconv = DeconvConfig.from_dict(data.pop("deconv", {}))
    return TrainConfig.from_dict(data), deconv


@dataclass
class Config:
    """Общая конфигурация приложения"""
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    deconv: DeconvConfig = field(default_factory=DeconvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


# Инициализация объекта конфигурации
conf = Config()
