import os
from typing import Optional

from dotenv import load_dotenv

from core.errors import ConfigurationError

load_dotenv()


def _env_int(name: str, default: int) -> int:
    return int(os.getenv(name, str(default)))


def _env_float(name: str, default: float) -> float:
    return float(os.getenv(name, str(default)))


class Settings:
    """Configuration settings for the hijacking lab."""

    # Seed used when the CLI gets no --seed flag
    SEED = _env_int("HIJACKLENS_SEED", 42)
    SEED_FROM_ENV = os.getenv("HIJACKLENS_SEED") is not None

    LOG_LEVEL = os.getenv("HIJACKLENS_LOG_LEVEL", "INFO")
    OUTPUT_DIR = os.getenv("HIJACKLENS_OUTPUT_DIR", "./artifacts")
    WORKERS = _env_int("HIJACKLENS_WORKERS", 1)

    # Toy model dimensions
    LAYERS = _env_int("HIJACKLENS_LAYERS", 4)
    HEADS = _env_int("HIJACKLENS_HEADS", 4)
    D_MODEL = _env_int("HIJACKLENS_DMODEL", 32)
    VOCAB = _env_int("HIJACKLENS_VOCAB", 64)
    N_VISION = _env_int("HIJACKLENS_NVISION", 16)
    MAX_SEQ = _env_int("HIJACKLENS_MAX_SEQ", 64)

    # Calibration and intervention knobs
    N_SCENES = _env_int("HIJACKLENS_SCENES", 50)
    ALPHA = _env_float("HIJACKLENS_ALPHA", 0.1)
    BETA = _env_float("HIJACKLENS_BETA", 0.0)
    K = _env_int("HIJACKLENS_K", 8)
    IQR_MULT = _env_float("HIJACKLENS_IQR_MULT", 1.5)
    # 16 vision tokens make the 5% mass prefix a single token
    SALIENT_FRAC = _env_float("HIJACKLENS_SALIENT_FRAC", 0.75)
    T = _env_int("HIJACKLENS_T", 5)
    KTOP = _env_int("HIJACKLENS_KTOP", 10)
    MAX_NEW = _env_int("HIJACKLENS_MAX_NEW", 10)

    @classmethod
    def resolve_seed(cls, flag_value: Optional[int]) -> int:
        """Explicit flag wins; otherwise the environment, otherwise the default."""
        if flag_value is not None:
            return flag_value
        env_seed = os.getenv("HIJACKLENS_SEED")
        try:
            return int(env_seed) if env_seed is not None else cls.SEED
        except ValueError as e:
            raise ConfigurationError(f"HIJACKLENS_SEED must be an integer, got {env_seed!r}") from e

    @classmethod
    def validate(cls):
        """Validate that defaults are inside the ranges the modules accept."""
        if cls.WORKERS < 1:
            raise ConfigurationError("HIJACKLENS_WORKERS must be >= 1")
        if not 0.0 < cls.SALIENT_FRAC <= 1.0:
            raise ConfigurationError("HIJACKLENS_SALIENT_FRAC must be in (0, 1]")
        if cls.ALPHA < 0:
            raise ConfigurationError("HIJACKLENS_ALPHA must be >= 0")
        if not 0.0 <= cls.BETA <= 1.0:
            raise ConfigurationError("HIJACKLENS_BETA must be in [0, 1]")
        if cls.IQR_MULT < 0:
            raise ConfigurationError("HIJACKLENS_IQR_MULT must be >= 0")
        return True


# Create a global settings instance
settings = Settings()
