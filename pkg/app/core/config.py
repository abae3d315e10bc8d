from pydantic_settings import BaseSettings, SettingsConfigDict
from functools import lru_cache
from typing import Optional
import os

class Settings(BaseSettings):
    """Application settings and configuration"""

    # Application related
    APP_NAME: str = "Targeted Auction Learning Service"
    APP_VERSION: str = "1.0.0"
    DEBUG: bool = False
    HOST: str = "0.0.0.0"
    PORT: int = 8000
    LOG_LEVEL: str = "INFO"

    # Output storage
    RESULTS_DIR: str = "./results"

    # Numerics
    TOL: float = 1e-12
    ENUMERATION_CAP: int = 10_000_000
    MC_TRIALS: int = 100_000
    MC_CHUNK: int = 65_536
    DISCRETIZE_GRID: int = 10_000
    JUMP_EPS: float = 1e-9

    # Learner constants
    C_LOG: float = 1.0
    C_BOUND: float = 3.0
    C_INTERVAL: float = 64.0
    L_OVERRIDE: Optional[float] = None

    # Oracle / experiments
    DEFAULT_SEED: int = 0
    HOLDER_M: int = 2000
    BENCH_WORKERS: int = 4
    GENERATION_ATTEMPTS: int = 100

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

@lru_cache()
def get_settings():
    """Get cached settings instance"""
    return Settings()

settings = get_settings()

# Ensure the results directory exists on startup
os.makedirs(settings.RESULTS_DIR, exist_ok=True)
