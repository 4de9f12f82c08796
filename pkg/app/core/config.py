import os
from pathlib import Path
from typing import Optional
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Only the cache directory is read from the environment; everything else
    # belongs to the layered RunConfig (app/schemas/run_config.py).
    CFPROBE_CACHE_DIR: Path = Path(os.path.expanduser("~/.cache/cfprobe"))

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore"
    )

    @property
    def cache_dir(self) -> Path:
        self.CFPROBE_CACHE_DIR.mkdir(parents=True, exist_ok=True)
        return self.CFPROBE_CACHE_DIR


class LazySettings:
    _instance: Optional[Settings] = None

    def _load(self) -> Settings:
        # Always recreate if needed (fresh env)
        self._instance = Settings()
        return self._instance

    def __getattr__(self, name):
        settings = self._load()
        return getattr(settings, name)


settings = LazySettings()
