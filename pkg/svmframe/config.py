import os
from typing import Optional
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings read from the environment."""

    model_config = SettingsConfigDict(case_sensitive=False, extra="ignore")

    # Output
    svmframe_output_dir: Optional[str] = Field(default=None, description="Overrides output.directory of the scenario")

    # Logging
    log_level: str = Field(default="INFO")
    log_file: Optional[str] = Field(default=None)

    # Linear solver
    solver_max_restarts: int = Field(default=3, ge=1, description="Warm-started restarts of the Crank-Nicolson solve")

    def output_dir(self, fallback: str) -> str:
        """Output directory after the env override, created on demand."""
        path = self.svmframe_output_dir or fallback
        os.makedirs(path, exist_ok=True)
        return path


# Global settings instance
settings = Settings()
