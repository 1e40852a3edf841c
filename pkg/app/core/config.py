from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_prefix="NERFSR_", extra="ignore")

    # Default root for generated scenes, pretrained checkpoints and runs
    data_root: str = "data"
    # Logging
    log_level: str = "INFO"  # DEBUG, INFO, WARNING, ERROR
    log_to_file: bool = True
    log_file_path: str = "logs/nerfsr.log"
    log_max_bytes: int = 10 * 1024 * 1024  # 10 MB
    log_backup_count: int = 5
    # Compute
    torch_threads: int | None = None
    # Request deterministic kernels from torch (bit-reproducible reports)
    deterministic: bool = True


settings = Settings()
