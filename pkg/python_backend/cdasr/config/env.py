"""
Environment configuration.
Loads the repository `.env` file and exposes typed settings.
"""

import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

env_path = Path(__file__).parent.parent.parent.parent / ".env"
load_dotenv(env_path)


class EnvConfig:
    """Settings read from the process environment."""

    @property
    def DEBUG(self) -> bool:
        return os.getenv("DEBUG", "false").lower() == "true"

    @property
    def LOG_LEVEL(self) -> str:
        return os.getenv("LOG_LEVEL", "INFO").upper()

    @property
    def LOG_FORMAT(self) -> str:
        """`json` (default) or `console`."""
        return os.getenv("LOG_FORMAT", "json").lower()

    @property
    def CDASR_ENCODER_CACHE(self) -> Optional[str]:
        """Directory holding (or receiving) the pretrained image-encoder weights."""
        return os.getenv("CDASR_ENCODER_CACHE") or None

    @property
    def CDASR_PERCEPTUAL_WEIGHTS(self) -> Optional[str]:
        """Optional local weight file for the perceptual backbone."""
        return os.getenv("CDASR_PERCEPTUAL_WEIGHTS") or None

    def encoder_cache_dir(self) -> Optional[Path]:
        cache = self.CDASR_ENCODER_CACHE
        if not cache:
            return None
        path = Path(cache).expanduser()
        path.mkdir(parents=True, exist_ok=True)
        return path

    def describe(self) -> dict:
        """Snapshot of the settings recorded into run directories."""
        return {
            "debug": self.DEBUG,
            "log_level": self.LOG_LEVEL,
            "log_format": self.LOG_FORMAT,
            "encoder_cache": self.CDASR_ENCODER_CACHE,
            "perceptual_weights": self.CDASR_PERCEPTUAL_WEIGHTS,
        }


config = EnvConfig()
