"""
Configuration package
"""

from .env import config, EnvConfig

__all__ = ["config", "EnvConfig"]
