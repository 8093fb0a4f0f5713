"""Usage:

from app.env import Mode, mode, settings

if mode == Mode.PROD:
    print("Running in deployed service")
else:
    print("Running in development workspace")

if settings.vertex_cap < 64:
    ...
"""

import os
from enum import Enum

import dotenv
from pydantic import BaseModel

dotenv.load_dotenv()


class Mode(str, Enum):
    DEV = "development"
    PROD = "production"


mode = Mode.PROD if os.environ.get("HDX_SERVICE_TYPE") == "prod" else Mode.DEV


class Settings(BaseModel):
    # Caps that guard exhaustive work; every one can be overridden via HDX_<NAME>
    vertex_cap: int = 64
    level_cap: int = 2_000_000
    exact_rational_facets: int = 10_000
    dense_eig_cap: int = 4000
    link_cap: int = 5000
    grassmann_cap: int = 256
    exact_enum_cap: int = 10_000_000
    ug_exact_cap: int = 10_000_000
    coboundary_exact_cap: int = 1_000_000
    triangle_enum_cap: int = 200_000
    exhaustive_n_cap: int = 24
    lift_enum_cap: int = 20_000
    default_trials: int = 100_000
    workers: int = 0
    log_level: str = "INFO"


def _load_settings() -> Settings:
    values = {}
    for name, field in Settings.model_fields.items():
        raw = os.environ.get(f"HDX_{name.upper()}")
        if raw is None:
            continue
        values[name] = raw if field.annotation is str else int(raw)
    return Settings(**values)


settings = _load_settings()

__all__ = [
    "Mode",
    "mode",
    "Settings",
    "settings",
]
