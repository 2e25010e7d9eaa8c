from typing import Annotated

from fastapi import Depends

from ..core.config import AppSettings, settings


def get_settings() -> AppSettings:
    return settings


Settings = Annotated[AppSettings, Depends(get_settings)]
