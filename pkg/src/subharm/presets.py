"""Named, versioned scenario presets shipped with the package."""

from __future__ import annotations

import json
from importlib import resources

from .errors import ConfigError
from .sim import ScenarioSpec

_PRESET_DIR = "presets"


def list_presets() -> list[str]:
    files = resources.files(__package__).joinpath(_PRESET_DIR)
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> ScenarioSpec:
    files = resources.files(__package__).joinpath(_PRESET_DIR)
    path = files.joinpath(f"{name}.json")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {list_presets()}") from None
    return ScenarioSpec.from_dict(obj)
