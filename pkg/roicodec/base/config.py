import json
import logging
from pathlib import Path
from typing import Any

from roicodec.base.exceptions import ConfigError

logger = logging.getLogger(__name__)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: Any, default: Any) -> Any:
    """Convert `raw` to the type of `default`. Strings come from config files and CLI flags."""
    if not isinstance(raw, str):
        if isinstance(default, tuple) and isinstance(raw, list):
            return tuple(raw)
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [item for item in text.replace(" ", "").split(",") if item]
            kind = type(default[0]) if default else float
            return tuple(kind(item) for item in items)
    except ValueError as e:
        raise ConfigError(f"Invalid value {raw!r} for key '{key}': {e}") from e
    return text


class Config:
    """Defaults live as class attributes; instances hold the effective values.

    Subclasses only declare attributes. `from_file` reads `key = value` lines and
    rejects keys that no default declares.
    """

    seed: int = 0

    def __init__(self, **overrides: Any):
        self.update(**overrides)

    @classmethod
    def defaults(cls) -> dict[str, Any]:
        values = {}
        for klass in reversed(cls.__mro__):
            for key, value in vars(klass).items():
                if key.startswith("_") or callable(value) or isinstance(value, (classmethod, staticmethod, property)):
                    continue
                values[key] = value
        return values

    def update(self, **overrides: Any) -> "Config":
        defaults = self.defaults()
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in defaults:
                raise ConfigError(f"Unknown config key '{key}' for {type(self).__name__}")
            setattr(self, key, _coerce(key, value, defaults[key]))
        return self

    @staticmethod
    def parse_text(text: str) -> dict[str, str]:
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"Line {lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
        return values

    @classmethod
    def from_file(cls, path, **overrides: Any) -> "Config":
        path = Path(path).expanduser()
        try:
            values = cls.parse_text(path.read_text())
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e
        logger.debug(f"Loaded {len(values)} keys from {path}")
        config = cls(**values)
        return config.update(**overrides)

    def as_dict(self) -> dict[str, Any]:
        return {key: getattr(self, key) for key in self.defaults()}

    def to_text(self) -> str:
        lines = []
        for key, value in self.as_dict().items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    def echo(self, path) -> None:
        """Write the effective configuration as JSON next to an output file."""
        Path(path).write_text(json.dumps(self.as_dict(), indent=4, default=list))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.as_dict()})"
