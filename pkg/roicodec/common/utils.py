import hashlib
import json
import logging
import logging.config
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

LOGGING_CONFIG_PATH = Path(__file__).parent / "logging_config.json"


class CustomJSONEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, np.ndarray):
            # Convert NumPy arrays to lists
            return obj.tolist()
        elif isinstance(obj, np.generic):
            return obj.item()
        elif isinstance(obj, Enum):
            return obj.value
        elif isinstance(obj, Path):
            return str(obj)
        # Let the base class default method raise the TypeError
        return json.JSONEncoder.default(self, obj)


def setup_logging(level: Optional[str] = None) -> None:
    """Configure logging from the packaged dictConfig, optionally overriding the root level."""
    with open(LOGGING_CONFIG_PATH) as f:
        config = json.load(f)
    if level is not None:
        config["loggers"][""]["level"] = level.upper()
    logging.config.dictConfig(config)


def make_rng(seed: int, *streams: int) -> np.random.Generator:
    """Independent generator per (seed, stream...) so each stochastic choice has its own stream."""
    return np.random.default_rng([seed, *streams])


def sha256_digest(chunks: Iterable[bytes]) -> bytes:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.digest()


def dump_json(data, path) -> None:
    Path(path).write_text(json.dumps(data, indent=4, cls=CustomJSONEncoder))
