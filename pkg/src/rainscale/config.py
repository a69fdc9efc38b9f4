"""INI-style run configuration.

One section per command (``[synth]``, ``[train]``, ``[downscale]``,
``[evaluate]``, ``[track]``) plus ``[common]`` for keys shared by all of
them. Keys are the long option names with dashes or underscores, e.g.::

    [common]
    seed = 3

    [train]
    model = direct-cgan
    iterations = 400
    batch = 8

Command-line flags override the file.
"""

import configparser
from dataclasses import dataclass, field

from .errors import InvalidConfig, IoFailure
from .training import TrainConfig
from .tracker import TrackerConfig


def read_config(path):
    """Parse ``path`` into ``{section: {key: raw string}}``."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc
    return {s: {k.replace("-", "_"): v for k, v in parser.items(s)} for s in parser.sections()}


def coerce(raw, like, key):
    """Convert an INI string to the type of the argparse default ``like``."""
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise InvalidConfig(f"config key {key!r}: cannot parse {raw!r}") from None
    return raw


@dataclass
class RunConfig:
    command: str
    seed: int | None = None
    model: str | None = None
    paths: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    norm_overrides: dict = field(default_factory=dict)
