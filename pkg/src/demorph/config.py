"""Run configuration: defaults, built-in profiles and the key=value file format.

Resolution order, later wins: field defaults, ``--profile``, ``--config``
file, explicit command-line flags.

File format: one ``key = value`` per line, ``#`` starts a comment, blank
lines ignored. Keys are the :class:`RunConfig` field names. Booleans accept
true/false/1/0/yes/no.
"""

import dataclasses
from dataclasses import dataclass, fields
from typing import get_type_hints

from ._validation import ConfigurationError
from .demorpher import TrainConfig


@dataclass
class RunConfig:
    # training
    T: int = 300
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 16
    img_size: int = 32
    seed: int = 0
    time_embed_dim: int = 32
    base_width: int = 32
    activation: str = "silu"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_min: int = 1
    clean_fraction: float = 0.0
    # dataset
    n_ids: int = 64
    n_morphs: int = 320
    warp_strength: float = 0.015
    blend: float = 0.5
    train_fraction: float = 0.8
    # paths
    data_dir: str = "data"
    checkpoint: str = "model.sdmf"
    report_dir: str = "reports"
    # behaviour
    mode: str = "direct"
    checkpoint_every: int = 10
    hist_bins: int = 20

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names}).validate()

    def validate(self):
        self.train_config()
        if self.mode not in ("direct", "iterative"):
            raise ConfigurationError(f"mode must be direct or iterative, got {self.mode!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must lie in (0, 1)")
        if self.checkpoint_every < 1 or self.hist_bins < 1:
            raise ConfigurationError("checkpoint_every and hist_bins must be positive")
        return self

    def to_text(self):
        lines = [f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def updated(self, **changes):
        return dataclasses.replace(self, **changes)


PROFILES = {
    "smoke": dict(img_size=16, n_ids=24, n_morphs=40, epochs=10, base_width=8, batch_size=8,
                  clean_fraction=0.5, checkpoint_every=5),
    "standard": dict(img_size=32, n_ids=64, n_morphs=640, epochs=120, base_width=16, batch_size=8,
                     clean_fraction=1.0),
}


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name, text, typ):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigurationError(f"config key {name!r}: cannot parse {text!r} as {typ.__name__}") from None


_TYPES = get_type_hints(RunConfig)


def parse_config_text(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, val, _TYPES[key])
    return out


def resolve(profile=None, config_path=None, overrides=None):
    """Build a validated :class:`RunConfig` from the layered sources."""
    values = {}
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        values.update(PROFILES[profile])
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {config_path}: {exc}") from exc
        values.update(parse_config_text(text, str(config_path)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values).validate()
