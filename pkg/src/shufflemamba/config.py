"""Flat ``key = value`` run configuration."""

import hashlib
from dataclasses import fields

from .net import NetworkConfig
from .train import TrainConfig

REQUIRED_TRAIN = ("steps", "batch_size", "lr", "lr_min")


class ConfigError(ValueError):
    pass


def parse_kv(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(cls, name, value):
    typ = {f.name: f.type for f in fields(cls)}[name]
    try:
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
    except ValueError:
        raise ConfigError(f"key {name!r}: cannot parse {value!r}") from None
    return value


def load_config(text, require_train=True):
    """Parse a run config into ``(NetworkConfig, TrainConfig)``.

    Every network key is required, as are the core training keys; unknown
    keys are rejected.
    """
    kv = parse_kv(text)
    net_keys = [f.name for f in fields(NetworkConfig)]
    train_keys = [f.name for f in fields(TrainConfig)]
    unknown = sorted(set(kv) - set(net_keys) - set(train_keys))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    required = net_keys + (list(REQUIRED_TRAIN) if require_train else [])
    for key in required:
        if key not in kv:
            raise ConfigError(f"missing config key: {key}")
    try:
        ncfg = NetworkConfig(**{k: _coerce(NetworkConfig, k, kv[k]) for k in net_keys})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    tcfg = TrainConfig(**{k: _coerce(TrainConfig, k, kv[k]) for k in train_keys if k in kv})
    return ncfg, tcfg


def dump_config(ncfg, tcfg=None):
    lines = [f"{f.name} = {getattr(ncfg, f.name)}" for f in fields(NetworkConfig)]
    if tcfg is not None:
        lines += [f"{f.name} = {getattr(tcfg, f.name)}" for f in fields(TrainConfig)]
    return "\n".join(lines) + "\n"


def content_hash(text):
    return hashlib.sha256(text.encode()).hexdigest()[:16]
