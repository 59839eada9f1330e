"""Experiment configuration files.

UTF-8 text with ``[section]`` headers, ``key = value`` lines and ``#``
comments.  Every accepted key is declared in :data:`SCHEMA`; anything else
is rejected so typos never pass silently.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import fields

from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


def _optional(parse):
    def inner(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return inner


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_TRAIN_TYPES = {
    "hidden": _parse_ints,
    "recurrent": _parse_bool,
    "detach_reset": _parse_bool,
    "readout_decay": _optional(float),
    "clip_norm": _optional(float),
}


def _train_schema():
    out = {}
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        default = getattr(defaults, f.name)
        if f.name in _TRAIN_TYPES:
            parse = _TRAIN_TYPES[f.name]
        elif isinstance(default, bool):
            parse = _parse_bool
        elif isinstance(default, int):
            parse = int
        elif isinstance(default, float):
            parse = float
        else:
            parse = str
        out[f.name] = (parse, default)
    return out


SCHEMA = {
    "task": {
        "name": (str, "binary_adding"),
        "T": (int, 100),
        "train_size": (int, 50_000),
        "test_size": (int, 2_000),
        "seed": (int, 0),
        "balance": (str, "balanced"),
        "permutation_seed": (int, 2024),
        "mnist_dir": (str, ""),
        "limit_train": (int, 0),
        "limit_test": (int, 0),
    },
    "train": _train_schema(),
    "stp": {
        "theta_credit": (float, 2.0),
        "theta_temporal": (float, 2.0),
        "workers": (int, 3),
    },
    "energy": {
        "mode": (str, "analytic"),
        "archs": (lambda t: tuple(p for p in t.replace(",", " ").split() if p),
                  ("TCN", "SpikingTCN", "LSTM", "GSU", "Transformer", "SDT4", "SDT1")),
        "m": (int, 128), "n": (int, 256), "k": (int, 3), "h": (int, 512),
        "T": (int, 100), "T_in": (int, 1), "layers": (int, 1),
        **{name: (_optional(float), None) for name in
           ("f_in", "f_out", "f_conv2", "f_Q", "f_K", "f_V", "f_attn", "f_fc1", "f_fc2")},
        "e_ac": (float, 0.9),
        "e_mac": (float, 4.6),
        "checkpoint": (str, ""),
        "samples": (int, 256),
    },
    "output": {
        "dir": (str, "runs"),
        "data_dir": (str, ""),
    },
}

# sections whose keys feed the run hash; output paths do not change results
HASHED_SECTIONS = ("task", "train", "stp", "energy")


class ExperimentConfig:
    """Typed view of a config file; ``cfg["train"]["lr"]`` style access."""

    def __init__(self, values: dict | None = None):
        self.values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
        for sec, keys in (values or {}).items():
            for k, v in keys.items():
                self.set(sec, k, v)

    def __getitem__(self, section):
        return self.values[section]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        parse, _ = SCHEMA[section][key]
        if isinstance(value, str):
            try:
                value = parse(value)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: {exc}") from exc
        self.values[section][key] = value

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls()
        for section in cp.sections():
            for key, value in cp.items(section):
                cfg.set(section, key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as f:
            return cls.parse(f.read())

    def serialize(self) -> str:
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                out.write(f"{key} = {_fmt(self.values[section][key])}\n")
            out.write("\n")
        return out.getvalue()

    def apply_overrides(self, overrides: list[tuple[str, str]]) -> None:
        for dotted, value in overrides:
            if "." not in dotted:
                raise ConfigError(f"override {dotted!r} must look like section.key")
            section, key = dotted.split(".", 1)
            self.set(section, key, value)

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.values["train"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[train]: {exc}") from exc

    def run_hash(self, sections=HASHED_SECTIONS) -> str:
        blob = "".join(f"[{s}]" + repr(sorted(self.values[s].items())) for s in sections)
        return hashlib.sha256(blob.encode()).hexdigest()


def describe_keys() -> str:
    """Every accepted key with its default, for ``--help``."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default) in keys.items():
            lines.append(f"  {section}.{key} = {_fmt(default)}")
    return "\n".join(lines)
