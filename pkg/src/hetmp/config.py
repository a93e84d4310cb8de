"""Run configuration: a flat ``key = value`` text format.

Grammar, one entry per line::

    line    := blank | comment | entry
    comment := "#" any-text
    entry   := key "=" value [ "#" any-text ]
    key     := [a-z_][a-z0-9_]*

Values are parsed according to the field's type: ``true``/``false`` for
flags, decimal or scientific notation for numbers, bare text otherwise.
Unknown keys and unparsable values are errors. Command-line overrides are
applied on top of the file.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .layers import ModelConfig, build_model_config
from .train import FlagConfig, TrainConfig

_KEY = re.compile(r"^[a-z_][a-z0-9_]*$")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    data: str = "synthetic:small"      # synthetic:<preset> or a graph directory
    synth_seed: int = 0
    reverse_relations: bool = True
    # model
    hidden: int = 64
    num_layers: int = 2
    dropout: float = 0.5
    sim_attn: bool = True
    sim: bool = True
    norm: bool = True
    layout: str = "default"            # default | ogb
    coeff_mode: str = "sum"            # sum | softmax
    # features
    ft: bool = True
    feature_trainable: bool = True
    # FLAG
    flag: bool = True
    flag_steps: int = 3
    flag_alpha: float = 1e-3
    # optimisation
    lr: float = 0.004
    weight_decay: float = 0.0
    batch_size: int = 1024
    max_epochs: int = 100
    patience: int = 10
    fanout: str = "10"                 # per relation; comma list gives one value per hop
    seed: int = 0
    prefetch: int = 0
    deterministic: bool = False
    out: str = "runs/latest"           # output directory

    def __post_init__(self):
        if (self.sim_attn or self.sim) and not self.norm:
            raise ConfigError("sim_attn/sim require norm (the R-GSN update needs MsgNorm+LayerNorm)")
        if self.layout not in ("default", "ogb"):
            raise ConfigError(f"layout must be default or ogb, got {self.layout!r}")
        if self.coeff_mode not in ("sum", "softmax"):
            raise ConfigError(f"coeff_mode must be sum or softmax, got {self.coeff_mode!r}")
        if self.num_layers < 1 or self.hidden < 1:
            raise ConfigError("num_layers and hidden must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lr < 0 or self.patience < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("lr >= 0, patience >= 1, batch_size >= 1, max_epochs >= 0 required")
        if self.flag and (self.flag_steps < 1 or self.flag_alpha < 0):
            raise ConfigError("flag_steps >= 1 and flag_alpha >= 0 required")
        self.fanouts()

    def fanouts(self) -> tuple:
        parts = [p.strip() for p in str(self.fanout).split(",") if p.strip()]
        try:
            vals = [None if p in ("inf", "all") else int(p) for p in parts]
        except ValueError:
            raise ConfigError(f"fanout must be integers or 'all', got {self.fanout!r}") from None
        if any(v is not None and v < 1 for v in vals) or not vals:
            raise ConfigError("fanout values must be >= 1")
        if len(vals) == 1:
            vals = vals * self.num_layers
        if len(vals) != self.num_layers:
            raise ConfigError(f"{len(vals)} fanouts for {self.num_layers} layers")
        return tuple(vals)

    @property
    def knobs(self) -> dict:
        return {"sim_attn": self.sim_attn, "sim": self.sim, "norm": self.norm,
                "ft": self.ft, "flag": self.flag}

    def model_config(self, in_dim: int, num_classes: int) -> ModelConfig:
        return build_model_config(in_dim, num_classes, self.hidden, self.num_layers,
                                  sim_attn=self.sim_attn, sim=self.sim, norm=self.norm,
                                  dropout_p=self.dropout, layout=self.layout,
                                  coeff_mode=self.coeff_mode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
            max_epochs=self.max_epochs, patience=self.patience, fanouts=self.fanouts(),
            flag=FlagConfig(self.flag_steps, self.flag_alpha) if self.flag else None,
            ft_enabled=self.ft, feature_trainable=self.feature_trainable, seed=self.seed,
            prefetch=0 if self.deterministic else self.prefetch,
            deterministic=self.deterministic,
        )

    def to_text(self, skip=()) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)
                 if f.name not in skip]
        return "\n".join(lines) + "\n"

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, text: str, kind):
    text = text.strip()
    if kind is bool or kind == "bool":
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {text!r}")
    if kind is int or kind == "int":
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if kind is float or kind == "float":
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    if not text:
        raise ConfigError(f"{key}: empty value")
    return text


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_entries(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not _KEY.match(key):
            raise ConfigError(f"{source}:{lineno}: invalid key {key!r}")
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value, _TYPES[key])
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def coerce_overrides(pairs: dict) -> dict:
    out = {}
    for key, value in pairs.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = _coerce(key, value, _TYPES[key]) if isinstance(value, str) else value
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File values on top of defaults, then overrides, then HETMP_DETERMINISTIC."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{p}: no such config file")
        values.update(parse_entries(p.read_text(), str(p)))
    values.update(coerce_overrides(overrides or {}))
    if os.environ.get("HETMP_DETERMINISTIC") == "1":
        values["deterministic"] = True
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
