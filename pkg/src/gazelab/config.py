"""Experiment configuration: typed sections, INI loading, overrides, hashing.

Config files are INI (``configparser``): one ``[section]`` per dataclass
below, ``key = value`` lines. Lists are comma separated; region sets are
``;``-separated groups of ``+``-joined region names. ``--set section.key=v``
on the command line overrides the file.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SWEEP_EPS = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)
SWEEP_ALPHA = (4.0, 2.0, 1.0, 0.5, 0.25, 0.125)
REGION_SETS = ("eyes", "nose", "mouth", "others", "nose+mouth", "eyes+nose", "eyes+mouth",
               "eyes+nose+mouth", "all")


@dataclass
class RunParams:
    out_dir: str = "runs"
    dataset: str = ""
    model: str = ""
    hardened: str = ""
    fold: int = 0
    max_images: int = 0  # 0 keeps the whole fold, otherwise an evenly strided subset
    targets: tuple = ("Q1", "Q2", "Q3", "Q4")
    seed: int = 0
    workers: int = 1


@dataclass
class DataParams:
    seed: int = 7
    persons: int = 10
    per_person: int = 50


@dataclass
class TrainParams:
    kind: str = "single_input_cnn"
    init_seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9
    loss_kind: str = "mse_pitchyaw"
    seed: int = 1


@dataclass
class AttackParams:
    epsilon: float = 16.0
    alpha: float = 0.125
    eps_list: tuple = SWEEP_EPS
    alpha_list: tuple = SWEEP_ALPHA
    lambda_tv: float = 0.0


@dataclass
class RegionParams:
    epsilon: float = 32.0
    alpha: float = 0.25
    sets: tuple = REGION_SETS


@dataclass
class SmoothParams:
    epsilon: float = 16.0
    alpha: float = 0.5
    lambdas: tuple = (0.0, 0.1, 1.0, 10.0)
    n_examples: int = 4


@dataclass
class PatchParams:
    lambdas: tuple = (0.0, 1000.0, 5000.0)
    alpha: float = 1.0
    num_epochs: int = 5
    sample_fraction: float = 0.1
    steps_per_image: int = 20
    center_row: int = 29
    center_col: int = 38
    radius: int = 5
    landmark_clearance: bool = False


@dataclass
class DefenseParams:
    replay_m: int = 2
    epsilon: float = 32.0
    alpha: float = 8.0
    lambda_adv: float = 1.0
    eval_eps: tuple = (16.0, 32.0, 64.0)
    eval_alpha: float = 0.125


@dataclass
class SaliencyParams:
    sample: int = 0
    target: str = "Q1"
    epsilon: float = 16.0
    alpha: float = 0.5


@dataclass
class ExperimentConfig:
    command: str = ""
    run: RunParams = field(default_factory=RunParams)
    data: DataParams = field(default_factory=DataParams)
    train: TrainParams = field(default_factory=TrainParams)
    attack: AttackParams = field(default_factory=AttackParams)
    regions: RegionParams = field(default_factory=RegionParams)
    smooth: SmoothParams = field(default_factory=SmoothParams)
    patch: PatchParams = field(default_factory=PatchParams)
    defense: DefenseParams = field(default_factory=DefenseParams)
    saliency: SaliencyParams = field(default_factory=SaliencyParams)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls(command=d.get("command", ""))
        for name in SECTIONS:
            for key, value in d.get(name, {}).items():
                set_value(cfg, name, key, value)
        return cfg

    def digest(self, *sections: str) -> str:
        """Short sha256 of the named sections (all of them by default), canonical JSON."""
        d = self.to_dict()
        d["run"].pop("out_dir")
        d["run"].pop("workers")
        if sections:
            d = {k: d[k] for k in sections}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


SECTIONS = [f.name for f in dataclasses.fields(ExperimentConfig) if f.name != "command"]


def _coerce(value, kind, where: str):
    try:
        if isinstance(value, str):
            value = value.strip()
        if kind is bool:
            if isinstance(value, bool):
                return value
            lowered = str(value).lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        if kind is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot read {value!r} as {kind.__name__}") from None
    raise ConfigError(f"{where}: unsupported type {kind}")


def _list_items(value, sep: str) -> list:
    if isinstance(value, str):
        return [v.strip() for v in value.split(sep) if v.strip()]
    return list(value)


def set_value(cfg: ExperimentConfig, section: str, key: str, value) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    sub = getattr(cfg, section)
    fields = {f.name: f for f in dataclasses.fields(sub)}
    if key not in fields:
        raise ConfigError(f"unknown config key {section}.{key}")
    default = getattr(type(sub)(), key)
    where = f"{section}.{key}"
    if isinstance(default, tuple):
        if section == "regions" and key == "sets":
            items = _list_items(value, ";")
        else:
            items = _list_items(value, ",")
        kind = type(default[0]) if default else str
        value = tuple(_coerce(v, kind, where) for v in items)
        if not value:
            raise ConfigError(f"{where}: empty list")
    else:
        value = _coerce(value, type(default), where)
    setattr(sub, key, value)


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    for pair in pairs or ():
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"override '{pair}' is not section.key=value")
        lhs, value = pair.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        set_value(cfg, section, key, value)
    return cfg


def load_ini(path, cfg: typing.Optional[ExperimentConfig] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = cfg or ExperimentConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            set_value(cfg, section, key, value)
    return cfg


def dump_ini(cfg: ExperimentConfig) -> str:
    lines = []
    for name, values in cfg.to_dict().items():
        if name == "command":
            continue
        lines.append(f"[{name}]")
        for key, value in values.items():
            if isinstance(value, list):
                sep = "; " if (name, key) == ("regions", "sets") else ", "
                value = sep.join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def parse_region_set(text: str) -> tuple:
    from .data import REGIONS

    if text == "all":
        return tuple(REGIONS)
    parts = tuple(p.strip() for p in text.split("+") if p.strip())
    if not parts:
        raise ConfigError("empty region set")
    for p in parts:
        if p not in REGIONS:
            raise ConfigError(f"unknown region '{p}' (known: {', '.join(REGIONS)})")
    return parts
