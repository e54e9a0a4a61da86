"""Run configuration: TOML files, defaults, and building data/network/optimizer from them.

The defaults reproduce the desk-scale synthetic benchmark (64 channels,
4 classes, one hidden layer of 32, 150 steps of 1 ms).
"""

from __future__ import annotations

import copy
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SpikingDataset, load_hdf5_dataset, synthetic_delay_task
from .eventprop import LossConfig
from .model import HIDDEN, InitConfig, NetworkSpec, NeuronParams, init_parameters, make_network
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "hdf5"
    path: str | None = None
    dt: float = 1.0
    n_timesteps: int = 150
    max_duration: float | None = None
    n_classes: int = 4
    n_channels: int = 64
    n_train: int = 400
    n_valid: int = 100
    n_test: int = 200
    jitter_sd: float = 0.5
    spread: float = 50.0
    min_separation: float = 25.0
    shift: float = 70.0
    group_size: int = 2
    seed: int = 0


@dataclass
class NetworkConfig:
    architecture: str = "feedforward"
    hidden: list[int] = field(default_factory=lambda: [32])
    delays_trainable: bool = True
    recurrent_delays_trainable: bool | None = None
    max_delay: float | None = None
    tau_mem: float = 20.0
    tau_syn: float = 5.0
    v_threshold: float = 1.0
    v_reset: float = 0.0


@dataclass
class InitSection:
    # (mean, sd) for weights and [low, high] for delays, per projection role
    input: InitConfig = field(default_factory=lambda: InitConfig(0.2, 0.2, 0.0, 30.0))
    hidden: InitConfig = field(default_factory=lambda: InitConfig(0.0, 0.2, 0.0, 30.0))
    recurrent: InitConfig = field(default_factory=lambda: InitConfig(0.0, 0.05, 0.0, 0.0))
    output: InitConfig = field(default_factory=lambda: InitConfig(0.0, 0.3, 0.0, 0.0))
    seed: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    init: InitSection = field(default_factory=InitSection)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=50, batch_size=32, lr_weights=2e-3, lr_delays=2.0,
        loss=LossConfig(reg_strength=1e-3, target_rate=14.0)))

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items() if v is not None}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _fill(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"[{where}] unknown key(s): {', '.join(sorted(unknown))}")
    kw = {}
    for k, v in values.items():
        if k in ("input", "hidden", "recurrent", "output") and cls is InitSection:
            kw[k] = InitConfig(**{**asdict(getattr(InitSection(), k)), **v})
        elif k == "loss" and cls is TrainConfig:
            kw[k] = _fill(LossConfig, v, f"{where}.loss")
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - {"data", "network", "init", "train"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    base = RunConfig()
    merged = {
        "data": {**asdict(base.data), **d.get("data", {})},
        "network": {**asdict(base.network), **d.get("network", {})},
        "train": {**{k: v for k, v in asdict(base.train).items() if k != "loss"}, **d.get("train", {})},
    }
    merged["train"]["loss"] = {**asdict(base.train.loss), **d.get("train", {}).get("loss", {})}
    cfg = RunConfig(
        _fill(DataConfig, merged["data"], "data"),
        _fill(NetworkConfig, merged["network"], "network"),
        _fill(InitSection, d.get("init", {}), "init"),
        _fill(TrainConfig, merged["train"], "train"),
    )
    validate_config(cfg)
    return cfg


def load_config(path) -> RunConfig:
    """TOML config, or a run manifest / plain JSON config (``.json``)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    if path.suffix == ".json":
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if "command" in raw and "config" in raw:
            raw = raw["config"]
        return config_from_dict(raw)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def override(cfg: RunConfig, dotted: dict) -> RunConfig:
    """Apply ``{"train.epochs": 3, ...}`` style overrides (flags win over file values)."""
    d = cfg.to_dict()
    for key, value in dotted.items():
        if value is None:
            continue
        node = d
        *head, last = key.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = value
    return config_from_dict(d)


def validate_config(cfg: RunConfig) -> None:
    if cfg.data.source not in ("synthetic", "hdf5"):
        raise ConfigError(f"[data] source must be 'synthetic' or 'hdf5', got {cfg.data.source!r}")
    if cfg.network.architecture not in ("feedforward", "recurrent"):
        raise ConfigError(f"[network] unknown architecture {cfg.network.architecture!r}")
    if not cfg.network.hidden or any(int(h) < 1 for h in cfg.network.hidden):
        raise ConfigError("[network] hidden must list at least one positive layer size")
    if cfg.data.dt <= 0 or cfg.data.n_timesteps < 1:
        raise ConfigError("[data] dt and n_timesteps must be positive")
    if cfg.train.epochs < 0:
        raise ConfigError("[train] epochs must be >= 0")


def load_data(cfg: RunConfig, path=None) -> dict[str, SpikingDataset]:
    """Returns the available splits; hdf5 sources must provide train and test files."""
    d = cfg.data
    if d.source == "synthetic" and path is None:
        return synthetic_delay_task(d.n_classes, d.n_channels, (d.n_train, d.n_valid, d.n_test), d.jitter_sd, d.seed,
                                    spread=d.spread, min_separation=d.min_separation, shift=d.shift,
                                    group_size=d.group_size)
    path = Path(path or d.path or "")
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if path.is_file():
        split = next((k for k in ("train", "valid", "test") if path.stem.endswith(f"_{k}")), "train")
        return {split: load_hdf5_dataset(path, split)}
    out = {}
    for split in ("train", "valid", "test"):
        if any(path.glob(f"*_{split}.h5")):
            out[split] = load_hdf5_dataset(path, split)
    if "train" not in out:
        raise FileNotFoundError(f"dataset not found: no *_train.h5 in {path}")
    return out


def build_network(cfg: RunConfig, n_input: int, n_output: int) -> NetworkSpec:
    n = cfg.network
    neuron = NeuronParams(n.tau_mem, n.tau_syn, n.v_threshold, n.v_reset)
    net = make_network(n_input, list(n.hidden), n_output, architecture=n.architecture, dt=cfg.data.dt,
                       n_timesteps=cfg.data.n_timesteps, max_delay=n.max_delay,
                       delays_trainable=n.delays_trainable, recurrent_delays_trainable=n.recurrent_delays_trainable,
                       neuron=neuron)
    inits = []
    for p in net.projections:
        src = net.population(p.source)
        if p.source == p.target:
            c = cfg.init.recurrent
        elif net.population(p.target).kind != HIDDEN:
            c = cfg.init.output
        elif src.kind == HIDDEN:
            c = cfg.init.hidden
        else:
            c = cfg.init.input
        if not p.delays_trainable:
            c = InitConfig(c.weight_mean, c.weight_sd, 0.0, 0.0, c.seed)
        hi = min(c.delay_high, p.max_delay)
        inits.append(InitConfig(c.weight_mean, c.weight_sd, min(c.delay_low, hi), hi, cfg.init.seed))
    return init_parameters(net, inits)


def with_frozen_delays(cfg: RunConfig) -> RunConfig:
    """Same architecture and optimizer, delays fixed at zero."""
    out = copy.deepcopy(cfg)
    out.network.delays_trainable = False
    out.network.recurrent_delays_trainable = False
    return out
