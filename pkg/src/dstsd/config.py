"""Experiment configuration: dataclasses filled from ``key = value`` INI text.

Sections are ``[cable]``, ``[data]``, ``[model]``, ``[phase1]``,
``[monitor]`` and ``[experiment]``. Unknown sections or keys and values
that do not parse are :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .cable import CableConfig
from .phase1 import Phase1Config


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    case: str = "case1"
    cycles: tuple[int, ...] = (300, 400, 500)
    sites: tuple[int, ...] = (0,)
    amplitude: float = 5.0  # R0, the regular stimulus strength
    stim_duration: float = 2.0
    stim_cells: int = 3
    sigma: float = 0.1
    n_train: int = 3
    train_length: int = 600
    stream_length: int = 232
    warmup: int = 32
    onset_min: int = 62
    onset_max: int = 152
    anomaly_cells: int = 3
    anomaly_duration: float = 2.0


@dataclass
class ModelConfig:
    arch: str = "convlstm"
    hidden: int = 10
    kernel: int = 15
    head_channels: int = 5
    depth: int = 7
    channels: int = 6
    wavenet_kernel: int = 17
    seed: int = 0
    checkpoint: str = ""  # load instead of training when set

    def hyper(self) -> dict:
        if self.arch == "convlstm":
            return dict(hidden=self.hidden, kernel=self.kernel,
                        head_channels=self.head_channels, seed=self.seed)
        if self.arch == "convwavenet":
            return dict(depth=self.depth, channels=self.channels,
                        kernel=self.wavenet_kernel, seed=self.seed)
        raise ConfigError(f"unknown architecture {self.arch!r}")


@dataclass
class MonitorConfig:
    basis_size: int = 60
    identity_basis: bool = False
    window: int = 2
    gamma: float = 0.0  # 0 selects it from in-control residuals
    target_fdr: float = 0.05
    step: float = 0.01
    epochs: int = 5
    target_arl: float = 200.0
    arl_tol: float = 0.02
    n_calibration: int = 30
    detectors: tuple[str, ...] = ("dstsd", "residual", "hotelling")


@dataclass
class ExperimentConfig:
    replications: int = 30
    deltas: tuple[float, ...] = (0.3,)
    rollout_steps: int = 200
    rollout_streams: int = 3
    seed: int = 0


@dataclass
class Config:
    cable: CableConfig = field(default_factory=lambda: CableConfig(n_cells=300))
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    phase1: Phase1Config = field(default_factory=lambda: Phase1Config(batch=3, adamw_epochs=40))
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def as_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def digest(self) -> str:
        text = json.dumps(self.as_dict(), sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()

    def with_seed(self, seed: int) -> "Config":
        """Same configuration with every seed derived from ``seed``."""
        return dataclasses.replace(
            self,
            cable=dataclasses.replace(self.cable, rng_seed=seed),
            model=dataclasses.replace(self.model, seed=seed),
            phase1=dataclasses.replace(self.phase1, rng_seed=seed),
            experiment=dataclasses.replace(self.experiment, seed=seed),
        )

    def validate(self) -> None:
        try:
            self.cable.validate()
            self.phase1.validate()
            self.model.hyper()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        d, m = self.data, self.monitor
        if d.warmup < 1 or d.stream_length <= d.warmup + m.window + 1:
            raise ConfigError("stream_length must exceed warmup + window + 1")
        if not d.warmup <= d.onset_min <= d.onset_max < d.stream_length - 2:
            raise ConfigError("onset range must lie inside the monitored stream")
        if not 4 <= m.basis_size <= self.cable.n_cells and not m.identity_basis:
            raise ConfigError("basis_size must be in [4, n_cells]")
        if m.window < 0 or m.epochs < 1 or m.step <= 0:
            raise ConfigError("monitor window/epochs/step out of range")
        unknown = set(m.detectors) - {"dstsd", "residual", "hotelling"}
        if unknown:
            raise ConfigError(f"unknown detectors {sorted(unknown)}")
        if self.experiment.replications < 1:
            raise ConfigError("replications must be >= 1")


SECTIONS = {
    "cable": CableConfig,
    "data": DataConfig,
    "model": ModelConfig,
    "phase1": Phase1Config,
    "monitor": MonitorConfig,
    "experiment": ExperimentConfig,
}


def _coerce(raw: str, tp, where: str):
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            (inner, *_) = typing.get_args(tp)
            return tuple(_coerce(v.strip(), inner, where) for v in raw.split(",") if v.strip())
        if tp is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def parse_config(text: str, base: Config | None = None) -> Config:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = base or Config()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        updates = {}
        for key, raw in parser.items(section):
            if key not in names:
                raise ConfigError(f"unknown key {section}.{key}")
            updates[key] = _coerce(raw, hints[key], f"{section}.{key}")
        cfg = dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **updates)})
    cfg.validate()
    return cfg


def load_config(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: Config) -> str:
    """INI text that :func:`parse_config` maps back to ``cfg``."""
    lines = []
    for name, values in cfg.as_dict().items():
        lines.append(f"[{name}]")
        for k, v in values.items():
            if isinstance(v, (tuple, list)):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
