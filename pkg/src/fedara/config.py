"""Flat ``key = value`` experiment configuration.

One assignment per line, ``#`` starts a comment. Values are numbers,
bare identifiers (``fedara``, ``true``), quoted strings for paths, or
comma-separated number lists (only ``r_values`` uses these).
"""

from __future__ import annotations

import dataclasses
import shlex
from dataclasses import dataclass, fields

from .metrics import DriftParams
from .numerics import ContractError
from .trainer import NUM_SITES

METHODS = ("fedara", "fedsvd", "fedlora")
SCHEMES = ("dirichlet", "pathological", "iid")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "fedara"
    d: int = 16
    classes: int = 4
    blocks: int = 2
    r_init: int = 8
    T_r: float | None = None
    T_h: float = 0.5
    alpha_scale: float = 16.0
    init_std: float = 0.02
    t_w: int = 5
    t_f: int | None = None
    T: int = 100
    num_clients: int = 100
    clients_per_round: int = 10
    partition: str = "dirichlet"
    alpha: float = 0.1
    labels_per_client: int = 2
    lr: float = 2e-2
    batch_size: int = 4
    epochs_per_round: int = 1
    seed: int = 0
    n_samples: int = 4000
    margin: float = 3.0
    pretrain_samples: int = 2000
    pretrain_epochs: int = 3
    data_path: str | None = None
    module_pruning: bool = True
    discrepancy_site: int = 2
    output: str = "fedara_out"

    def __post_init__(self):
        if self.T_r is None:
            object.__setattr__(self, "T_r", self.r_init / 4)
        if self.t_f is None:
            object.__setattr__(self, "t_f", self.T // 2)
        validate(self)

    @property
    def b0(self) -> int:
        return self.r_init * NUM_SITES

    @property
    def bT(self) -> int:
        return int(self.T_r * NUM_SITES)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DriftConfig:
    d: int = 64
    r_values: tuple = (2, 4, 8, 16, 32)
    tau_b: float = 1.0
    rho_b: float = 0.8
    tau_a: float = 1.0
    rho_a: float = 0.8
    tau_e: float = 1.0
    trials: int = 2000
    seed: int = 0
    output: str = "fedara_out"

    def __post_init__(self):
        try:
            self.params()
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    def params(self) -> DriftParams:
        kwargs = {f.name: getattr(self, f.name) for f in fields(DriftParams)}
        return DriftParams(**kwargs)


def validate(cfg: ExperimentConfig) -> None:
    def need(cond, message):
        if not cond:
            raise ConfigError(message)

    need(cfg.method in METHODS, f"method must be one of {METHODS}, got {cfg.method!r}")
    need(cfg.partition in SCHEMES, f"partition must be one of {SCHEMES}, got {cfg.partition!r}")
    need(cfg.blocks == 2, "blocks must be 2")
    need(cfg.classes >= 2 and cfg.d >= cfg.classes, "need classes >= 2 and d >= classes")
    need(cfg.r_init >= 1, "r_init must be >= 1")
    need(2 * cfg.r_init <= cfg.d, "r_init must be <= d/2")
    need(0 <= cfg.T_r <= cfg.r_init, "T_r must satisfy 0 <= T_r <= r_init")
    need(0 <= cfg.T_h < 1, "T_h must be in [0, 1)")
    need(cfg.T >= 1, "T must be >= 1")
    need(cfg.t_w >= 0 and cfg.t_f >= 0, "t_w and t_f must be non-negative")
    need(cfg.t_w + cfg.t_f < cfg.T, "t_w + t_f must be < T")
    need(cfg.num_clients >= 1, "num_clients must be >= 1")
    need(1 <= cfg.clients_per_round <= cfg.num_clients, "clients_per_round must be in [1, num_clients]")
    need(cfg.alpha > 0, "alpha must be positive")
    need(cfg.labels_per_client in (1, 2), "labels_per_client must be 1 or 2")
    need(cfg.lr > 0 and cfg.alpha_scale > 0 and cfg.init_std > 0, "lr, alpha_scale and init_std must be positive")
    need(cfg.batch_size >= 1 and cfg.epochs_per_round >= 1, "batch_size and epochs_per_round must be >= 1")
    need(cfg.seed >= 0, "seed must be non-negative")
    need(cfg.n_samples >= 10 and cfg.pretrain_samples >= 1, "n_samples must be >= 10")
    need(cfg.pretrain_epochs >= 0, "pretrain_epochs must be >= 0")
    need(0 <= cfg.discrepancy_site < NUM_SITES, f"discrepancy_site must be in [0, {NUM_SITES})")


def _tokens(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        try:
            parts = shlex.split(value, comments=True)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        if len(parts) != 1:
            raise ConfigError(f"line {lineno}: expected a single value for {key!r}")
        yield lineno, key, parts[0]


def _convert(key: str, value: str, typ, lineno: int):
    try:
        if typ is bool:
            if value.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return value.lower() == "true"
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is tuple:
            return tuple(int(v) for v in value.split(","))
        return value
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None


_TYPES = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}


def _field_type(f) -> type:
    name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "str")
    return _TYPES[name.split("|")[0].strip()]


def _parse(text: str, cls):
    known = {f.name: f for f in fields(cls)}
    values = {}
    for lineno, key, value in _tokens(text):
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, value, _field_type(known[key]), lineno)
    return cls(**values)


def parse_config(text: str) -> ExperimentConfig:
    return _parse(text, ExperimentConfig)


def parse_drift_config(text: str) -> DriftConfig:
    return _parse(text, DriftConfig)


def load_config(path, parser=parse_config):
    with open(path, encoding="utf-8") as fh:
        return parser(fh.read())


def serialize_config(cfg) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif f.name in ("data_path", "output"):
            text = shlex.quote(value)
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
