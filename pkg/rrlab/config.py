"""Experiment configuration from plain-text key=value files.

Each line is ``section.key=value``; ``#`` starts a comment. Tuples are comma
separated. Every key can also be overridden from the command line with
``--set section.key=value``. Unknown keys are an error.
"""

import dataclasses
import hashlib
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path

from rrlab.errors import ConfigError
from rrlab.model import Architecture

log = logging.getLogger(__name__)

FRAMEWORKS = ("pgd-at", "trades")
RCON_MODES = ("rcon", "aphi-only", "conf-only")
NORMS = ("linf", "l2")
OBJECTIVES = ("ce", "ce+rcon", "ce+rr", "con+rr", "con+rcon")
DATA_KINDS = ("blobs", "moons", "rings", "csv")
REJECTORS = ("conf", "tcon", "rcon", "aphi")


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (64, 64)
    aux_hidden: int = 0  # 0 means half the feature width

    def __post_init__(self):
        if any(w < 1 for w in self.widths):
            raise ValueError(f"model.widths must all be >= 1, got {list(self.widths)}")
        if self.aux_hidden < 0:
            raise ValueError(f"model.aux_hidden must be >= 0, got {self.aux_hidden}")

    def architecture(self, input_dim: int, n_classes: int) -> Architecture:
        return Architecture(
            input_dim=input_dim,
            widths=self.widths,
            n_classes=n_classes,
            aux_hidden=self.aux_hidden or None,
        )


@dataclass
class DataConfig:
    kind: str = "blobs"
    path: str = ""
    n_classes: int = 4
    dim: int = 8
    n_per_class: int = 200
    n: int = 800
    separation: float = 4.0
    noise: float = 1.0
    seed: int = 0
    val_fraction: float = 0.25

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ValueError(f"data.kind must be one of {', '.join(DATA_KINDS)}, got {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ValueError("data.path is required when data.kind=csv")
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"data.val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.noise < 0:
            raise ValueError(f"data.noise must be >= 0, got {self.noise}")


@dataclass
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 0.25
    step_size: float = 0.0  # 0 means epsilon / 4
    steps: int = 10
    restarts: int = 1
    objective: str = "ce"
    eta: float = 1.0
    eta_grid: tuple[float, ...] = (0.5, 1.0, 2.0)
    kinds: tuple[str, ...] = OBJECTIVES
    adaptive_steps: int = 100
    adaptive_restarts: int = 5
    rcon_log: bool = True
    box: bool = False
    box_low: float = 0.0
    box_high: float = 1.0
    search_steps: int = 9
    eps_max: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"attack.norm must be linf or l2, got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError(f"attack.epsilon must be >= 0, got {self.epsilon}")
        if self.step_size < 0:
            raise ValueError(f"attack.step_size must be >= 0, got {self.step_size}")
        if self.steps < 0 or self.adaptive_steps < 0:
            raise ValueError("attack.steps must be >= 0")
        if self.restarts < 1 or self.adaptive_restarts < 1:
            raise ValueError("attack.restarts must be >= 1")
        for kind in (self.objective, *self.kinds):
            if kind not in OBJECTIVES:
                raise ValueError(f"attack objective must be one of {', '.join(OBJECTIVES)}, got {kind!r}")
        if self.eta < 0 or any(e < 0 for e in self.eta_grid):
            raise ValueError("attack.eta must be >= 0")
        if self.box and self.box_low >= self.box_high:
            raise ValueError(
                f"attack.box_low ({self.box_low}) must be less than attack.box_high ({self.box_high})"
            )
        if self.search_steps < 0:
            raise ValueError(f"attack.search_steps must be >= 0, got {self.search_steps}")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size > 0 else self.epsilon / 4

    def adaptive(self, objective: str, eta: float) -> "AttackConfig":
        """Same ball with the adaptive budget and the given objective."""
        return dataclasses.replace(
            self,
            objective=objective,
            eta=eta,
            steps=self.adaptive_steps,
            restarts=self.adaptive_restarts,
        )


@dataclass
class TrainConfig:
    framework: str = "pgd-at"
    lam: float = 1.0
    trades_beta: float = 6.0
    tau_rr: float = 1.0
    rcon_mode: str = "rcon"
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (30, 35)
    decay: float = 0.1
    seed: int = 0
    rr_on_clean: bool = False
    attack_includes_aphi: bool = False
    attack_bn_mode: str = "eval"

    def __post_init__(self):
        if self.framework not in FRAMEWORKS:
            raise ValueError(f"train.framework must be pgd-at or trades, got {self.framework!r}")
        if self.rcon_mode not in RCON_MODES:
            raise ValueError(f"train.rcon_mode must be one of {', '.join(RCON_MODES)}, got {self.rcon_mode!r}")
        if self.lam < 0:
            raise ValueError(f"train.lam must be >= 0, got {self.lam}")
        if self.trades_beta < 0:
            raise ValueError(f"train.trades_beta must be >= 0, got {self.trades_beta}")
        if not self.tau_rr > 0:
            raise ValueError(f"train.tau_rr must be positive, got {self.tau_rr}")
        if self.epochs < 0:
            raise ValueError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"train.batch_size must be >= 2, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"train.lr must be positive, got {self.lr}")
        if self.seed < 0:
            raise ValueError(f"train.seed must be >= 0, got {self.seed}")
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"train.milestones must be strictly increasing, got {ms}")
        if ms and self.epochs > 0 and ms[-1] >= self.epochs:
            raise ValueError(f"train.milestones must be < train.epochs ({self.epochs}), got {ms}")
        if self.attack_bn_mode not in ("train", "eval"):
            raise ValueError(f"train.attack_bn_mode must be train or eval, got {self.attack_bn_mode!r}")


@dataclass
class EvalConfig:
    tpr: float = 0.95
    ece_bins: int = 15
    xi_points: int = 101
    xi_max: float = 0.99
    rejectors: tuple[str, ...] = REJECTORS
    tau_exponents: tuple[int, ...] = (-4, -3, -2, -1, 0, 1, 2, 3, 4)

    def __post_init__(self):
        if not 0 < self.tpr <= 1:
            raise ValueError(f"eval.tpr must be in (0, 1], got {self.tpr}")
        if self.ece_bins < 1:
            raise ValueError(f"eval.ece_bins must be >= 1, got {self.ece_bins}")
        if self.xi_points < 1 or not 0 <= self.xi_max < 1:
            raise ValueError("eval.xi grid must have >= 1 point on [0, xi_max], xi_max < 1")
        for r in self.rejectors:
            if r not in REJECTORS:
                raise ValueError(f"eval.rejectors entries must be one of {', '.join(REJECTORS)}, got {r!r}")


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(Config)}
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(tp, text: str):
    text = text.strip()
    if tp is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if typing.get_origin(tp) is tuple:
        inner = typing.get_args(tp)[0]
        return tuple(_coerce(inner, part) for part in text.split(",") if part.strip())
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    return str(value)


def _assign(raw: dict[str, dict], assignment: str, where: str):
    key, sep, value = assignment.partition("=")
    if not sep:
        raise ConfigError(f"{where}: expected section.key=value, got {assignment!r}")
    section, dot, name = key.strip().partition(".")
    if not dot or section not in _SECTIONS:
        raise ConfigError(f"{where}: unknown config key {key.strip()!r}")
    hints = typing.get_type_hints(_SECTIONS[section])
    if name not in hints:
        raise ConfigError(f"{where}: unknown config key {key.strip()!r}")
    try:
        raw[section][name] = _coerce(hints[name], value)
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key.strip()}: {e}") from None


def _build(raw: dict[str, dict]) -> Config:
    try:
        return Config(**{name: _SECTIONS[name](**values) for name, values in raw.items()})
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _raw(config: Config) -> dict[str, dict]:
    return {name: dataclasses.asdict(getattr(config, name)) for name in _SECTIONS}


def parse_config(text: str, overrides: typing.Sequence[str] = (), origin: str = "<config>") -> Config:
    raw: dict[str, dict] = {name: {} for name in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if line:
            _assign(raw, line, f"{origin}:{lineno}")
    for item in overrides:
        _assign(raw, item, "--set")
    return _build(raw)


def load_config(path: Path, overrides: typing.Sequence[str] = ()) -> Config:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    log.info("Loading config from %s", path)
    return parse_config(path.read_text(), overrides, origin=str(path))


def apply_overrides(config: Config, overrides: typing.Sequence[str]) -> Config:
    raw = _raw(config)
    for item in overrides:
        _assign(raw, item, "--set")
    return _build(raw)


def dump_config(config: Config) -> str:
    lines = []
    for section, values in _raw(config).items():
        lines += [f"{section}.{k}={_render(v)}" for k, v in values.items()]
    return "\n".join(lines) + "\n"


def config_digest(config: Config) -> str:
    return hashlib.sha256(dump_config(config).encode()).hexdigest()
