"""Run configuration: flat ``section.key=value`` text files.

Lines starting with ``#`` and blank lines are ignored; unknown keys are
errors. ``TrainConfig.to_text()`` writes every resolved key, so a saved
config reproduces the run exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .encoder import INITS, STRUCTURES, ExitSpec
from .losses import LossConfig, LossKind

__all__ = [
    "ConfigError",
    "DataConfig",
    "EncoderConfig",
    "OptimConfig",
    "BankConfig",
    "LinearEvalConfig",
    "ProbeConfig",
    "TrainConfig",
    "parse_config",
    "load_config",
]


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "synthetic"
    path: str = ""
    classes: int = 4
    dim: int = 20
    per_class: int = 500
    separation: float = 6.0
    noise: float = 1.0
    test_fraction: float = 0.2
    shuffle_labels: bool = False
    augment: str = "gaussian-noise"
    aug_sigma: float = 0.5
    aug_mask: float = 0.2
    single_view_augment: bool = False


@dataclass
class EncoderConfig:
    widths: tuple[int, ...] = (256, 256, 128, 128)
    layers_per_block: int = 2
    exits: tuple[ExitSpec, ...] = (ExitSpec(2, "small"),)
    head_dim: int = 128
    init: str = "he-normal"


@dataclass
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class BankConfig:
    enabled: bool = False
    capacity: int = 1024
    exits: str = "all"


@dataclass
class LinearEvalConfig:
    epochs: int = 20
    lr: float = 0.5
    batch_size: int = 64


@dataclass
class ProbeConfig:
    pairs: tuple[str, ...] = ()
    steps: int = 1000
    proj_dim: int = 20
    samples: int = 2000


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule_kind: str = "cosine"
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    protocol: str = "two-stage"
    beta: float = 1.0
    allow_selfcon_su: bool = False
    bank: BankConfig = field(default_factory=BankConfig)
    linear: LinearEvalConfig = field(default_factory=LinearEvalConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def replace(self, **flat: Any) -> "TrainConfig":
        """Copy with flat dotted overrides, e.g. ``replace(**{"loss.alpha": 0.5})``."""
        items = dict(self.items())
        for k, v in flat.items():
            if k not in items:
                raise ConfigError(f"unknown config key {k!r}")
            items[k] = v if isinstance(v, str) else _format(v)
        return parse_config("\n".join(f"{k}={v}" for k, v in items.items()))

    def items(self) -> list[tuple[str, str]]:
        return [(key, _format(getter(self))) for key, (getter, _) in _KEYS.items()]

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def validate(self) -> "TrainConfig":
        kind = self.loss.kind
        d = self.data
        if self.protocol not in ("two-stage", "one-stage"):
            raise ConfigError(f"train.protocol must be two-stage or one-stage, got {self.protocol!r}")
        for name, v in (("optim.lr", self.optim.lr), ("linear.lr", self.linear.lr),
                        ("loss.tau", self.loss.tau)):
            if not v > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.optim.momentum < 1 or self.optim.weight_decay < 0:
            raise ConfigError("optim.momentum must be in [0, 1) and weight_decay >= 0")
        if self.epochs < 0 or self.linear.epochs < 1:
            raise ConfigError("schedule.epochs must be >= 0 and linear.epochs >= 1")
        if self.batch_size < 2 or self.linear.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 2")
        if self.schedule_kind not in ("cosine", "constant"):
            raise ConfigError("schedule.kind must be cosine or constant")
        if d.kind not in ("synthetic", "file"):
            raise ConfigError("data.kind must be synthetic or file")
        if d.kind == "file" and not d.path:
            raise ConfigError("data.kind=file needs data.path")
        if d.kind == "synthetic" and d.classes > d.dim:
            raise ConfigError("data.classes cannot exceed data.dim for synthetic clusters")
        if not 0 < d.test_fraction < 1:
            raise ConfigError("data.test_fraction must be in (0, 1)")
        if d.augment not in ("identity", "gaussian-noise", "mask", "flip-crop"):
            raise ConfigError(f"unknown data.augment {d.augment!r}")
        if self.beta < 0:
            raise ConfigError("train.beta must be non-negative")
        if self.protocol == "one-stage":
            if not kind.selfcon:
                raise ConfigError("one-stage training needs a SelfCon loss kind")
            if not self.encoder.exits:
                raise ConfigError("one-stage training needs at least one sub-network exit")
        if kind is LossKind.SELFCON_SU:
            if not self.allow_selfcon_su:
                raise ConfigError("selfcon-su is disabled: it fails to converge; "
                                  "set loss.allow_selfcon_su=true to run it anyway")
            warnings.warn("selfcon-su enabled: this loss is known to fail to converge", stacklevel=2)
        if self.bank.enabled and (kind.multiview or not kind.contrastive):
            raise ConfigError("the memory bank only applies to single-view contrastive losses")
        if self.bank.exits not in ("all", "backbone") or self.bank.capacity < 0:
            raise ConfigError("bank.exits must be all|backbone and bank.capacity >= 0")
        if len(self.encoder.widths) < 1 or min(self.encoder.widths) < 1 or self.encoder.layers_per_block < 1:
            raise ConfigError("encoder widths and layers_per_block must be positive")
        if self.encoder.init not in INITS:
            raise ConfigError(f"encoder.init must be one of {INITS}")
        L = len(self.encoder.widths)
        for e in self.encoder.exits:
            if not 1 <= e.position < L:
                raise ConfigError(f"exit position {e.position} outside [1, {L - 1}]")
        if len({e.position for e in self.encoder.exits}) != len(self.encoder.exits):
            raise ConfigError("duplicate exit positions")
        return self


# -- key table -----------------------------------------------------------------

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _exits(s: str) -> tuple[ExitSpec, ...]:
    s = s.strip()
    if s in ("", "none"):
        return ()
    out = []
    for part in s.split(","):
        pos, _, structure = part.strip().partition(":")
        structure = (structure or "small").strip().lower()
        if structure not in STRUCTURES:
            raise ValueError(f"unknown exit structure {structure!r}")
        out.append(ExitSpec(int(pos), structure))
    return tuple(out)


def _pairs(s: str) -> tuple[str, ...]:
    if s.strip() == "none":
        return ()
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, LossKind):
        return v.value
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], ExitSpec):
            return ",".join(f"{e.position}:{e.structure}" for e in v)
        if not v:
            return "none"
        return ",".join(str(x) for x in v)
    return str(v)


def _attr(path: str) -> Callable:
    def get(cfg):
        obj = cfg
        for part in path.split("."):
            obj = getattr(obj, part)
        return obj
    return get


_KEYS: dict[str, tuple[Callable, Callable]] = {
    "seed": (_attr("seed"), int),
    "data.kind": (_attr("data.kind"), str),
    "data.path": (_attr("data.path"), str),
    "data.classes": (_attr("data.classes"), int),
    "data.dim": (_attr("data.dim"), int),
    "data.per_class": (_attr("data.per_class"), int),
    "data.separation": (_attr("data.separation"), float),
    "data.noise": (_attr("data.noise"), float),
    "data.test_fraction": (_attr("data.test_fraction"), float),
    "data.shuffle_labels": (_attr("data.shuffle_labels"), _bool),
    "data.augment": (_attr("data.augment"), str),
    "data.aug_sigma": (_attr("data.aug_sigma"), float),
    "data.aug_mask": (_attr("data.aug_mask"), float),
    "data.single_view_augment": (_attr("data.single_view_augment"), _bool),
    "encoder.widths": (_attr("encoder.widths"), _ints),
    "encoder.layers_per_block": (_attr("encoder.layers_per_block"), int),
    "encoder.exits": (_attr("encoder.exits"), _exits),
    "encoder.head_dim": (_attr("encoder.head_dim"), int),
    "encoder.init": (_attr("encoder.init"), str),
    "loss.kind": (_attr("loss.kind"), LossKind),
    "loss.tau": (_attr("loss.tau"), float),
    "loss.alpha": (_attr("loss.alpha"), float),
    "loss.normalization": (_attr("loss.normalization"), str),
    "loss.allow_selfcon_su": (_attr("allow_selfcon_su"), _bool),
    "optim.lr": (_attr("optim.lr"), float),
    "optim.momentum": (_attr("optim.momentum"), float),
    "optim.weight_decay": (_attr("optim.weight_decay"), float),
    "schedule.kind": (_attr("schedule_kind"), str),
    "schedule.epochs": (_attr("epochs"), int),
    "train.batch_size": (_attr("batch_size"), int),
    "train.protocol": (_attr("protocol"), str),
    "train.beta": (_attr("beta"), float),
    "bank.enabled": (_attr("bank.enabled"), _bool),
    "bank.capacity": (_attr("bank.capacity"), int),
    "bank.exits": (_attr("bank.exits"), str),
    "linear.epochs": (_attr("linear.epochs"), int),
    "linear.lr": (_attr("linear.lr"), float),
    "linear.batch_size": (_attr("linear.batch_size"), int),
    "probe.pairs": (_attr("probe.pairs"), _pairs),
    "probe.steps": (_attr("probe.steps"), int),
    "probe.proj_dim": (_attr("probe.proj_dim"), int),
    "probe.samples": (_attr("probe.samples"), int),
}


def parse_config(text: str, overrides: dict[str, Any] | None = None) -> TrainConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        raw[key] = value.strip()
    for k, v in (overrides or {}).items():
        if k not in _KEYS:
            raise ConfigError(f"unknown config key {k!r}")
        raw[k] = _format(v) if not isinstance(v, str) else v

    vals: dict[str, Any] = {}
    for key, value in raw.items():
        try:
            vals[key] = _KEYS[key][1](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc

    kind = vals.get("loss.kind", LossKind.SELFCON_S)
    tau = vals.get("loss.tau", 0.1 if kind.supervised else 0.5)
    try:
        loss = LossConfig(kind, tau, vals.get("loss.alpha", 1.0),
                          vals.get("loss.normalization", "per-anchor-mean"))
    except ValueError as exc:
        raise ConfigError(f"loss: {exc}") from exc

    def sub(cls, prefix):
        kw = {}
        for f in dataclasses.fields(cls):
            if f"{prefix}.{f.name}" in vals:
                kw[f.name] = vals[f"{prefix}.{f.name}"]
        return cls(**kw)

    defaults = TrainConfig()
    cfg = TrainConfig(
        data=sub(DataConfig, "data"),
        encoder=sub(EncoderConfig, "encoder"),
        loss=loss,
        optim=sub(OptimConfig, "optim"),
        schedule_kind=vals.get("schedule.kind", defaults.schedule_kind),
        epochs=vals.get("schedule.epochs", defaults.epochs),
        batch_size=vals.get("train.batch_size", defaults.batch_size),
        seed=vals.get("seed", defaults.seed),
        protocol=vals.get("train.protocol", defaults.protocol),
        beta=vals.get("train.beta", defaults.beta),
        allow_selfcon_su=vals.get("loss.allow_selfcon_su", False),
        bank=sub(BankConfig, "bank"),
        linear=sub(LinearEvalConfig, "linear"),
        probe=sub(ProbeConfig, "probe"),
    )
    return cfg.validate()


def load_config(path, overrides: dict[str, Any] | None = None) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)

