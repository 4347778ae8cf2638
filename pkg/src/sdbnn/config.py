"""Flat key=value run configuration.

One key per line, greppable and diffable across ablation sweeps. Unknown
keys are rejected; every run writes its fully resolved configuration next
to its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .autograd import SteKind
from .models import BinPolicy
from .trainer import OptimConfig


class ConfigError(ValueError):
    """Unknown key or unusable value in a run configuration."""


_BOOL = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}


@dataclass
class RunConfig:
    model: str = "lenet"
    dataset: str = "mnist"
    data_root: str = ""
    out_dir: str = "runs/run0"
    asd: str = "sigmoid"           # off | original | tanh | sigmoid
    dasd: bool = False
    re: int = 16
    wsd: bool = True
    scale: str = "off"             # off | analytic | learned
    ste: str = "clip"              # clip | approxsign
    opt: str = "adam"              # adam | sgd
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    schedule: str = "cosine"       # cosine | step
    milestones: tuple[int, ...] = ()
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    latent_clip: bool = True
    eval_every: int = 1
    limit_train: int = 0           # 0 = use the full split
    limit_test: int = 0
    bireal: bool = False
    full_width: bool = False
    figures: bool = True

    def validate(self):
        from .models import PRESETS
        if self.model not in PRESETS:
            raise ConfigError(f"unknown model {self.model!r} (choose from {sorted(PRESETS)})")
        if self.dataset not in ("mnist", "cifar10"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.asd not in ("off", "original", "tanh", "sigmoid"):
            raise ConfigError(f"bad asd={self.asd!r}")
        if self.scale not in ("off", "analytic", "learned"):
            raise ConfigError(f"bad scale={self.scale!r}")
        if self.ste not in ("clip", "approxsign"):
            raise ConfigError(f"bad ste={self.ste!r}")
        if self.opt not in ("adam", "sgd"):
            raise ConfigError(f"bad opt={self.opt!r}")
        if self.re < 1:
            raise ConfigError("re must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        return self

    # -- derived objects -------------------------------------------------

    def bin_policy(self) -> BinPolicy:
        return BinPolicy(asd=self.asd, dasd=self.dasd, re=self.re, wsd=self.wsd,
                         scale=self.scale)

    def ste_kind(self) -> SteKind:
        return SteKind.ClipSte if self.ste == "clip" else SteKind.ApproxSign

    def optim_config(self) -> OptimConfig:
        return OptimConfig(
            algorithm="adam" if self.opt == "adam" else "sgd_momentum",
            lr=self.lr, momentum=self.momentum, beta1=self.beta1, beta2=self.beta2,
            weight_decay=self.weight_decay, schedule=self.schedule,
            milestones=self.milestones, epochs=self.epochs, batch_size=self.batch_size,
            ste=self.ste_kind(), seed=self.seed, latent_clip=self.latent_clip,
            eval_every=self.eval_every,
        )

    # -- text round-trip -------------------------------------------------

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "on" if v else "off"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{f.name}={v}")
        return "\n".join(out) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, value: str):
    f = _FIELDS[key]
    if f.type == "bool":
        if value.lower() not in _BOOL:
            raise ConfigError(f"{key}: expected on/off, got {value!r}")
        return _BOOL[value.lower()]
    if f.type == "int":
        return int(value)
    if f.type == "float":
        return float(value)
    if f.type.startswith("tuple"):
        return tuple(int(x) for x in value.split(",")) if value else ()
    return value


def apply_kv(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply `key=value` override strings in order."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(cfg, key, _convert(key, value.strip()))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
    return cfg


def load_config(path: Path | None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        lines = []
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if line and not line.startswith("#"):
                lines.append(line)
        apply_kv(cfg, lines)
    if overrides:
        apply_kv(cfg, overrides)
    return cfg.validate()
