"""Run configuration: ``key = value`` text files, overridden by command-line flags."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelGraph, PRESETS
from .rm import RmConfig
from .rotation import ConfigError
from .training import TrainConfig


@dataclass
class RunConfig:
    preset: str = "rmnet-s"
    rm: str = "none"  # "none" or "start:end"
    k: int = 0  # 0: derived from theta
    theta: float = 90.0
    fusion: str = "meanout"
    interp: str = "auto"
    rotate: bool = True
    share_weights: bool = True
    parallel: bool = False  # evaluate RM branches on threads; ignored under strict
    head: str = "hasher"
    hash_bits: int = 16
    width: int = 16
    stem_stride: int = 4
    input_size: int = 64
    lr0: float = 0.01
    decay_factor: float = 0.1
    decay_every: int = 20
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch: int = 32
    epochs: int = 60
    seed: int = 0
    split_seed: int = 0
    data: str = ""
    out: str = ""
    strict: bool = False

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def update(self, values: dict[str, str]) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, key, _coerce(key, raw, getattr(self, key)))
        return self

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().update(parse_kv(text))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_show(getattr(self, f.name))}\n" for f in fields(self))

    def rm_span(self) -> tuple[int, int] | None:
        if self.rm.strip().lower() in ("none", ""):
            return None
        try:
            a, b = (int(v) for v in self.rm.split(":"))
        except ValueError:
            raise ConfigError(f"rm span must be 'none' or 'start:end', got {self.rm!r}") from None
        return a, b

    def rm_config(self) -> RmConfig:
        k = self.k or int(round(360 / self.theta))
        interp = None if self.interp == "auto" else self.interp
        return RmConfig(k=k, theta_degrees=self.theta, fusion=self.fusion, interp=interp,
                        rotate=self.rotate, share_weights=self.share_weights,
                        parallel=self.parallel and not self.strict)

    def graph(self, num_classes: int) -> ModelGraph:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; available: {sorted(PRESETS)}")
        span = self.rm_span()
        rm = self.rm_config()  # validated even for baselines, so typos never pass silently
        graph = PRESETS[self.preset](num_classes=num_classes, head=self.head, rm_span=span,
                                     rm=rm if span else None, input_size=self.input_size,
                                     width=self.width, stem_stride=self.stem_stride, hash_bits=self.hash_bits)
        return graph.validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr0=self.lr0, decay_factor=self.decay_factor, decay_every=self.decay_every,
                           momentum=self.momentum, weight_decay=self.weight_decay, batch=self.batch,
                           epochs=self.epochs, seed=self.seed)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(key: str, raw, current):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _show(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)
