"""Run configuration: defaults, validation, and the flat ``key = value`` text format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str | None = None
    format: str = "tsv"
    snapshots: int | None = None
    split: str = "0.7"
    dim: int = 16
    K: int = 2
    L: int = 2
    S: int = 2
    D: int = 3
    layers: int = 4
    r: float = 2.0
    s: float = 1.0
    lam: float = 1.0
    lr: float = 0.001
    epochs: int = 200
    patience: int = 30
    step_per_snapshot: bool = False
    seed_init: int = 0
    seed_neg_train: int = 1
    seed_neg_eval: int = 2
    no_hdgc: bool = False
    no_hdcc: bool = False
    euclidean: bool = False
    padding: str = "origin"
    task: str = "both"
    seeds: list[int] = field(default_factory=lambda: [0])

    def validate(self) -> "RunConfig":
        for name in ("dim", "K", "L", "S", "D", "layers"):
            v = getattr(self, name)
            if name == "K":
                if v < 0:
                    raise ConfigError("K: must be >= 0")
            elif v < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.s <= 0 or self.r <= 0:
            raise ConfigError("r, s: must be positive")
        if self.lam < 0:
            raise ConfigError("lam: must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr: must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.padding not in ("origin", "random"):
            raise ConfigError("padding: expected origin or random")
        if self.format not in ("tsv", "snapshots"):
            raise ConfigError("format: expected tsv or snapshots")
        if self.task not in ("link", "new_link", "both"):
            raise ConfigError("task: expected link, new_link or both")
        if self.snapshots is not None and self.snapshots < 2:
            raise ConfigError("snapshots: must be >= 2")
        return self

    @property
    def window(self) -> int:
        return self.S ** self.D

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            k, v = (x.strip() for x in line.split("=", 1))
            values[k] = v
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        kinds = {f.name: f for f in fields(cls)}
        out = {}
        for k, v in values.items():
            if k not in kinds:
                raise ConfigError(f"{k}: unknown config key")
            out[k] = _coerce(k, kinds[k].type, v)
        return cls(**out).validate()


def _coerce(name, typ, v):
    if not isinstance(v, str):
        return v
    typ = str(typ)
    try:
        if v == "" and "None" in typ:
            return None
        if typ.startswith("bool"):
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        if typ.startswith("int"):
            return int(v)
        if typ.startswith("float"):
            return float(v)
        if typ.startswith("list"):
            return [int(x) for x in v.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {v!r} as {typ}") from None
    return v
