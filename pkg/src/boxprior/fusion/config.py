"""Training configuration and its ``key = value`` text format."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from boxprior.errors import ConfigError


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 300
    batch_size: int = 8
    learning_rate: float = 0.2
    lam: float = 0.1
    layers: int = 3
    widths: tuple[int, ...] = (16, 16, 16)
    hidden: int = 32
    heads: int = 2
    classes: int = 4
    epsilon_cosine: float = 1e-8
    scenes: int = 8

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.layers < 1 or len(self.widths) != self.layers:
            raise ConfigError(f"need one width per layer: L={self.layers}, widths={self.widths}")
        if any(w < 1 for w in self.widths) or self.hidden < 1 or self.classes < 2:
            raise ConfigError("widths, hidden size and class count must be positive")
        if self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if self.epochs < 0 or self.batch_size < 1 or self.scenes < 1:
            raise ConfigError("epochs, batch_size and scenes must be positive")
        if self.learning_rate < 0 or self.lam < 0 or self.epsilon_cosine <= 0:
            raise ConfigError("learning_rate and lambda must be >= 0, epsilon_cosine > 0")

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


# file key -> dataclass field
_KEYS = {
    "seed": "seed",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "lambda": "lam",
    "L": "layers",
    "D_l": "widths",
    "D": "hidden",
    "heads": "heads",
    "classes": "classes",
    "epsilon_cosine": "epsilon_cosine",
    "scenes": "scenes",
}
_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown or malformed entry {raw.strip()!r}")
        name = _KEYS[key]
        try:
            if name == "widths":
                values[name] = tuple(int(v) for v in value.replace(",", " ").split())
            elif _TYPES[name] in ("int", int):
                values[name] = int(value)
            else:
                values[name] = float(value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
    if "layers" in values and "widths" not in values:
        values["widths"] = (TrainConfig.widths[0],) * values["layers"]
    if "widths" in values and "layers" not in values:
        values["layers"] = len(values["widths"])
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def format_config(cfg: TrainConfig) -> str:
    inverse = {v: k for k, v in _KEYS.items()}
    lines = []
    for name, value in asdict(cfg).items():
        if name == "widths":
            value = ", ".join(map(str, value))
        lines.append(f"{inverse[name]} = {value}")
    return "\n".join(lines) + "\n"
