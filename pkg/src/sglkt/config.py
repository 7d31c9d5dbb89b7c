"""Experiment configuration and its JSON file form."""

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .graph import GRAPH_MODES

MODES = ("sgl", "sgl_kt", "generative", "generative_kt")


@dataclass
class TrainConfig:
    mode: str = "sgl"
    graph_mode: str = "sgl"
    steps: int = 2
    heads: int = 2
    d_h: int = 512
    d_ff: int = 0  # 0 means 4 * d_h
    tau: float = 0.5
    lam: float = 1.0
    edge_grad_clip: float = 0.0  # 0 leaves the straight-through edge gradient unclipped
    dropout: float = 0.0  # on attention sublayer outputs, training only
    top_i: int = 1
    lr_init: float = 1e-4
    lr_peak: float = 4e-4
    warmup_epochs: int = 4
    decay_start: int = 12
    decay_every: int = 3
    decay_end: int = 24
    decay_factor: float = 0.5
    epochs: int = 20
    batch_size: int = 1
    seed: int = 0
    data_seed: int = 0
    train_path: str = ""
    val_path: str = ""
    output_dir: str = "runs/default"
    eval_every: int = 0  # 0 disables per-epoch validation
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.graph_mode not in GRAPH_MODES:
            raise ConfigError(f"unknown graph_mode {self.graph_mode!r}; expected one of {GRAPH_MODES}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.heads < 1 or self.d_h % self.heads:
            raise ConfigError(f"d_h={self.d_h} is not divisible by heads={self.heads}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.edge_grad_clip < 0:
            raise ConfigError(f"edge_grad_clip must be >= 0, got {self.edge_grad_clip}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.top_i < 1:
            raise ConfigError(f"top_i must be >= 1, got {self.top_i}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        return self

    @property
    def discriminative(self):
        return self.mode in ("sgl", "sgl_kt")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**d)


def _coerce(value, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    try:
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {value!r} as {type(current).__name__}") from exc
    if isinstance(current, dict):
        return json.loads(value)
    return value


def apply_overrides(cfg, overrides):
    """Apply ``key=value`` strings, typed by the current field values."""
    d = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        if key not in d:
            raise ConfigError(f"unknown config key {key!r}")
        d[key] = _coerce(value, d[key])
    return TrainConfig.from_dict(d).validate()


def load_config(path=None, overrides=()):
    cfg = TrainConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = TrainConfig.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return apply_overrides(cfg, overrides)


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
