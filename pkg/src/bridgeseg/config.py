"""Run configuration and the flat ``key = value`` config format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossWeights

METHODS = ("lsb", "oracle", "source_only", "pl")
ALIGN_VARIANTS = ("source_target", "bridge_target")
LR_SCHEDULES = ("constant", "step")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    method: str = "lsb"
    steps: int = 3000
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 250
    lr: float = 1e-3
    lr_schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha_max: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    use_con: bool = True
    use_ali: bool = True
    use_ph: bool = True
    use_pphi: bool = True
    align_variant: str = "source_target"
    hidden_dims: tuple[int, ...] = (64, 64)
    feat_dim: int = 32
    proj_dim: int = 16
    activation: str = "tanh"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.align_variant not in ALIGN_VARIANTS:
            raise ConfigError(f"align_variant must be one of {ALIGN_VARIANTS}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps, batch_size and eval_every must be >= 1")
        if not 0.0 <= self.alpha_max <= 1.0:
            raise ConfigError("alpha_max must lie in [0, 1]")

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``; 'step' decays x0.1 at 80% of the budget."""
        if self.lr_schedule == "step" and step >= int(0.8 * self.steps):
            return self.lr * 0.1
        return self.lr

    def with_overrides(self, overrides: dict) -> "RunConfig":
        flat = self.to_flat()
        for key, value in overrides.items():
            if key not in flat:
                raise ConfigError(f"unknown config key {key!r}")
            flat[key] = value
        return RunConfig.from_flat(flat)

    def to_flat(self) -> dict:
        out = {}
        for key, (attr, sub) in KEYS.items():
            value = getattr(self, attr)
            if sub is not None:
                value = getattr(value, sub)
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        unknown = set(flat) - set(KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw, weights = {}, {}
        types = {f.name: f.type for f in fields(cls)}
        for key, value in flat.items():
            attr, sub = KEYS[key]
            if sub is not None:
                weights[sub] = _coerce(key, value, float)
            else:
                kw[attr] = _coerce(key, value, _PY_TYPES[types[attr]])
        try:
            return cls(**kw, weights=LossWeights(**weights))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


KEYS: dict[str, tuple[str, str | None]] = {
    "train.method": ("method", None),
    "train.steps": ("steps", None),
    "train.batch_size": ("batch_size", None),
    "train.seed": ("seed", None),
    "train.eval_every": ("eval_every", None),
    "optim.lr": ("lr", None),
    "optim.lr_schedule": ("lr_schedule", None),
    "optim.beta1": ("beta1", None),
    "optim.beta2": ("beta2", None),
    "optim.eps": ("eps", None),
    "ema.alpha_max": ("alpha_max", None),
    "loss.lambda_c": ("weights", "lambda_c"),
    "loss.lambda_a": ("weights", "lambda_a"),
    "loss.lambda_w": ("weights", "lambda_w"),
    "ablation.use_con": ("use_con", None),
    "ablation.use_ali": ("use_ali", None),
    "ablation.use_ph": ("use_ph", None),
    "ablation.use_pphi": ("use_pphi", None),
    "ablation.align_variant": ("align_variant", None),
    "net.hidden_dims": ("hidden_dims", None),
    "net.feat_dim": ("feat_dim", None),
    "net.proj_dim": ("proj_dim", None),
    "net.activation": ("activation", None),
}

_PY_TYPES = {"str": str, "int": int, "float": float, "bool": bool, "tuple[int, ...]": tuple}


def _coerce(key: str, value, typ):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if typ is tuple:
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{key}: expected a list of integers, got {value!r}")
        return tuple(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def parse_value(text: str):
    """JSON literal if it parses, else the bare string."""
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignment(line: str) -> tuple[str, object]:
    if "=" not in line:
        raise ConfigError(f"expected key=value, got {line!r}")
    key, _, value = line.partition("=")
    return key.strip(), parse_value(value)


def read_kv_file(path: str | Path) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, value = parse_assignment(line)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(flat: dict) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in flat.items())


def split_prefixed(flat: dict) -> tuple[dict, dict]:
    """Separate ``bench.*`` keys (benchmark spec) from run-config keys."""
    bench = {k[len("bench."):]: v for k, v in flat.items() if k.startswith("bench.")}
    run = {k: v for k, v in flat.items() if not k.startswith("bench.")}
    return bench, run
