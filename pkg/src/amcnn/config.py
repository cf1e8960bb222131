"""Training configuration and its flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .density import SigmaPolicy
from .errors import AmcnnError
from .losses import LossConfig
from .model import HEAD_INITS, VARIANTS


class ConfigError(AmcnnError, ValueError):
    pass


@dataclass
class TrainConfig:
    """Every knob of the two training stages.

    Defaults follow the published setup where it gives one (Adam at 1e-5
    with beta1 0.9, batch 1, alpha 1e-7, 9 pretraining crops and 100
    fine-tuning crops per image); iteration counts are sized for a desktop.
    """

    lr: float = 1e-5
    pretrain_lr: float = 0.0  # 0 means "same as lr"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 1
    c_p: int = 9
    c_f: int = 100
    flip: bool = True
    pretrain_iters: int = 2000
    finetune_iters: int = 5000
    seed: int = 0
    alpha: float = 1e-7
    z: float = 1.0
    use_rd: bool = True
    sigma: str = "knn:0.3"
    rescale: bool = True
    variant: str = "AM-CNN"
    init_std: float = 0.01
    head_init: str = "halfnormal"
    attention_kernel: int = 1
    checkpoint_every: int = 0
    eval_every: int = 0
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.pretrain_lr < 0:
            raise ConfigError(f"pretrain_lr must be >= 0, got {self.pretrain_lr}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.c_p < 0 or self.c_f < 0:
            raise ConfigError("crop counts must be >= 0")
        if self.pretrain_iters < 0 or self.finetune_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.head_init not in HEAD_INITS:
            raise ConfigError(f"unknown head_init {self.head_init!r}; expected one of {', '.join(HEAD_INITS)}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            SigmaPolicy.parse(self.sigma)
            LossConfig(self.alpha, self.z, self.use_rd)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.alpha, self.z, self.use_rd)

    @property
    def sigma_policy(self) -> SigmaPolicy:
        return SigmaPolicy.parse(self.sigma)

    @property
    def effective_pretrain_lr(self) -> float:
        return self.pretrain_lr or self.lr

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name, typ, raw):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None


_TYPES = {f.name: {"float": float, "int": int, "bool": bool, "str": str}[f.type] for f in fields(TrainConfig)}


def parse_overrides(pairs, source="override"):
    """``["lr=1e-4", ...]`` -> dict of typed values.  Unknown keys are rejected."""
    out = {}
    for lineno, item in enumerate(pairs, 1):
        line = item.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {item.strip()!r}")
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, _TYPES[key], value)
    return out


def load_config(path=None, overrides=(), **base) -> TrainConfig:
    """Defaults, then ``base``, then the file at ``path``, then ``overrides``."""
    values = dict(base)
    if path:
        with open(path) as fh:
            values.update(parse_overrides(fh.read().splitlines(), source=str(path)))
    values.update(parse_overrides(list(overrides)))
    return TrainConfig(**values)
