"""Run configuration: model/training hyperparameters and the synthetic data spec.

Defaults are desk scale.  The YAML template written by :func:`write_template`
annotates every key that has a full-scale counterpart.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """A configuration invariant is violated."""


FUSIONS = ("recurrent", "cascade", "add")


@dataclass
class DataSpec:
    num_classes: int = 6
    d_in: int = 32
    segments_per_action: int = 3
    segment_len: tuple[int, int] = (4, 8)
    background_gap: tuple[int, int] = (6, 20)
    noise_sigma: float = 0.3
    length: int = 2048
    num_train: int = 16
    num_eval: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("data.num_classes must be >= 1")
        if self.segments_per_action < 2:
            raise ConfigError("data.segments_per_action must be >= 2 (order carries the class)")
        for key in ("segment_len", "background_gap"):
            lo, hi = getattr(self, key)
            if not 1 <= lo <= hi:
                raise ConfigError(f"data.{key} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if self.noise_sigma < 0:
            raise ConfigError("data.noise_sigma must be >= 0")
        if self.num_train < 1 or self.num_eval < 1:
            raise ConfigError("data.num_train and data.num_eval must be >= 1")


@dataclass
class MaltConfig:
    m_s: int = 16
    m_l: int = 128
    d_in: int = 32
    d_model: int = 64
    heads: int = 4
    L: int = 16
    N: int = 2
    k: int = 32
    num_classes: int = 6
    sparse: bool = True
    fusion: str = "recurrent"
    alpha: float = 1.0
    beta: float = 0.4
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 25
    batch_size: int = 32
    windows_per_stream: int = 64
    eval_stride: int = 1
    seed: int = 0
    data: DataSpec = field(default_factory=DataSpec)

    def validate(self) -> None:
        """Raise :class:`ConfigError` naming the first violated invariant."""
        checks = [
            (self.m_s >= 1, "m_s >= 1"),
            (self.m_s < self.m_l, f"m_s < m_l (got m_s={self.m_s}, m_l={self.m_l})"),
            (self.N >= 1, "N >= 1"),
            (self.L >= 1 and self.L % (2 ** (self.N - 1)) == 0,
             f"L divisible by 2^(N-1) (got L={self.L}, N={self.N})"),
            (self.k >= 1, "k >= 1"),
            (self.d_model >= 1 and self.heads >= 1 and self.d_model % self.heads == 0,
             f"heads divides d_model (got d_model={self.d_model}, heads={self.heads})"),
            (self.d_in >= 1, "d_in >= 1"),
            (self.num_classes >= 1, "num_classes >= 1"),
            (self.fusion in FUSIONS, f"fusion in {FUSIONS}"),
            (self.alpha >= 0 and self.beta >= 0, "alpha, beta >= 0"),
            (self.lr > 0, "lr > 0"),
            (self.epochs >= 0, "epochs >= 0"),
            (self.batch_size >= 1, "batch_size >= 1"),
            (self.windows_per_stream >= 1, "windows_per_stream >= 1"),
            (self.eval_stride >= 1, "eval_stride >= 1"),
            (0 <= self.seed < 2 ** 64, "seed is an unsigned 64-bit integer"),
            (self.data.d_in == self.d_in, "data.d_in == d_in"),
            (self.data.num_classes == self.num_classes, "data.num_classes == num_classes"),
        ]
        for ok, what in checks:
            if not ok:
                raise ConfigError(f"config invariant violated: {what}")
        self.data.validate()

    @property
    def num_outputs(self) -> int:
        return self.num_classes + 1

    def betas(self) -> list[float]:
        return [self.beta] * self.N

    def replace(self, **changes) -> "MaltConfig":
        data_changes = changes.pop("data", None)
        cfg = dataclasses.replace(self, **changes)
        cfg.data = dataclasses.replace(self.data, **(data_changes or {}))
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("segment_len", "background_gap"):
            d["data"][key] = list(d["data"][key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MaltConfig":
        d = dict(d)
        data = dict(d.pop("data", {}) or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        dknown = {f.name for f in dataclasses.fields(DataSpec)}
        if set(data) - dknown:
            raise ConfigError(f"unknown data keys: {sorted(set(data) - dknown)}")
        for key in ("segment_len", "background_gap"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**_coerce(cls, d), data=DataSpec(**_coerce(DataSpec, data)))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def tiny_config(**overrides) -> MaltConfig:
    """The gradient-check configuration (a few thousand parameters)."""
    cfg = MaltConfig(m_s=4, m_l=8, d_in=6, d_model=8, heads=2, L=4, N=2, k=4, num_classes=2,
                     batch_size=2, windows_per_stream=4,
                     data=DataSpec(num_classes=2, d_in=6, length=64, num_train=2, num_eval=1))
    return cfg.replace(**overrides) if overrides else cfg


def load_config(path: str | Path) -> MaltConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    cfg = MaltConfig.from_dict(raw)
    cfg.validate()
    return cfg


def save_config(cfg: MaltConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def _coerce(cls, values: dict) -> dict:
    """Cast numeric fields (YAML reads ``1e-8`` as a string)."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, v in values.items():
        t = types[key]
        try:
            if t == "float" and not isinstance(v, bool):
                v = float(v)
            elif t == "int":
                if isinstance(v, bool) or float(v) != int(float(v)):
                    raise ValueError
                v = int(float(v))
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected {t}, got {v!r}") from None
        out[key] = v
    return out


_TEMPLATE = """\
# MALT desk-scale configuration.  Full-scale values in the trailing comments.
m_s: {m_s}              # short-term frames
m_l: {m_l}             # long-term frames (full scale: 512 s of history)
d_in: {d_in}             # input feature dim (full scale: two-stream video features)
d_model: {d_model}          # full scale: 1024
heads: {heads}             # full scale: 16
L: {L}               # latent length of branch 1 (full scale: 32)
N: {N}                # encoder branches / decoder stages (full scale: 2)
k: {k}               # top-k kept per score row (full scale: 370)
num_classes: {num_classes}      # action classes C; label 0 is background
sparse: {sparse}
fusion: {fusion}    # recurrent | cascade | add
alpha: {alpha}           # main loss weight
beta: {beta}            # aux loss weight per branch (full scale: 0.4)
lr: {lr}            # full scale: 5.0e-5
adam_beta1: {adam_beta1}
adam_beta2: {adam_beta2}
adam_eps: {adam_eps}
epochs: {epochs}          # full scale: 25
batch_size: {batch_size}
windows_per_stream: {windows_per_stream}  # training windows sampled per stream per epoch
eval_stride: {eval_stride}
seed: {seed}
data:
  num_classes: {data[num_classes]}
  d_in: {data[d_in]}
  segments_per_action: {data[segments_per_action]}
  segment_len: {data[segment_len]}
  background_gap: {data[background_gap]}
  noise_sigma: {data[noise_sigma]}
  length: {data[length]}
  num_train: {data[num_train]}
  num_eval: {data[num_eval]}
  seed: {data[seed]}
"""


def write_template(path: str | Path, cfg: MaltConfig | None = None) -> None:
    cfg = cfg or MaltConfig()
    d = cfg.to_dict()
    d["sparse"] = str(d["sparse"]).lower()
    Path(path).write_text(_TEMPLATE.format(**d))
